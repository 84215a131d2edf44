"""Exact Gaussian-process regression with a squared-exponential kernel."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

from .errors import IllConditionedKernel, InvalidArgument, NoCluster
from .field import GridSpec, ScalarGrid
from .segmentation import two_means

SIGNAL_VARIANCE_FLOOR = 1.0
PRIOR_STATISTICS = ("mean", "median", "background")


@dataclass(frozen=True)
class GpHyper:
    """Kernel hyperparameters.

    ``signal_variance=None`` means "variance of the observed outputs, floored
    at 1 kPa^2", re-evaluated at every fit. ``prior_mean`` is a constant, or
    ``"mean"`` / ``"median"`` for the running statistic of the observed
    outputs (0 for an empty model), or ``"background"`` for the centre of the
    lower of two 1-D clusters. ``None`` is the same as ``"median"``. The median
    default keeps a few stiff readings from lifting the background estimate.
    """

    length_scale: float = 5.0
    signal_variance: float | None = None
    noise_variance: float = 6.25
    prior_mean: float | str | None = "median"

    def __post_init__(self):
        if not self.length_scale > 0:
            raise InvalidArgument(f"length_scale must be > 0, got {self.length_scale}")
        if self.signal_variance is not None and not self.signal_variance > 0:
            raise InvalidArgument(f"signal_variance must be > 0, got {self.signal_variance}")
        if not self.noise_variance > 0:
            raise InvalidArgument(f"noise_variance must be > 0, got {self.noise_variance}")
        if isinstance(self.prior_mean, str) and self.prior_mean not in PRIOR_STATISTICS:
            raise InvalidArgument(f"prior_mean must be a number or one of {PRIOR_STATISTICS}")

    def resolve_prior_mean(self, y: np.ndarray) -> float:
        pm = "median" if self.prior_mean is None else self.prior_mean
        if not isinstance(pm, str):
            return float(pm)
        if len(y) == 0:
            return 0.0
        if pm == "median":
            return float(np.median(y))
        if pm == "background":
            try:
                return two_means(y)[0]
            except NoCluster:
                pass
        return float(np.mean(y))


def kernel_se(x, x_prime, hyper: GpHyper, signal_variance: float | None = None) -> float:
    sv = signal_variance if signal_variance is not None else (hyper.signal_variance or 1.0)
    d = np.asarray(x, dtype=float) - np.asarray(x_prime, dtype=float)
    return float(sv * np.exp(-float(d @ d) / (2.0 * hyper.length_scale ** 2)))


def kernel_matrix(a: np.ndarray, b: np.ndarray, length_scale: float, signal_variance: float) -> np.ndarray:
    # |a-b|^2 expanded; clipped because cancellation can go slightly negative.
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    np.maximum(sq, 0.0, out=sq)
    return signal_variance * np.exp(sq * (-0.5 / length_scale ** 2))


@dataclass(frozen=True)
class GpModel:
    """Training data plus the Cholesky factor of ``K + noise * I``.

    Instances are never mutated; :func:`fit_batch` returns a new model.
    """

    X: np.ndarray
    y: np.ndarray
    hyper: GpHyper
    prior_mean: float
    signal_variance: float
    chol: np.ndarray | None
    weights: np.ndarray | None

    @property
    def n(self) -> int:
        return len(self.y)

    def predict(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation at ``points`` of shape (m, 2)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        m = len(points)
        if self.n == 0:
            return (np.full(m, self.prior_mean), np.full(m, np.sqrt(self.signal_variance)))
        ks = kernel_matrix(self.X, points, self.hyper.length_scale, self.signal_variance)
        return self._posterior(ks)

    def _posterior(self, ks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # ks: (n, m) cross-covariance between training inputs and query points.
        mean = self.prior_mean + ks.T @ self.weights
        v = linalg.solve_triangular(self.chol, ks, lower=True, check_finite=False)
        var = self.signal_variance - np.einsum("ij,ij->j", v, v)
        np.maximum(var, 0.0, out=var)
        return mean, np.sqrt(var)


def empty_model(hyper: GpHyper | None = None) -> GpModel:
    hyper = hyper or GpHyper()
    sv = hyper.signal_variance if hyper.signal_variance is not None else SIGNAL_VARIANCE_FLOOR
    return GpModel(np.zeros((0, 2)), np.zeros(0), hyper, hyper.resolve_prior_mean(np.zeros(0)),
                   sv, None, None)


def _factorise(X: np.ndarray, y: np.ndarray, hyper: GpHyper) -> GpModel:
    if len(y) == 0:
        return empty_model(hyper)
    pm = hyper.resolve_prior_mean(y)
    if hyper.signal_variance is None:
        sv = max(float(np.var(y)), SIGNAL_VARIANCE_FLOOR)
    else:
        sv = float(hyper.signal_variance)
    K = kernel_matrix(X, X, hyper.length_scale, sv)
    K[np.diag_indices_from(K)] += hyper.noise_variance
    try:
        L = linalg.cholesky(K, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise IllConditionedKernel(
            f"kernel matrix of {len(y)} samples is not positive definite ({exc})"
        ) from None
    w = linalg.cho_solve((L, True), y - pm, check_finite=False)
    return GpModel(X, y, hyper, pm, sv, L, w)


def fit_batch(model: GpModel, new_points: Iterable[tuple[Sequence[float], float]],
              spec: GridSpec | None = None) -> GpModel:
    """Append ``(point, value)`` pairs and refactorise."""
    pts, vals = [], []
    for p, v in new_points:
        p = (float(p[0]), float(p[1]))
        v = float(v)
        if not (np.isfinite(p[0]) and np.isfinite(p[1]) and np.isfinite(v)):
            raise InvalidArgument(f"non-finite training sample {p} -> {v}")
        if spec is not None and not spec.contains(p):
            raise InvalidArgument(f"training point {p} outside domain")
        pts.append(p)
        vals.append(v)
    if not pts:
        return model
    X = np.vstack([model.X, np.array(pts)])
    y = np.concatenate([model.y, np.array(vals)])
    return _factorise(X, y, model.hyper)


def fit(points: np.ndarray, values: np.ndarray, hyper: GpHyper | None = None) -> GpModel:
    hyper = hyper or GpHyper()
    X = np.asarray(points, dtype=float).reshape(-1, 2)
    y = np.asarray(values, dtype=float).reshape(-1)
    if len(X) != len(y):
        raise InvalidArgument(f"{len(X)} inputs but {len(y)} outputs")
    return _factorise(X, y, hyper)


def with_hyper(model: GpModel, **changes) -> GpModel:
    return _factorise(model.X, model.y, replace(model.hyper, **changes))


def cell_centers(spec: GridSpec) -> np.ndarray:
    x, y = spec.mesh()
    return np.column_stack([x.ravel(), y.ravel()])


def predict_grids(model: GpModel, spec: GridSpec) -> tuple[ScalarGrid, ScalarGrid]:
    mean, std = model.predict(cell_centers(spec))
    return ScalarGrid(spec, mean.reshape(spec.shape)), ScalarGrid(spec, std.reshape(spec.shape))


class GridPredictor:
    """Posterior grids for a model whose training set only grows.

    The unit-variance cross-kernel between training inputs and cell centres
    is cached row by row, so a refit only evaluates rows for new samples.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.cells = cell_centers(spec)
        self._X = np.zeros((0, 2))
        self._unit = np.zeros((0, len(self.cells)))
        self._length = None

    def __call__(self, model: GpModel) -> tuple[ScalarGrid, ScalarGrid]:
        l = model.hyper.length_scale
        k = len(self._X)
        if l != self._length or model.n < k or not np.array_equal(model.X[:k], self._X):
            self._X = np.zeros((0, 2))
            self._unit = np.zeros((0, len(self.cells)))
            self._length = l
            k = 0
        if model.n > k:
            rows = kernel_matrix(model.X[k:], self.cells, l, 1.0)
            self._unit = np.vstack([self._unit, rows])
            self._X = model.X.copy()
        if model.n == 0:
            mean, std = model.predict(self.cells)
        else:
            mean, std = model._posterior(model.signal_variance * self._unit)
        shape = self.spec.shape
        return ScalarGrid(self.spec, mean.reshape(shape)), ScalarGrid(self.spec, std.reshape(shape))
