"""Bayesian-optimisation palpation baselines.

BO-EI probes only at acquisition maxima; BO-EIS additionally samples every
``spacing`` mm along the straight path to each target. Both move at constant
speed and pay a fixed dwell per discrete probe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .errors import InvalidArgument
from .field import GridSpec
from .gpr import GpHyper, GpModel, GridPredictor, cell_centers, empty_model, fit_batch
from .record import RunRecord, rmse

VARIANTS = ("ei", "eis")
PROBE_DWELL_S = 5.0
PATH_SPACING_MM = 2.5
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def expected_improvement(mu, sigma, f_best):
    """EI for maximisation: ``delta * Phi(delta/sigma) + sigma * phi(delta/sigma)``.

    ``delta = mu - f_best``; where ``sigma == 0`` the value is ``max(delta, 0)``.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise InvalidArgument("sigma must be nonnegative")
    delta = mu - f_best
    pos = sigma > 0
    safe = np.where(pos, sigma, 1.0)
    z = delta / safe
    ei = delta * ndtr(z) + safe * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    out = np.where(pos, ei, np.maximum(delta, 0.0))
    out = np.maximum(out, 0.0)  # rounding can dip a hair below zero far in the tail
    return float(out) if out.ndim == 0 else out


@dataclass
class BoPlannerState:
    model: GpModel
    f_best: float = -np.inf
    target: tuple | None = None
    path: list = field(default_factory=list)

    def observe(self, points, values) -> None:
        """Refit on new ``(point, value)`` data and refresh the incumbent."""
        values = list(values)
        if not values:
            return
        self.model = fit_batch(self.model, zip(points, values))
        self.f_best = max(self.f_best, max(values))


def next_target(state: BoPlannerState, spec: GridSpec, grids=None) -> tuple:
    """Cell centre maximising EI; ties go to the lowest row-major index.

    ``grids`` may carry precomputed ``(mean, std)`` posterior grids of
    ``state.model`` to avoid a second prediction.
    """
    if state.model.n == 0:
        return spec.center
    pts = cell_centers(spec)
    if grids is None:
        mean, std = state.model.predict(pts)
    else:
        mean, std = grids[0].values.ravel(), grids[1].values.ravel()
    ei = expected_improvement(mean, std, state.f_best)
    k = int(np.argmax(ei))
    return (float(pts[k, 0]), float(pts[k, 1]))


def plan_path_samples(start, end, spacing: float = PATH_SPACING_MM) -> list:
    """Points at multiples of ``spacing`` from ``start`` along the segment, plus ``end``."""
    if not spacing > 0:
        raise InvalidArgument(f"spacing must be positive, got {spacing}")
    a = np.asarray(start, dtype=float)
    b = np.asarray(end, dtype=float)
    length = float(np.hypot(*(b - a)))
    if length == 0.0:
        return [(float(a[0]), float(a[1]))]
    n = int(np.floor(length / spacing + 1e-9))
    steps = [k * spacing for k in range(n + 1)]
    if length - steps[-1] > 1e-9 * max(length, 1.0):
        steps.append(length)
    else:
        steps[-1] = length
    u = (b - a) / length
    return [(float(a[0] + s * u[0]), float(a[1] + s * u[1])) for s in steps]


def run_bo(variant: str, spec: GridSpec, measure: Callable, start, *,
           budget_mm: float | None = None, time_cap_s: float | None = None,
           safety_cap_s: float = 300.0, hyper: GpHyper | None = None,
           v_max: float = 10.0, dwell_s: float = PROBE_DWELL_S,
           spacing: float = PATH_SPACING_MM, truth=None, seed: int = 0,
           scenario: str = "") -> tuple[RunRecord, BoPlannerState]:
    """Point-to-point BO palpation until the length budget or time cap is used up.

    ``measure(point)`` returns kPa or ``None`` for a discarded sample. Legs
    are always completed, so the final length may exceed the budget. If
    ``truth`` (a grid) is given, the RMSE of the GP mean is logged after
    every refit.
    """
    if variant not in VARIANTS:
        raise InvalidArgument(f"unknown BO variant {variant!r}; expected one of {VARIANTS}")
    if (budget_mm is None) == (time_cap_s is None):
        raise InvalidArgument("exactly one of budget_mm and time_cap_s must be set")
    planner = f"bo-{variant}"
    rec = RunRecord(planner, scenario, seed)
    state = BoPlannerState(empty_model(hyper))
    pos = (float(start[0]), float(start[1]))
    t = 0.0
    length = 0.0
    rec.trajectory.append((t, pos[0], pos[1]))
    pending_p, pending_v = [], []
    err = float("nan")
    grids_of = GridPredictor(spec)

    def probe(p, at):
        val = measure(p)
        if val is None:
            rec.skipped += 1
            return
        pending_p.append(p)
        pending_v.append(val)
        rec.samples.append([at, p[0], p[1], val, float("nan"), err])

    t += dwell_s
    probe(pos, t)
    stop_reason = "safety_cap"
    while True:
        first_new = len(rec.samples) - len(pending_v)
        state.observe(pending_p, pending_v)
        pending_p, pending_v = [], []
        grids = grids_of(state.model) if state.model.n else None
        if truth is not None and grids is not None:
            err = rmse(grids[0], truth)
            rec.rmse_trace.append((t, err))
            for row in rec.samples[first_new:]:
                row[5] = err
        if budget_mm is not None and length >= budget_mm:
            stop_reason = "budget"
            break
        if time_cap_s is not None and t >= time_cap_s:
            stop_reason = "time_cap"
            break
        if t >= safety_cap_s:
            break
        target = next_target(state, spec, grids)
        state.target = target
        leg = plan_path_samples(pos, target, spacing)
        state.path = leg
        for k, p in enumerate(leg[1:], start=1):
            seg = float(np.hypot(p[0] - leg[k - 1][0], p[1] - leg[k - 1][1]))
            length += seg
            t += seg / v_max
            rec.trajectory.append((t, p[0], p[1]))
            if variant == "eis" and k < len(leg) - 1:
                probe(p, t)
        pos = target
        t += dwell_s
        probe(pos, t)
    rec.samples = [tuple(r) for r in rec.samples]
    rec.metrics.update(length_mm=length, time_s=t, stop_reason=stop_reason,
                       converged=stop_reason != "safety_cap")
    return rec, state
