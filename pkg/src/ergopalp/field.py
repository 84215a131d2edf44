"""Uniform 2D scalar grids over the palpation domain and synthetic stiffness fields.

Grids are cell-centred: cell ``(row, col)`` has its centre at
``(ox + (col + 0.5) * dx, oy + (row + 0.5) * dy)``. Row 0 is the bottom row.
Lengths are in mm, stiffness values in kPa.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateDensity, InvalidArgument, OutOfDomain

DOMAIN_SIDE_MM = 45.0
DEFAULT_RESOLUTION = 64


@dataclass(frozen=True)
class GridSpec:
    nx: int = DEFAULT_RESOLUTION
    ny: int = DEFAULT_RESOLUTION
    dx: float = DOMAIN_SIDE_MM / DEFAULT_RESOLUTION
    dy: float = DOMAIN_SIDE_MM / DEFAULT_RESOLUTION
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise InvalidArgument(f"grid needs at least 2x2 cells, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise InvalidArgument(f"cell size must be positive, got dx={self.dx}, dy={self.dy}")

    @classmethod
    def square(cls, side_mm: float = DOMAIN_SIDE_MM, n: int = DEFAULT_RESOLUTION) -> "GridSpec":
        return cls(n, n, side_mm / n, side_mm / n)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def width(self) -> float:
        return self.nx * self.dx

    @property
    def height(self) -> float:
        return self.ny * self.dy

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """``(xmin, xmax, ymin, ymax)`` of the closed domain."""
        ox, oy = self.origin
        return (ox, ox + self.width, oy, oy + self.height)

    @property
    def center(self) -> tuple[float, float]:
        ox, oy = self.origin
        return (ox + 0.5 * self.width, oy + 0.5 * self.height)

    def x_centers(self) -> np.ndarray:
        return self.origin[0] + (np.arange(self.nx) + 0.5) * self.dx

    def y_centers(self) -> np.ndarray:
        return self.origin[1] + (np.arange(self.ny) + 0.5) * self.dy

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-centre coordinates as two ``(ny, nx)`` arrays."""
        return np.meshgrid(self.x_centers(), self.y_centers())

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        ox, oy = self.origin
        return (ox + (col + 0.5) * self.dx, oy + (row + 0.5) * self.dy)

    def contains(self, p: Sequence[float]) -> bool:
        xmin, xmax, ymin, ymax = self.bounds
        return xmin <= p[0] <= xmax and ymin <= p[1] <= ymax

    def transposed(self) -> "GridSpec":
        return GridSpec(self.ny, self.nx, self.dy, self.dx, (self.origin[1], self.origin[0]))


@dataclass
class ScalarGrid:
    """Scalar values on a :class:`GridSpec`, stored as a ``(ny, nx)`` array."""

    spec: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.size != self.spec.nx * self.spec.ny:
            raise InvalidArgument(
                f"expected {self.spec.nx * self.spec.ny} values, got {values.size}"
            )
        values = values.reshape(self.spec.shape)
        if not np.all(np.isfinite(values)):
            raise InvalidArgument("grid values must be finite")
        self.values = values

    @classmethod
    def constant(cls, spec: GridSpec, value: float) -> "ScalarGrid":
        return cls(spec, np.full(spec.shape, float(value)))

    @classmethod
    def zeros(cls, spec: GridSpec) -> "ScalarGrid":
        return cls(spec, np.zeros(spec.shape))

    def copy(self) -> "ScalarGrid":
        return ScalarGrid(self.spec, self.values.copy())

    def with_values(self, values: np.ndarray) -> "ScalarGrid":
        return ScalarGrid(self.spec, values)

    def __eq__(self, other):
        if not isinstance(other, ScalarGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class GaussianComponent:
    center: tuple[float, float]
    covariance: tuple[tuple[float, float], tuple[float, float]]
    amplitude: float

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise InvalidArgument(f"covariance must be a symmetric 2x2 matrix, got {self.covariance}")
        if cov[0, 0] <= 0 or np.linalg.det(cov) <= 0:
            raise InvalidArgument(f"covariance is not positive definite: {self.covariance}")
        if not self.amplitude > 0:
            raise InvalidArgument(f"amplitude must be positive, got {self.amplitude}")

    @classmethod
    def isotropic(cls, center, std_mm: float, amplitude: float) -> "GaussianComponent":
        v = float(std_mm) ** 2
        return cls((float(center[0]), float(center[1])), ((v, 0.0), (0.0, v)), float(amplitude))

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Unnormalised bump ``amplitude * exp(-0.5 * r^T S^-1 r)``."""
        inv = np.linalg.inv(np.asarray(self.covariance, dtype=float))
        rx = np.asarray(x, dtype=float) - self.center[0]
        ry = np.asarray(y, dtype=float) - self.center[1]
        q = inv[0, 0] * rx * rx + 2.0 * inv[0, 1] * rx * ry + inv[1, 1] * ry * ry
        return self.amplitude * np.exp(-0.5 * q)


@dataclass(frozen=True)
class GroundTruthField:
    background: float
    components: tuple[GaussianComponent, ...]
    spec: GridSpec = GridSpec()

    def __post_init__(self):
        if not self.background > 0:
            raise InvalidArgument(f"background stiffness must be positive, got {self.background}")
        object.__setattr__(self, "components", tuple(self.components))

    def grid(self) -> ScalarGrid:
        return make_ground_truth(self.background, self.components, self.spec)

    def with_spec(self, spec: GridSpec) -> "GroundTruthField":
        return GroundTruthField(self.background, self.components, spec)


def make_ground_truth(background: float, components: Sequence[GaussianComponent],
                      spec: GridSpec) -> ScalarGrid:
    """Evaluate ``background + sum of Gaussian bumps`` at every cell centre."""
    if not background > 0:
        raise InvalidArgument(f"background stiffness must be positive, got {background}")
    x, y = spec.mesh()
    values = np.full(spec.shape, float(background))
    for comp in components:
        if not isinstance(comp, GaussianComponent):
            raise InvalidArgument(f"not a GaussianComponent: {comp!r}")
        values += comp.evaluate(x, y)
    return ScalarGrid(spec, values)


def _fractional_index(coord: float, origin: float, step: float, n: int) -> tuple[int, int, float]:
    # Continuous index relative to cell centres, clamped to the outermost centres.
    s = (coord - origin) / step - 0.5
    s = min(max(s, 0.0), n - 1.0)
    i0 = min(int(np.floor(s)), n - 2)
    return i0, i0 + 1, s - i0


def sample_bilinear(grid: ScalarGrid, p: Sequence[float]) -> float:
    """Bilinear interpolation of ``grid`` at point ``p`` (mm).

    Between the domain boundary and the outermost cell centres the value is
    held constant along the clamped axis.
    """
    spec = grid.spec
    if not spec.contains(p):
        raise OutOfDomain(f"point {tuple(p)} outside domain {spec.bounds}")
    c0, c1, fx = _fractional_index(p[0], spec.origin[0], spec.dx, spec.nx)
    r0, r1, fy = _fractional_index(p[1], spec.origin[1], spec.dy, spec.ny)
    v = grid.values
    bottom = v[r0, c0] * (1.0 - fx) + v[r0, c1] * fx
    top = v[r1, c0] * (1.0 - fx) + v[r1, c1] * fx
    return float(bottom * (1.0 - fy) + top * fy)


def gradient_components(grid: ScalarGrid) -> tuple[np.ndarray, np.ndarray]:
    """``(d/dx, d/dy)`` by central differences inside, one-sided at the edges."""
    gy, gx = np.gradient(grid.values, grid.spec.dy, grid.spec.dx, edge_order=1)
    return gx, gy


def gradient_norm(grid: ScalarGrid) -> ScalarGrid:
    gx, gy = gradient_components(grid)
    return ScalarGrid(grid.spec, np.hypot(gx, gy))


def integrate(grid: ScalarGrid) -> float:
    """Midpoint-rule integral over the domain."""
    return float(grid.values.sum() * grid.spec.cell_area)


def normalize_density(grid: ScalarGrid) -> ScalarGrid:
    """Rescale a nonnegative grid so that it integrates to one."""
    if np.any(grid.values < 0):
        raise InvalidArgument("density values must be nonnegative")
    total = integrate(grid)
    if not total > 0:
        raise DegenerateDensity("cannot normalise a density with zero integral")
    return ScalarGrid(grid.spec, grid.values / total)


def uniform_density(spec: GridSpec) -> ScalarGrid:
    return ScalarGrid(spec, np.full(spec.shape, 1.0 / (spec.nx * spec.ny * spec.cell_area)))


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 4-connected regions of a boolean mask; background is label 0."""
    labels, count = ndimage.label(np.asarray(mask, dtype=bool))
    return labels, int(count)


# -- grid text format -------------------------------------------------------

def format_grid(grid: ScalarGrid) -> str:
    s = grid.spec
    lines = [f"GRID {s.nx} {s.ny} {s.dx!r} {s.dy!r} {s.origin[0]!r} {s.origin[1]!r}"]
    for row in grid.values:
        lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def parse_grid(text: str, source: str = "<grid>") -> ScalarGrid:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidArgument(f"{source}: empty grid file")
    head = lines[0].split()
    if len(head) != 7 or head[0] != "GRID":
        raise InvalidArgument(f"{source}:1: expected 'GRID nx ny dx dy ox oy'")
    try:
        nx, ny = int(head[1]), int(head[2])
        dx, dy, ox, oy = (float(v) for v in head[3:])
    except ValueError as exc:
        raise InvalidArgument(f"{source}:1: bad header value ({exc})") from None
    spec = GridSpec(nx, ny, dx, dy, (ox, oy))
    if len(lines) - 1 != ny:
        raise InvalidArgument(f"{source}: expected {ny} value rows, found {len(lines) - 1}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            row = [float(v) for v in line.split()]
        except ValueError as exc:
            raise InvalidArgument(f"{source}:{lineno}: {exc}") from None
        if len(row) != nx:
            raise InvalidArgument(f"{source}:{lineno}: expected {nx} values, found {len(row)}")
        rows.append(row)
    return ScalarGrid(spec, np.array(rows))


def write_grid(grid: ScalarGrid, path) -> None:
    Path(path).write_text(format_grid(grid))


def read_grid(path) -> ScalarGrid:
    path = Path(path)
    return parse_grid(path.read_text(), source=str(path))


# -- ground-truth field files -----------------------------------------------
#
#   BACKGROUND <kPa>
#   COMPONENT <cx_mm> <cy_mm> <sxx_mm2> <sxy_mm2> <syy_mm2> <amplitude_kPa>
#   DOMAIN <side_mm> <n>            (optional, default 45 mm / 64 cells)

def format_field(truth: GroundTruthField) -> str:
    s = truth.spec
    lines = []
    if s.nx == s.ny and s.dx == s.dy and s.origin == (0.0, 0.0):
        lines.append(f"DOMAIN {s.width!r} {s.nx}")
    lines.append(f"BACKGROUND {truth.background!r}")
    for c in truth.components:
        (sxx, sxy), (_, syy) = c.covariance
        lines.append(
            f"COMPONENT {c.center[0]!r} {c.center[1]!r} {sxx!r} {sxy!r} {syy!r} {c.amplitude!r}"
        )
    return "\n".join(lines) + "\n"


def parse_field(text: str, source: str = "<field>", spec: GridSpec | None = None) -> GroundTruthField:
    background = None
    components = []
    file_spec = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "BACKGROUND" and len(parts) == 2:
                background = float(parts[1])
            elif parts[0] == "COMPONENT" and len(parts) == 7:
                cx, cy, sxx, sxy, syy, amp = (float(v) for v in parts[1:])
                components.append(GaussianComponent((cx, cy), ((sxx, sxy), (sxy, syy)), amp))
            elif parts[0] == "DOMAIN" and len(parts) == 3:
                file_spec = GridSpec.square(float(parts[1]), int(parts[2]))
            else:
                raise InvalidArgument(f"unrecognised line '{line}'")
        except ValueError as exc:
            raise InvalidArgument(f"{source}:{lineno}: {exc}") from None
    if background is None:
        raise InvalidArgument(f"{source}: missing BACKGROUND line")
    return GroundTruthField(background, tuple(components), spec or file_spec or GridSpec())


def read_field(path, spec: GridSpec | None = None) -> GroundTruthField:
    path = Path(path)
    return parse_field(path.read_text(), source=str(path), spec=spec)
