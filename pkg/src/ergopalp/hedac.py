"""Heat-equation-driven area coverage (HEDAC) for a single second-order agent.

The agent leaves a Gaussian footprint that accumulates into a coverage
density. The positive part of the gap between the smoothed target density and
the coverage density is turned into a heat source, diffused for a fixed number
of explicit steps with insulated (zero-flux) walls, and the agent accelerates
up the gradient of the resulting potential.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import DegenerateTarget, InvalidArgument, InvalidParameter, OutOfDomain
from .field import GridSpec, ScalarGrid, uniform_density

FLAT_GRADIENT = 1e-12
KERNEL_SIGMA_MM = 0.75


@dataclass(frozen=True)
class HedacParams:
    kernel_sigma: float = KERNEL_SIGMA_MM  # mm, footprint / smoothing width
    v_max: float = 10.0                # mm/s
    a_max: float = 50.0                # mm/s^2
    diffusion_steps: int = 20          # explicit steps per potential update
    diffusion_dt: float | None = None  # None -> 0.2 * min(dx, dy)^2
    control_dt: float = 0.01           # s
    average_target: bool = True        # compare coverage with the time-averaged target

    def __post_init__(self):
        if not self.kernel_sigma > 0:
            raise InvalidParameter(f"kernel_sigma must be > 0, got {self.kernel_sigma}")
        if not (self.v_max > 0 and self.a_max > 0):
            raise InvalidParameter("v_max and a_max must be positive")
        if self.diffusion_steps < 0:
            raise InvalidParameter(f"diffusion_steps must be >= 0, got {self.diffusion_steps}")
        if not self.control_dt > 0:
            raise InvalidParameter(f"control_dt must be > 0, got {self.control_dt}")

    def resolved_diffusion_dt(self, spec: GridSpec) -> float:
        h2 = min(spec.dx, spec.dy) ** 2
        dt = 0.2 * h2 if self.diffusion_dt is None else float(self.diffusion_dt)
        if not 0 < dt <= h2 / 4.0:
            raise InvalidParameter(
                f"diffusion_dt={dt} violates the explicit stability bound {h2 / 4.0:.6g}"
            )
        return dt


@dataclass
class AgentState:
    """Probe position (mm) and velocity (mm/s).

    ``history`` is a list of ``(t, x, y)`` carried by reference from one state
    to the next; :func:`steer` appends to it.
    """

    position: np.ndarray
    velocity: np.ndarray
    t: float = 0.0
    history: list = field(default_factory=list)

    @classmethod
    def at_rest(cls, position, t: float = 0.0) -> "AgentState":
        p = np.array(position, dtype=float)
        return cls(p, np.zeros(2), t, [(t, float(p[0]), float(p[1]))])


@dataclass
class CoverageState:
    """Accumulated footprint ``kernel_mass`` (integral of the kernel over time).

    The normalised coverage density is ``kernel_mass / integral(kernel_mass)``.
    """

    spec: GridSpec
    kernel_mass: np.ndarray
    mass_total: float = 0.0
    t: float = 0.0
    u: np.ndarray | None = None

    @classmethod
    def empty(cls, spec: GridSpec) -> "CoverageState":
        return cls(spec, np.zeros(spec.shape), 0.0, 0.0, np.zeros(spec.shape))

    def copy(self) -> "CoverageState":
        return CoverageState(self.spec, self.kernel_mass.copy(), self.mass_total, self.t,
                             None if self.u is None else self.u.copy())

    def density(self) -> ScalarGrid:
        """Normalised coverage ``c``; identically zero before any deposit."""
        if self.mass_total <= 0:
            return ScalarGrid.zeros(self.spec)
        return ScalarGrid(self.spec, self.kernel_mass / self.mass_total)

    def potential(self) -> ScalarGrid:
        return ScalarGrid(self.spec, self.u if self.u is not None else np.zeros(self.spec.shape))


# -- coverage ---------------------------------------------------------------

def _footprint_1d(centers: np.ndarray, z: float, lo: float, hi: float, sigma: float) -> np.ndarray:
    # 1D Gaussian plus its mirror images in both walls, so no mass leaves the domain.
    k = -0.5 / sigma ** 2
    g = np.exp(k * (centers - z) ** 2)
    g += np.exp(k * (centers - (2.0 * lo - z)) ** 2)
    g += np.exp(k * (centers - (2.0 * hi - z)) ** 2)
    return g * (1.0 / (np.sqrt(2.0 * np.pi) * sigma))


def footprint(spec: GridSpec, z, sigma: float) -> np.ndarray:
    """Gaussian kernel ``phi_sigma(x - z)`` on the cell centres, reflected at the walls."""
    xmin, xmax, ymin, ymax = spec.bounds
    gx = _footprint_1d(spec.x_centers(), float(z[0]), xmin, xmax, sigma)
    gy = _footprint_1d(spec.y_centers(), float(z[1]), ymin, ymax, sigma)
    return np.outer(gy, gx)


def _deposit_inplace(state: CoverageState, xc, yc, z, dt, sigma) -> None:
    xmin, xmax, ymin, ymax = state.spec.bounds
    gx = _footprint_1d(xc, z[0], xmin, xmax, sigma)
    gy = _footprint_1d(yc, z[1], ymin, ymax, sigma)
    gy *= dt
    state.kernel_mass += np.outer(gy, gx)
    state.mass_total += float(gx.sum() * gy.sum()) * state.spec.cell_area
    state.t += dt


def deposit_coverage(state: CoverageState, z, dt: float, sigma: float = KERNEL_SIGMA_MM) -> CoverageState:
    if not dt > 0:
        raise InvalidArgument(f"dt must be positive, got {dt}")
    if not state.spec.contains(z):
        raise OutOfDomain(f"agent position {tuple(z)} outside domain")
    new = state.copy()
    spec = state.spec
    _deposit_inplace(new, spec.x_centers(), spec.y_centers(), (float(z[0]), float(z[1])), dt, sigma)
    return new


@lru_cache(maxsize=32)
def _smoothing_weights(step: float, sigma: float) -> np.ndarray:
    half = int(np.ceil(4.0 * sigma / step))
    r = np.arange(-half, half + 1) * step
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def smooth_target(m: ScalarGrid, sigma: float) -> ScalarGrid:
    """Direct separable convolution ``phi_sigma * m`` with mirror padding."""
    wx = _smoothing_weights(m.spec.dx, sigma)
    wy = _smoothing_weights(m.spec.dy, sigma)
    out = ndimage.convolve1d(m.values, wx, axis=1, mode="reflect")
    out = ndimage.convolve1d(out, wy, axis=0, mode="reflect")
    return m.with_values(out)


def ergodic_error(m: ScalarGrid, state: CoverageState, sigma: float = KERNEL_SIGMA_MM,
                  smoothed: ScalarGrid | None = None) -> ScalarGrid:
    """``e = phi_sigma * m - c``; before any deposit ``c`` is taken as zero."""
    target = smoothed if smoothed is not None else smooth_target(m, sigma)
    if state.mass_total <= 0:
        return target.copy()
    return target.with_values(target.values - state.kernel_mass / state.mass_total)


def undercoverage(e: ScalarGrid) -> float:
    return float(np.maximum(e.values, 0.0).sum() * e.spec.cell_area)


def alpha(m: ScalarGrid, state: CoverageState, sigma: float = KERNEL_SIGMA_MM,
          smoothed: ScalarGrid | None = None) -> float:
    """Positive-part undercoverage now, relative to that at t = 0, clamped to [0, 1]."""
    target = smoothed if smoothed is not None else smooth_target(m, sigma)
    initial = undercoverage(target)
    if not initial > 0:
        raise DegenerateTarget("target has no positive mass")
    current = undercoverage(ergodic_error(m, state, sigma, smoothed=target))
    return min(max(current / initial, 0.0), 1.0)


def source_from_error(e: ScalarGrid) -> ScalarGrid:
    pos = np.maximum(e.values, 0.0)
    s = pos * pos
    total = s.sum() * e.spec.cell_area
    if not total > 0:
        return uniform_density(e.spec)
    return e.with_values(s / total)


# -- diffusion --------------------------------------------------------------

def laplacian_1d(n: int, h: float) -> np.ndarray:
    """Second-difference matrix with ghost-cell zero-flux ends."""
    T = np.diag(np.full(n, -2.0)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)
    T[0, 0] = T[-1, -1] = -1.0
    return T / (h * h)


def heat_step(u: np.ndarray, dt: float, dx: float, dy: float) -> np.ndarray:
    """One explicit Euler step of ``u_t = lap(u)`` with insulated walls."""
    p = np.pad(u, 1, mode="edge")
    lap = (p[1:-1, 2:] - 2.0 * u + p[1:-1, :-2]) / (dx * dx)
    lap += (p[2:, 1:-1] - 2.0 * u + p[:-2, 1:-1]) / (dy * dy)
    return u + dt * lap


@lru_cache(maxsize=16)
def _modal_operator(nx: int, ny: int, dx: float, dy: float, dt: float, steps: int):
    # The explicit step is I + dt*(Lx (+) Ly); both 1D operators are symmetric
    # and commute, so k steps act diagonally in their joint eigenbasis.
    lx, vx = np.linalg.eigh(laplacian_1d(nx, dx))
    ly, vy = np.linalg.eigh(laplacian_1d(ny, dy))
    growth = (1.0 + dt * (ly[:, None] + lx[None, :])) ** steps
    return vx, vy, growth


def diffuse(s: np.ndarray, spec: GridSpec, dt: float, steps: int) -> np.ndarray:
    """``steps`` explicit heat steps applied to ``s``, evaluated in the modal basis."""
    if steps == 0:
        return np.array(s, dtype=float)
    vx, vy, growth = _modal_operator(spec.nx, spec.ny, spec.dx, spec.dy, dt, steps)
    coeff = vy.T @ s @ vx
    coeff *= growth
    return vy @ coeff @ vx.T


def diffuse_potential(state: CoverageState, s: ScalarGrid, params: HedacParams) -> CoverageState:
    """Reset ``u`` to the source and run ``params.diffusion_steps`` explicit steps."""
    dt = params.resolved_diffusion_dt(s.spec)
    new = CoverageState(state.spec, state.kernel_mass, state.mass_total, state.t,
                        diffuse(s.values, s.spec, dt, params.diffusion_steps))
    return new


# -- agent ------------------------------------------------------------------

def _axis_window(coord, origin, step, n):
    s = (coord - origin) / step - 0.5
    s = min(max(s, 0.0), n - 1.0)
    i0 = min(int(s), n - 2)
    lo = max(i0 - 1, 0)
    hi = min(i0 + 3, n)
    return i0, s - i0, lo, hi


def potential_gradient(u: np.ndarray, spec: GridSpec, z) -> np.ndarray:
    """Bilinear interpolation of the finite-difference gradient of ``u`` at ``z``."""
    c0, fx, clo, chi = _axis_window(z[0], spec.origin[0], spec.dx, spec.nx)
    r0, fy, rlo, rhi = _axis_window(z[1], spec.origin[1], spec.dy, spec.ny)
    # Window edges coincide with grid edges wherever one-sided differences are needed.
    win = u[rlo:rhi, clo:chi]
    gy, gx = np.gradient(win, spec.dy, spec.dx, edge_order=1)
    i, j = r0 - rlo, c0 - clo
    w = np.array([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    ax = gx[i, j] * w[0] + gx[i, j + 1] * w[1] + gx[i + 1, j] * w[2] + gx[i + 1, j + 1] * w[3]
    ay = gy[i, j] * w[0] + gy[i, j + 1] * w[1] + gy[i + 1, j] * w[2] + gy[i + 1, j + 1] * w[3]
    return np.array([ax, ay])


def _reflect(p: np.ndarray, v: np.ndarray, bounds) -> None:
    xmin, xmax, ymin, ymax = bounds
    for axis, lo, hi in ((0, xmin, xmax), (1, ymin, ymax)):
        while p[axis] < lo or p[axis] > hi:
            if p[axis] < lo:
                p[axis] = 2.0 * lo - p[axis]
            else:
                p[axis] = 2.0 * hi - p[axis]
            v[axis] = -v[axis]


def _accelerate(v: np.ndarray, grad: np.ndarray, params: HedacParams, dt: float) -> None:
    # In place: full thrust along the gradient, then the speed limit.
    norm = float(np.hypot(grad[0], grad[1]))
    if norm >= FLAT_GRADIENT:
        v += (params.a_max * dt / norm) * grad
        speed = float(np.hypot(v[0], v[1]))
        if speed > params.v_max:
            v *= params.v_max / speed


def steer(agent: AgentState, u: ScalarGrid, params: HedacParams, dt: float) -> AgentState:
    """Advance the second-order agent one step up the potential gradient."""
    spec = u.spec
    if not spec.contains(agent.position):
        raise OutOfDomain(f"agent position {tuple(agent.position)} outside domain")
    v = agent.velocity.copy()
    _accelerate(v, potential_gradient(u.values, spec, agent.position), params, dt)
    p = agent.position + v * dt
    _reflect(p, v, spec.bounds)
    t = agent.t + dt
    agent.history.append((t, float(p[0]), float(p[1])))
    return AgentState(p, v, t, agent.history)


# -- combined controller ----------------------------------------------------

class HedacController:
    """Per-run coverage state plus cached operators for the 100 Hz loop.

    The target ``m`` is replaced with :meth:`set_target`; every call to
    :meth:`tick` rebuilds the source from the current undercoverage, diffuses
    it, steers the agent and deposits its footprint.

    Coverage is a time average of footprints, so with ``average_target`` the
    error is taken against the time average of the (smoothed) targets over the
    same window. A target change then moves the error by at most ``dt / t``
    of its size per tick instead of all at once.
    """

    def __init__(self, spec: GridSpec, params: HedacParams, start):
        self.spec = spec
        self.params = params
        self.diffusion_dt = params.resolved_diffusion_dt(spec)
        self.coverage = CoverageState.empty(spec)
        self.agent = AgentState.at_rest(start)
        if not spec.contains(self.agent.position):
            raise OutOfDomain(f"start position {tuple(start)} outside domain")
        self._xc = spec.x_centers()
        self._yc = spec.y_centers()
        self._bounds = spec.bounds
        self.target = uniform_density(spec)
        self.current = smooth_target(self.target, params.kernel_sigma)
        self.smoothed = self.current
        self._target_integral = np.zeros(spec.shape)

    def set_target(self, m: ScalarGrid) -> None:
        if m.spec != self.spec:
            raise InvalidArgument("target grid does not match controller grid")
        self.target = m
        self.current = smooth_target(m, self.params.kernel_sigma)
        self._refresh_smoothed()

    def _refresh_smoothed(self) -> None:
        t = self.coverage.t
        if self.params.average_target and t > 0:
            self.smoothed = self.current.with_values(self._target_integral / t)
        else:
            self.smoothed = self.current

    def error(self) -> ScalarGrid:
        return ergodic_error(self.target, self.coverage, smoothed=self.smoothed)

    def alpha(self) -> float:
        return alpha(self.target, self.coverage, smoothed=self.smoothed)

    def update_potential(self) -> np.ndarray:
        cov = self.coverage
        e = self.smoothed.values
        if cov.mass_total > 0:
            e = e - cov.kernel_mass * (1.0 / cov.mass_total)
        pos = np.maximum(e, 0.0)
        s = pos * pos
        total = s.sum()
        if total > 0:
            s *= 1.0 / (total * self.spec.cell_area)
        else:
            s = uniform_density(self.spec).values
        cov.u = diffuse(s, self.spec, self.diffusion_dt, self.params.diffusion_steps)
        return cov.u

    def tick(self) -> np.ndarray:
        """One control step; returns the new agent position."""
        p = self.params
        dt = p.control_dt
        u = self.update_potential()
        agent = self.agent
        v = agent.velocity
        _accelerate(v, potential_gradient(u, self.spec, agent.position), p, dt)
        pos = agent.position + v * dt
        _reflect(pos, v, self._bounds)
        agent.position = pos
        agent.t += dt
        _deposit_inplace(self.coverage, self._xc, self._yc, (pos[0], pos[1]), dt, p.kernel_sigma)
        self._target_integral += self.current.values * dt
        self._refresh_smoothed()
        return pos
