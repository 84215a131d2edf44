"""Viscoelastic spherical-indenter contact force and synthetic indentation traces.

All quantities are SI: metres, pascal, newton, seconds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, InvalidPenetration, InvalidProfile

MAX_INDENTATION_SPEED = 5e-3  # m/s


@dataclass(frozen=True)
class MaterialParams:
    E_f: float            # Pa
    eta: float = 0.0      # Pa s
    nu: float = 0.45
    R: float = 5e-3       # m

    def __post_init__(self):
        if not self.E_f > 0:
            raise InvalidArgument(f"E_f must be > 0, got {self.E_f}")
        if not self.eta >= 0:
            raise InvalidArgument(f"eta must be >= 0, got {self.eta}")
        if not 0 <= self.nu < 0.5:
            raise InvalidArgument(f"nu must lie in [0, 0.5), got {self.nu}")
        if not self.R > 0:
            raise InvalidArgument(f"R must be > 0, got {self.R}")


@dataclass(frozen=True)
class LumpedParams:
    k: float      # N / m^1.5
    lam: float    # N s / m^1.5

    def force(self, d, ddot):
        d = np.asarray(d, dtype=float)
        if np.any(d < 0):
            raise InvalidPenetration("penetration depth must be nonnegative")
        root = np.sqrt(d)
        return self.k * root * d + self.lam * root * np.asarray(ddot, dtype=float)


def total_force(params: MaterialParams, d, ddot):
    """Hertzian elastic term plus the viscous term, both scaling with sqrt(R d)."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise InvalidPenetration("penetration depth must be nonnegative")
    contact = np.sqrt(params.R * d)
    elastic = 4.0 / 3.0 * params.E_f / (1.0 - params.nu ** 2) * contact * d
    viscous = 4.0 / (1.0 - params.nu) * params.eta * contact * np.asarray(ddot, dtype=float)
    out = elastic + viscous
    return float(out) if out.ndim == 0 else out


def to_lumped(params: MaterialParams) -> LumpedParams:
    root_r = math.sqrt(params.R)
    k = 4.0 / 3.0 * params.E_f / (1.0 - params.nu ** 2) * root_r
    lam = 4.0 * params.eta * root_r / (1.0 - params.nu)
    return LumpedParams(k, lam)


def from_lumped(k: float, lam: float, nu: float = 0.45, R: float = 5e-3) -> MaterialParams:
    root_r = math.sqrt(R)
    E_f = 0.75 * k * (1.0 - nu ** 2) / root_r
    eta = lam * (1.0 - nu) / (4.0 * root_r)
    return MaterialParams(E_f, max(eta, 0.0), nu, R)


def lumped_stiffness(E_f: float, nu: float = 0.45, R: float = 5e-3) -> float:
    return 4.0 / 3.0 * E_f / (1.0 - nu ** 2) * math.sqrt(R)


def elasticity_from_k(k: float, nu: float = 0.45, R: float = 5e-3) -> float:
    """Inverse of :func:`lumped_stiffness`; unlike :func:`from_lumped` it accepts any sign."""
    return 0.75 * k * (1.0 - nu ** 2) / math.sqrt(R)


@dataclass(frozen=True)
class IndentationTrace:
    t: np.ndarray
    d: np.ndarray
    ddot: np.ndarray
    F: np.ndarray

    def __post_init__(self):
        n = len(self.t)
        if not all(len(a) == n for a in (self.d, self.ddot, self.F)):
            raise InvalidArgument("trace columns must have equal length")
        if np.any(np.asarray(self.d) < 0):
            raise InvalidArgument("trace penetration must be nonnegative")

    def __len__(self):
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(np.median(np.diff(self.t))) if len(self.t) > 1 else 0.0

    def concat(self, other: "IndentationTrace") -> "IndentationTrace":
        """Append ``other`` shifted so that it starts one sample after this trace."""
        shift = self.t[-1] + self.dt - other.t[0] if len(self.t) else 0.0
        return IndentationTrace(
            np.concatenate([self.t, other.t + shift]),
            np.concatenate([self.d, other.d]),
            np.concatenate([self.ddot, other.ddot]),
            np.concatenate([self.F, other.F]),
        )


@dataclass(frozen=True)
class TrapezoidProfile:
    """Descend to ``depth`` at ``speed``, dwell for ``hold`` seconds, retract.

    Each stroke accelerates and decelerates at ``accel`` (m/s^2), so a stroke
    lasts ``depth / speed + speed / accel`` seconds.
    """

    depth: float = 2e-3       # m
    speed: float = 2e-3       # m/s
    hold: float = 0.25        # s
    retract: bool = True
    dt: float = 1e-3          # s
    accel: float = 0.1        # m/s^2

    @property
    def stroke_time(self) -> float:
        return self.depth / self.speed + self.speed / self.accel

    @property
    def duration(self) -> float:
        return self.stroke_time * (2 if self.retract else 1) + self.hold

    def _stroke(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # Position and velocity of one stroke, s measured from its start.
        tau = self.speed / self.accel
        T = self.stroke_time
        s = np.clip(s, 0.0, T)
        v = self.speed * np.minimum(np.minimum(s / tau, 1.0), np.minimum((T - s) / tau, 1.0))
        a = np.minimum(s, tau)
        pos = 0.5 * self.accel * a * a
        pos += self.speed * np.clip(s - tau, 0.0, T - 2 * tau)
        b = np.clip(s - (T - tau), 0.0, tau)
        pos += self.speed * b - 0.5 * self.accel * b * b
        return pos, v

    def sample(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not (self.depth > 0 and self.speed > 0 and self.hold >= 0 and self.dt > 0
                and self.accel > 0):
            raise InvalidProfile(f"degenerate profile {self}")
        if self.speed / self.accel > self.depth / self.speed:
            raise InvalidProfile("acceleration too low to reach the commanded speed")
        n = int(round(self.duration / self.dt)) + 1
        t = np.arange(n) * self.dt
        d, ddot = self._stroke(t)
        if self.retract:
            back = t - self.stroke_time - self.hold
            up, vup = self._stroke(back)
            d = d - up
            ddot = np.where(back > 0, -vup, ddot)
        np.maximum(d, 0.0, out=d)
        return t, d, ddot


def synth_trace(params: MaterialParams, profile=None, force_noise_std: float = 0.0,
                seed: int | None = 0) -> IndentationTrace:
    """Indentation trace with exact kinematics and (optionally noisy) contact force.

    ``profile`` is a :class:`TrapezoidProfile` or a ``(t, d, ddot)`` triple.
    """
    profile = TrapezoidProfile() if profile is None else profile
    if hasattr(profile, "sample"):
        t, d, ddot = profile.sample()
    else:
        t, d, ddot = (np.asarray(a, dtype=float) for a in profile)
    if np.any(d < 0):
        raise InvalidProfile("profile penetration must stay nonnegative")
    if np.any(np.abs(ddot) > MAX_INDENTATION_SPEED + 1e-15):
        raise InvalidProfile(f"profile exceeds the {MAX_INDENTATION_SPEED * 1e3:g} mm/s envelope")
    F = np.asarray(total_force(params, d, ddot), dtype=float)
    if force_noise_std > 0:
        rng = np.random.default_rng(seed)
        F = F + rng.normal(0.0, force_noise_std, size=F.shape)
    return IndentationTrace(t, d, ddot, F)


TRACE_HEADER = ["t_s", "d_m", "ddot_m_s", "F_N"]


def write_trace(trace: IndentationTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for row in zip(trace.t, trace.d, trace.ddot, trace.F):
            w.writerow([repr(float(v)) for v in row])


def read_trace(path) -> IndentationTrace:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise InvalidArgument(f"{path}: expected header {','.join(TRACE_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise InvalidArgument(f"{path}:{lineno}: {exc}") from None
            if len(rows[-1]) != 4:
                raise InvalidArgument(f"{path}:{lineno}: expected 4 columns")
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    return IndentationTrace(arr[:, 0], np.maximum(arr[:, 1], 0.0), arr[:, 2], arr[:, 3])
