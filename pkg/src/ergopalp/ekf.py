"""Extended Kalman filter for online viscoelastic parameter estimation.

State ``x = [d, k, lam, d', k', lam', k'', lam'']`` (penetration, lumped
stiffness, lumped damping and their derivatives). The measured contact force
is the input; the measurement is the probe displacement past first contact.

Penetration obeys ``m_eff d'' = F - k d^1.5 - lam sqrt(d) d'`` and the two
parameter chains are triple integrators driven by white jerk noise. One
filter step propagates the ODE with classical RK4, so the transition Jacobian
is obtained by differentiating through the four stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple

import numpy as np

from .contact import IndentationTrace, elasticity_from_k, lumped_stiffness
from .errors import FilterDivergence, InvalidArgument, NumericalFailure

D, K, LAM, DD, KD, LAMD, KDD, LAMDD = range(8)
STATE_NAMES = ("d", "k", "lam", "d_dot", "k_dot", "lam_dot", "k_ddot", "lam_ddot")


@dataclass(frozen=True)
class EkfConfig:
    m_eff: float = 0.5                 # kg
    q_d: float = 1e-3                  # m^2/s^3, acceleration noise on d
    q_k: float = 1e9                   # (N/m^1.5)^2/s^5, jerk noise on k
    q_lam: float = 1e2                 # (N s/m^1.5)^2/s^5, jerk noise on lam
    meas_var: float = 1e-12            # m^2
    dt: float = 1e-3                   # s
    prior_E: float = 20e3              # Pa
    prior_eta_scale: float = 10.0      # Pa s, sets the damping prior width
    nu: float = 0.45
    R: float = 5e-3                    # m
    settle_tol: float = 1e-2           # relative per-step change of k deemed settled

    def __post_init__(self):
        for name in ("m_eff", "q_d", "q_k", "q_lam", "meas_var", "dt", "prior_E"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"EkfConfig.{name} must be positive")
        if self.dt > 10e-3:
            raise InvalidArgument(f"EkfConfig.dt must be <= 10 ms, got {self.dt}")


@dataclass
class EkfState:
    x: np.ndarray
    P: np.ndarray
    nis: float = float("nan")
    meta: dict = field(default_factory=dict)

    def copy(self) -> "EkfState":
        return EkfState(self.x.copy(), self.P.copy(), self.nis, dict(self.meta))


def initial_state(cfg: EkfConfig) -> EkfState:
    k0 = lumped_stiffness(cfg.prior_E, cfg.nu, cfg.R)
    lam_scale = 4.0 * cfg.prior_eta_scale * np.sqrt(cfg.R) / (1.0 - cfg.nu)
    x = np.zeros(8)
    x[K] = k0
    sd = np.array([1e-4, 10.0 * k0, 10.0 * lam_scale, 5e-3,
                   10.0 * k0, 10.0 * lam_scale, 10.0 * k0, 10.0 * lam_scale])
    return EkfState(x, np.diag(sd ** 2))


# -- dynamics ---------------------------------------------------------------

def _rhs(x: np.ndarray, u: float, m_eff: float) -> np.ndarray:
    d = x[D] if x[D] > 0 else 0.0
    root = np.sqrt(d)
    out = np.zeros(8)
    out[D] = x[DD]
    out[K] = x[KD]
    out[LAM] = x[LAMD]
    out[DD] = (u - x[K] * root * d - x[LAM] * root * x[DD]) / m_eff
    out[KD] = x[KDD]
    out[LAMD] = x[LAMDD]
    return out


def _rhs_jacobian(x: np.ndarray, m_eff: float) -> np.ndarray:
    A = np.zeros((8, 8))
    A[D, DD] = 1.0
    A[K, KD] = 1.0
    A[LAM, LAMD] = 1.0
    A[KD, KDD] = 1.0
    A[LAMD, LAMDD] = 1.0
    d = x[D]
    if d > 0:
        root = np.sqrt(d)
        # Out of contact (d <= 0) all tissue-force partials are taken from the left, i.e. zero.
        A[DD, D] = -(1.5 * x[K] * root + 0.5 * x[LAM] * x[DD] / root) / m_eff
        A[DD, K] = -root * d / m_eff
        A[DD, LAM] = -root * x[DD] / m_eff
        A[DD, DD] = -x[LAM] * root / m_eff
    return A


def propagate(x: np.ndarray, u: float, dt: float, m_eff: float) -> np.ndarray:
    """One RK4 step of the noise-free dynamics."""
    k1 = _rhs(x, u, m_eff)
    k2 = _rhs(x + 0.5 * dt * k1, u, m_eff)
    k3 = _rhs(x + 0.5 * dt * k2, u, m_eff)
    k4 = _rhs(x + dt * k3, u, m_eff)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def jacobian(state, u: float, cfg: EkfConfig) -> np.ndarray:
    """Analytic derivative of :func:`propagate` with respect to the state."""
    x = state.x if isinstance(state, EkfState) else np.asarray(state, dtype=float)
    dt, m = cfg.dt, cfg.m_eff
    eye = np.eye(8)
    k1 = _rhs(x, u, m)
    x2 = x + 0.5 * dt * k1
    k2 = _rhs(x2, u, m)
    x3 = x + 0.5 * dt * k2
    k3 = _rhs(x3, u, m)
    x4 = x + dt * k3
    J1 = _rhs_jacobian(x, m)
    J2 = _rhs_jacobian(x2, m) @ (eye + 0.5 * dt * J1)
    J3 = _rhs_jacobian(x3, m) @ (eye + 0.5 * dt * J2)
    J4 = _rhs_jacobian(x4, m) @ (eye + dt * J3)
    return eye + (dt / 6.0) * (J1 + 2.0 * J2 + 2.0 * J3 + J4)


def _chain_noise(q: float, dt: float, order: int) -> np.ndarray:
    # Discretised white noise on the highest derivative of an integrator chain.
    if order == 2:
        return q * np.array([[dt ** 3 / 3, dt ** 2 / 2], [dt ** 2 / 2, dt]])
    return q * np.array([
        [dt ** 5 / 20, dt ** 4 / 8, dt ** 3 / 6],
        [dt ** 4 / 8, dt ** 3 / 3, dt ** 2 / 2],
        [dt ** 3 / 6, dt ** 2 / 2, dt],
    ])


def process_noise(cfg: EkfConfig) -> np.ndarray:
    Q = np.zeros((8, 8))
    Q[np.ix_([D, DD], [D, DD])] = _chain_noise(cfg.q_d, cfg.dt, 2)
    Q[np.ix_([K, KD, KDD], [K, KD, KDD])] = _chain_noise(cfg.q_k, cfg.dt, 3)
    Q[np.ix_([LAM, LAMD, LAMDD], [LAM, LAMD, LAMDD])] = _chain_noise(cfg.q_lam, cfg.dt, 3)
    return Q


def _symmetrise(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def predict(state: EkfState, u: float, cfg: EkfConfig, Q: np.ndarray | None = None) -> EkfState:
    x = propagate(state.x, u, cfg.dt, cfg.m_eff)
    if not np.all(np.isfinite(x)):
        raise FilterDivergence("EKF prediction produced a non-finite state")
    F = jacobian(state.x, u, cfg)
    P = F @ state.P @ F.T + (process_noise(cfg) if Q is None else Q)
    return EkfState(x, _symmetrise(P), state.nis, state.meta)


def update(state: EkfState, z: float, cfg: EkfConfig) -> EkfState:
    """Scalar displacement measurement ``z = d + v`` with Joseph-form covariance."""
    P = state.P
    S = P[D, D] + cfg.meas_var
    if not S > 0:
        raise NumericalFailure(f"innovation variance {S} is not positive")
    gain = P[:, D] / S
    innovation = z - state.x[D]
    x = state.x + gain * innovation
    if x[D] < 0:
        x[D] = 0.0
    IKH = np.eye(8)
    IKH[:, D] -= gain
    P = IKH @ P @ IKH.T + cfg.meas_var * np.outer(gain, gain)
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(P)):
        raise FilterDivergence("EKF update produced a non-finite state")
    return EkfState(x, _symmetrise(P), innovation * innovation / S, state.meta)


class ElasticityEstimate(NamedTuple):
    E_f: float        # Pa
    eta: float        # Pa s
    converged: bool


def run_filter(samples: Iterable[tuple[float, float]], cfg: EkfConfig,
               state: EkfState | None = None) -> tuple[EkfState, np.ndarray, np.ndarray]:
    """Filter a stream of ``(force, displacement)`` pairs sampled every ``cfg.dt``.

    Returns the final state plus per-sample estimates of ``k`` and the
    normalised innovation squared.
    """
    state = initial_state(cfg) if state is None else state
    Q = process_noise(cfg)
    ks, nis = [], []
    for force, disp in samples:
        state = update(predict(state, float(force), cfg, Q), float(disp), cfg)
        ks.append(state.x[K])
        nis.append(state.nis)
    return state, np.array(ks), np.array(nis)


def _trace_samples(trace: IndentationTrace):
    # Force at t_i drives the step to t_{i+1}, where the displacement is observed.
    return zip(trace.F[:-1], trace.d[1:])


def estimate_elasticity(trace, cfg: EkfConfig | None = None, nu: float | None = None,
                        R: float | None = None, state: EkfState | None = None,
                        return_state: bool = False):
    """Estimate Young's modulus and viscosity from one indentation trace.

    ``trace`` is an :class:`IndentationTrace` or an iterable of
    ``(force, displacement)`` pairs. The estimate is converged when the
    per-step relative change of ``k`` stayed below ``cfg.settle_tol`` over the
    final 20% of samples.
    """
    cfg = cfg or EkfConfig()
    if nu is not None or R is not None:
        cfg = replace(cfg, nu=cfg.nu if nu is None else nu, R=cfg.R if R is None else R)
    if isinstance(trace, IndentationTrace):
        if len(trace) > 1 and abs(trace.dt - cfg.dt) > 1e-9 * cfg.dt:
            cfg = replace(cfg, dt=trace.dt)
        samples = _trace_samples(trace)
    else:
        samples = trace
    final, ks, _ = run_filter(samples, cfg, state)
    if len(ks) == 0:
        raise InvalidArgument("empty indentation trace")
    tail = ks[int(0.8 * len(ks)):]
    if len(tail) > 1:
        rel = np.abs(np.diff(tail)) / np.maximum(np.abs(tail[1:]), 1e-12)
        converged = bool(np.max(rel) < cfg.settle_tol)
    else:
        converged = False
    E = elasticity_from_k(final.x[K], cfg.nu, cfg.R)
    eta = final.x[LAM] * (1.0 - cfg.nu) / (4.0 * np.sqrt(cfg.R))
    est = ElasticityEstimate(float(E), float(eta), converged)
    return (est, final) if return_state else est


ESTIMATE_HEADER = "t_s,E_f_kPa,eta_Pa_s,converged"


def format_estimates(records) -> str:
    """CSV of per-cycle estimates; ``records`` holds ``(t_s, ElasticityEstimate)`` pairs."""
    lines = [ESTIMATE_HEADER]
    for t, est in records:
        lines.append(f"{float(t)!r},{est.E_f * 1e-3!r},{est.eta!r},{str(bool(est.converged)).lower()}")
    return "\n".join(lines) + "\n"


def estimate_cycles(trace: IndentationTrace, cycle_samples: int, cfg: EkfConfig | None = None):
    """Run one filter across consecutive cycles, reading the estimate at each cycle end.

    The state carries over between cycles so a stiffness change is tracked
    rather than re-learned from the prior.
    """
    cfg = cfg or EkfConfig()
    if cycle_samples < 2:
        raise InvalidArgument("a cycle needs at least two samples")
    if len(trace) > 1 and abs(trace.dt - cfg.dt) > 1e-9 * cfg.dt:
        cfg = replace(cfg, dt=trace.dt)
    out, state = [], None
    for start in range(0, len(trace) - 1, cycle_samples):
        stop = min(start + cycle_samples + 1, len(trace))
        piece = IndentationTrace(trace.t[start:stop], trace.d[start:stop],
                                 trace.ddot[start:stop], trace.F[start:stop])
        if len(piece) < 2:
            break
        est, state = estimate_elasticity(piece, cfg, state=state, return_state=True)
        out.append((float(piece.t[-1]), est))
    return out
