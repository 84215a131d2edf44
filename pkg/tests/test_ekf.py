import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from ergopalp.contact import MaterialParams, TrapezoidProfile, lumped_stiffness, synth_trace
from ergopalp.ekf import (D, DD, K, KD, KDD, LAM, LAMD, LAMDD, ESTIMATE_HEADER, EkfConfig,
                          EkfState, estimate_cycles, estimate_elasticity, format_estimates,
                          initial_state, jacobian, predict, process_noise, propagate, run_filter,
                          update)
from ergopalp.errors import FilterDivergence, InvalidArgument, NumericalFailure

CFG = EkfConfig()


def state_scales(x):
    return np.array([1e-3, abs(x[K]), 10.0, 5e-3, abs(x[K]), 10.0, abs(x[K]), 10.0])


def random_state(rng):
    k = lumped_stiffness(rng.uniform(5e3, 2e5))
    return np.array([rng.uniform(1e-4, 3e-3), k, rng.uniform(0, 50), rng.uniform(-5e-3, 5e-3),
                     rng.normal() * k, rng.normal() * 10, rng.normal() * k, rng.normal() * 10])


def fd_jacobian(x, u, cfg, rel=1e-7):
    s = state_scales(x)
    J = np.zeros((8, 8))
    for j in range(8):
        h = rel * max(abs(x[j]), s[j])
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (propagate(xp, u, cfg.dt, cfg.m_eff) - propagate(xm, u, cfg.dt, cfg.m_eff)) / (2 * h)
    return J


def scaled_mismatch(J, Jfd, x):
    # Entries compared in state-scaled units; the 1e-2 floor is the FD round-off level there.
    s = state_scales(x)
    T = s[None, :] / s[:, None]
    return float((np.abs(J - Jfd) * T / np.maximum(np.abs(J * T), 1e-2)).max())


def test_config_validation():
    with pytest.raises(InvalidArgument):
        EkfConfig(dt=0.02)
    with pytest.raises(InvalidArgument):
        EkfConfig(meas_var=0.0)


def test_initial_state():
    s = initial_state(CFG)
    assert s.x[K] == pytest.approx(lumped_stiffness(20e3))
    assert s.x[D] == s.x[LAM] == 0.0
    assert np.sqrt(s.P[K, K]) == pytest.approx(10 * s.x[K])
    assert np.all(np.linalg.eigvalsh(s.P) > 0)


def test_rest_is_equilibrium():
    s = initial_state(CFG)
    out = predict(s, 0.0, CFG)
    np.testing.assert_array_equal(out.x, s.x)


def test_propagation_matches_fine_integration():
    k = lumped_stiffness(50e3)
    x = np.array([1e-3, k, 3.0, 1e-3, 0, 0, 0, 0], float)
    zero_q = EkfConfig(q_d=1e-30, q_k=1e-30, q_lam=1e-30)
    rng = np.random.default_rng(5)
    forces = rng.uniform(0.1, 0.4, 300)
    st_ = EkfState(x.copy(), np.eye(8) * 1e-12)
    ref = x.copy()
    m = zero_q.m_eff

    def rhs(_, y, u):
        d = max(y[0], 0.0)
        return [y[3], y[4], y[5], (u - y[1] * d ** 1.5 - y[2] * np.sqrt(d) * y[3]) / m,
                y[6], y[7], 0.0, 0.0]

    for u in forces:
        st_ = predict(st_, u, zero_q)
        ref = solve_ivp(rhs, (0, zero_q.dt), ref, args=(u,), rtol=1e-13, atol=1e-16,
                        method="DOP853").y[:, -1]
    assert st_.x[D] == pytest.approx(ref[0], rel=1e-6)
    assert st_.x[DD] == pytest.approx(ref[3], rel=1e-6, abs=1e-12)


def test_jacobian_chain_rows():
    rng = np.random.default_rng(2)
    x = random_state(rng)
    J = jacobian(x, 0.2, CFG)
    dt = CFG.dt
    for row, nxt in ((KD, KDD), (LAMD, LAMDD)):
        expect = np.zeros(8)
        expect[row], expect[nxt] = 1.0, dt
        np.testing.assert_allclose(J[row], expect, rtol=1e-15, atol=1e-18)
    assert J[K, K] == 1.0 and J[K, KD] == pytest.approx(dt) and J[K, KDD] == pytest.approx(dt * dt / 2)


def test_jacobian_finite_at_zero_penetration():
    x = np.array([0.0, lumped_stiffness(3e4), 2.0, 1e-3, 0, 0, 0, 0])
    J = jacobian(x, 0.0, CFG)
    assert np.all(np.isfinite(J))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 3))
def test_jacobian_matches_finite_differences(seed, u):
    x = random_state(np.random.default_rng(seed))
    assert scaled_mismatch(jacobian(x, u, CFG), fd_jacobian(x, u, CFG), x) < 1e-5


def test_zero_innovation_keeps_mean_and_shrinks_variance():
    s = predict(initial_state(CFG), 0.05, CFG)
    out = update(s, s.x[D], CFG)
    np.testing.assert_array_equal(out.x, s.x)
    assert out.P[D, D] < s.P[D, D]
    assert out.nis == 0.0


def test_huge_measurement_noise_is_noop():
    s = predict(initial_state(CFG), 0.05, CFG)
    s.x[D] = 1e-3
    out = update(s, 2e-3, EkfConfig(meas_var=1e20))
    np.testing.assert_allclose(out.x, s.x, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(out.P, s.P, rtol=1e-9, atol=1e-18)


def test_update_matches_linear_kalman_filter():
    rng = np.random.default_rng(11)
    A = rng.normal(size=(8, 8))
    P = A @ A.T * 1e-6 + np.eye(8) * 1e-9
    x = random_state(rng)
    s = EkfState(x, P)
    z = x[D] + 3e-6
    out = update(s, z, CFG)
    H = np.zeros((1, 8))
    H[0, D] = 1.0
    S = H @ P @ H.T + CFG.meas_var
    Kg = P @ H.T / S
    np.testing.assert_allclose(out.x, x + (Kg * (z - x[D])).ravel(), rtol=1e-8, atol=1e-14)
    np.testing.assert_allclose(out.P, (np.eye(8) - Kg @ H) @ P, rtol=1e-8, atol=1e-8 * np.abs(P).max())


def test_linearised_prediction_covariance():
    rng = np.random.default_rng(12)
    x = random_state(rng)
    P = np.diag(state_scales(x) ** 2) * 1e-4
    Q = process_noise(CFG)
    out = predict(EkfState(x, P), 0.3, CFG)
    F = fd_jacobian(x, 0.3, CFG)
    expect = F @ P @ F.T + Q
    np.testing.assert_allclose(out.P, expect, rtol=1e-5, atol=1e-8 * np.abs(expect).max())


def test_update_rejects_nonpositive_innovation():
    s = initial_state(CFG)
    s.P[D, D] = -1.0
    with pytest.raises(NumericalFailure):
        update(s, 0.0, CFG)


def test_divergence_detected():
    s = initial_state(CFG)
    s.x[DD] = np.inf
    with pytest.raises(FilterDivergence):
        predict(s, 0.0, CFG)


def test_penetration_clamped():
    s = initial_state(CFG)
    out = update(s, -1e-3, CFG)
    assert out.x[D] == 0.0


def test_covariance_stays_symmetric_psd():
    tr = synth_trace(MaterialParams(60e3, 1.0))
    s = initial_state(CFG)
    for F, d in list(zip(tr.F[:-1], tr.d[1:]))[::7]:
        s = update(predict(s, F, CFG), d, CFG)
        assert np.abs(s.P - s.P.T).max() <= 1e-12 * max(1.0, np.abs(s.P).max())
        assert np.linalg.eigvalsh(s.P).min() >= -1e-10 * np.trace(s.P)


@pytest.mark.parametrize("E", [10e3, 50e3, 150e3])
@pytest.mark.parametrize("eta", [0.0, 2.0])
def test_recovers_modulus_after_one_dwell(E, eta):
    tr = synth_trace(MaterialParams(E, eta), TrapezoidProfile(retract=False))
    est = estimate_elasticity(tr)
    assert abs(est.E_f - E) / E < 0.05
    assert est.converged


def test_zero_damping_is_indistinguishable_from_zero():
    tr = synth_trace(MaterialParams(50e3, 0.0), TrapezoidProfile(retract=False))
    est, final = estimate_elasticity(tr, return_state=True)
    assert abs(final.x[LAM]) < 3 * np.sqrt(final.P[LAM, LAM])


def test_step_is_tracked_within_two_cycles():
    a = synth_trace(MaterialParams(50e3))
    b = synth_trace(MaterialParams(100e3))
    out = estimate_cycles(a.concat(b).concat(b), len(a))
    assert len(out) == 3
    assert abs(out[0][1].E_f - 50e3) / 50e3 < 0.05
    assert abs(out[2][1].E_f - 100e3) / 100e3 < 0.05


def test_estimate_records_format():
    a = synth_trace(MaterialParams(30e3))
    text = format_estimates(estimate_cycles(a.concat(a), len(a)))
    lines = text.splitlines()
    assert lines[0] == ESTIMATE_HEADER == "t_s,E_f_kPa,eta_Pa_s,converged"
    assert len(lines) == 3
    t, e, _, conv = lines[1].split(",")
    assert float(e) == pytest.approx(30.0, rel=0.05)
    assert conv in ("true", "false")


def test_stream_input_matches_trace_input():
    tr = synth_trace(MaterialParams(40e3), TrapezoidProfile(retract=False))
    a = estimate_elasticity(tr)
    b = estimate_elasticity(zip(tr.F[:-1], tr.d[1:]))
    assert a == b
    with pytest.raises(InvalidArgument):
        estimate_elasticity([])


def test_innovation_statistic_is_consistent():
    # Truth simulated from the filter's own model, so the NIS must be chi-square(1).
    cfg = EkfConfig(q_d=1e-6, q_k=1e2, q_lam=1e-2, meas_var=1e-12)
    rng = np.random.default_rng(2024)
    Q = process_noise(cfg)
    Lq = np.linalg.cholesky(Q + np.eye(8) * 1e-300)
    k = lumped_stiffness(50e3)
    truth = np.array([2e-3, k, 2.0, 0, 0, 0, 0, 0], float)
    u = k * 2e-3 ** 1.5
    samples = []
    for _ in range(5000):
        truth = propagate(truth, u, cfg.dt, cfg.m_eff) + Lq @ rng.normal(size=8)
        samples.append((u, truth[D] + rng.normal(0, np.sqrt(cfg.meas_var))))
    s0 = EkfState(truth * 0 + np.array([2e-3, k, 2.0, 0, 0, 0, 0, 0]), np.diag(state_scales(truth) ** 2) * 1e-6)
    _, _, nis = run_filter(samples, cfg, s0)
    tail = nis[500:]
    half = 1.96 * np.sqrt(2.0 / len(tail))
    assert 1 - half <= tail.mean() <= 1 + half
