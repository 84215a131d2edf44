import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ergopalp.eid import compose_eid, normalized_or_uniform
from ergopalp.errors import InvalidArgument
from ergopalp.field import GridSpec, ScalarGrid, integrate, uniform_density

SPEC = GridSpec.square(n=20)


def _grids(seed):
    rng = np.random.default_rng(seed)
    mean = ScalarGrid(SPEC, rng.uniform(-5, 120, SPEC.shape))
    std = ScalarGrid(SPEC, rng.uniform(0.1, 10, SPEC.shape))
    return mean, std


def cellwise_eid(mean, std, alpha):
    """Cell-by-cell evaluation with explicit loops over the grid."""
    ny, nx = mean.shape
    dx = dy = SPEC.dx
    area = dx * dy
    g = np.zeros_like(mean)
    for r in range(ny):
        for c in range(nx):
            if c == 0:
                gx = (mean[r, 1] - mean[r, 0]) / dx
            elif c == nx - 1:
                gx = (mean[r, c] - mean[r, c - 1]) / dx
            else:
                gx = (mean[r, c + 1] - mean[r, c - 1]) / (2 * dx)
            if r == 0:
                gy = (mean[1, c] - mean[0, c]) / dy
            elif r == ny - 1:
                gy = (mean[r, c] - mean[r - 1, c]) / dy
            else:
                gy = (mean[r + 1, c] - mean[r - 1, c]) / (2 * dy)
            g[r, c] = (gx * gx + gy * gy) ** 0.5
    mu = np.maximum(mean, 0)
    xi = (1 - alpha) * (g / (g.sum() * area) + mu / (mu.sum() * area)) + alpha * std / (std.sum() * area)
    return xi / (xi.sum() * area)


def test_alpha_one_is_normalized_std():
    mean, std = _grids(0)
    out = compose_eid(mean, std, 1.0)
    np.testing.assert_allclose(out.values, std.values / integrate(std), rtol=1e-14)


def test_alpha_zero_flat_mean_is_uniform():
    mean = ScalarGrid.constant(SPEC, 30.0)
    _, std = _grids(1)
    out = compose_eid(mean, std, 0.0)
    np.testing.assert_allclose(out.values, uniform_density(SPEC).values, rtol=1e-12)


def test_before_any_data_all_terms_fall_back():
    out = compose_eid(ScalarGrid.zeros(SPEC), ScalarGrid.zeros(SPEC), 0.3)
    np.testing.assert_allclose(out.values, uniform_density(SPEC).values, rtol=1e-12)


@pytest.mark.parametrize("alpha", [0.5, 0.13, 0.9])
def test_matches_cellwise_formula(alpha):
    mean, std = _grids(2)
    out = compose_eid(mean, std, alpha)
    np.testing.assert_allclose(out.values, cellwise_eid(mean.values, std.values, alpha),
                               rtol=1e-12)


def test_errors():
    mean, std = _grids(3)
    with pytest.raises(InvalidArgument):
        compose_eid(mean, ScalarGrid.zeros(GridSpec.square(n=8)), 0.5)
    for a in (-0.01, 1.01, np.nan):
        with pytest.raises(InvalidArgument):
            compose_eid(mean, std, a)


def test_normalized_or_uniform():
    z = ScalarGrid.zeros(SPEC)
    assert normalized_or_uniform(z) == uniform_density(SPEC)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 1))
def test_output_is_density(seed, alpha):
    mean, std = _grids(seed)
    out = compose_eid(mean, std, alpha)
    assert out.values.min() >= 0
    assert integrate(out) == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 1), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, alpha, c):
    mean, std = _grids(seed)
    mean = mean.with_values(np.abs(mean.values))
    base = compose_eid(mean, std, alpha).values
    np.testing.assert_allclose(compose_eid(mean.with_values(c * mean.values), std, alpha).values,
                               base, rtol=1e-10)
    np.testing.assert_allclose(compose_eid(mean, std.with_values(c * std.values), alpha).values,
                               base, rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 2 ** 32 - 1))
def test_endpoint_independence(s1, s2):
    m1, d1 = _grids(s1)
    m2, d2 = _grids(s2)
    assert compose_eid(m1, d1, 1.0) == compose_eid(m2, d1, 1.0)
    assert compose_eid(m1, d1, 0.0) == compose_eid(m1, d2, 0.0)
