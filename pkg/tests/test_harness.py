from dataclasses import replace

import numpy as np
import pytest

from ergopalp import harness
from ergopalp.errors import InvalidArgument
from ergopalp.field import GridSpec, ScalarGrid
from ergopalp.record import (CSV_HEADER, RunRecord, format_csv, format_metrics, format_trajectory,
                             parse_metrics, rmse)
from ergopalp.harness import RunConfig, aggregate, load_scenario, measure, run, run_batch, seeded

SHORT = RunConfig(scenario="one_region", time_cap_s=8.0, alpha_stop=None, seed=3)


@pytest.fixture(scope="module")
def short_run():
    return run(SHORT)


# -- record -----------------------------------------------------------------

def test_csv_format():
    rec = RunRecord("ergodic", "x", 0, samples=[(0.0, 1.0, 2.0, 3.5, 1.0, float("nan"))])
    text = format_csv(rec)
    assert text.splitlines() == [CSV_HEADER, "0.0,1.0,2.0,3.5,1.0,nan,ergodic"]


def test_metrics_roundtrip():
    m = dict(planner="bo-ei", seed=4, detected=True, rmse_kPa=0.25, extra="z")
    text = format_metrics(m)
    assert text.splitlines()[0] == "planner=bo-ei"
    assert "detected=true" in text
    back = parse_metrics(text + "# comment\n\n")
    assert back["rmse_kPa"] == "0.25" and back["extra"] == "z"


def test_rmse_and_fraction_lookup():
    spec = GridSpec.square(n=4)
    a, b = ScalarGrid.constant(spec, 1.0), ScalarGrid.constant(spec, 4.0)
    assert rmse(a, b) == 3.0
    with pytest.raises(InvalidArgument):
        rmse(a, ScalarGrid.zeros(GridSpec.square(n=5)))
    rec = RunRecord("ergodic", "", 0, rmse_trace=[(0, 9.0), (1, 8.0), (2, 7.0), (10, 1.0)])
    assert rec.rmse_at_fraction(0.2) == 7.0
    assert rec.rmse_at_fraction(1.0) == 1.0
    assert np.isnan(RunRecord("ergodic", "", 0).rmse_at_fraction(0.5))


def test_record_length():
    rec = RunRecord("ergodic", "", 0, trajectory=[(0, 0, 0), (1, 3, 4), (2, 3, 5)])
    assert rec.length() == 6.0
    assert format_trajectory(rec).splitlines()[0] == "t_s,x_mm,y_mm"


# -- config and measurement -------------------------------------------------

@pytest.mark.parametrize("kw", [dict(planner="random"), dict(mode="oracle"), dict(noise_std=-1),
                                dict(budget_mm=100, time_cap_s=10), dict(budget_mm=0),
                                dict(planner="bo-ei"), dict(alpha_stop=1.5), dict(sample_hz=3)])
def test_config_validation(kw):
    with pytest.raises(InvalidArgument):
        RunConfig(**kw)


def test_stopping_alpha():
    assert harness.stopping_alpha([(0, 1.0), (1, 0.39)], 0.4)
    assert not harness.stopping_alpha([0.5], 0.4)
    with pytest.raises(InvalidArgument):
        harness.stopping_alpha([], 0.4)


def test_load_scenario():
    for name in harness.SCENARIOS:
        assert load_scenario(name).components
    assert load_scenario("3") == load_scenario("three_regions")
    with pytest.raises(InvalidArgument):
        load_scenario("nowhere")


def test_direct_measurement():
    grid = load_scenario("one_region").grid()
    rng = np.random.default_rng(0)
    p = (20.0, 25.0)
    assert measure("direct-noisy", grid, p, 0.0, rng) == pytest.approx(
        harness.sample_bilinear(grid, p))
    draws = [measure("direct-noisy", grid, p, 2.5, rng) for _ in range(4000)]
    assert np.std(draws) == pytest.approx(2.5, rel=0.05)


def test_full_physics_measurement_recovers_modulus():
    grid = ScalarGrid.constant(GridSpec.square(n=8), 50.0)
    vals = [measure("full-physics", grid, (10.0, 10.0), 0.0, np.random.default_rng(s))
            for s in range(3)]
    np.testing.assert_allclose(vals, 50.0, rtol=0.05)


# -- runs -------------------------------------------------------------------

def test_short_ergodic_run(short_run):
    m = short_run.metrics
    assert m["stop_reason"] == "time_cap" and m["time_s"] == pytest.approx(8.0)
    assert len(short_run.samples) == 4 * 8 + 1
    assert len(short_run.alpha_trace) == 9
    assert m["length_mm"] == pytest.approx(short_run.length(), rel=1e-9)
    steps = np.hypot(*np.diff(np.asarray(short_run.trajectory)[:, 1:], axis=0).T)
    assert steps.max() <= 10.0 * 0.01 + 1e-12
    assert {"truth", "mean", "std", "eid", "coverage"} <= set(short_run.grids)
    xs, ys = np.asarray(short_run.trajectory)[:, 1:].T
    xmin, xmax, ymin, ymax = GridSpec.square().bounds
    assert xs.min() >= xmin and xs.max() <= xmax and ys.min() >= ymin and ys.max() <= ymax


def test_run_is_deterministic(short_run):
    again = run(SHORT)
    assert format_csv(again) == format_csv(short_run)
    assert format_trajectory(again) == format_trajectory(short_run)
    other = run(replace(SHORT, seed=4))
    assert format_csv(other) != format_csv(short_run)


def test_tick_alpha_trace():
    rec = run(replace(SHORT, time_cap_s=3.0, tick_alpha=True))
    a = np.array([v for _, v in rec.tick_alpha_trace])
    assert len(a) == 300
    assert np.all((a >= 0) & (a <= 1))
    assert run(replace(SHORT, time_cap_s=1.0)).tick_alpha_trace == []


def test_budget_stop():
    rec = run(replace(SHORT, time_cap_s=None, budget_mm=40.0))
    assert rec.metrics["stop_reason"] == "budget"
    assert 40.0 <= rec.metrics["length_mm"] < 40.2


@pytest.mark.parametrize("planner", ["bo-ei", "bo-eis"])
def test_bo_runs(planner):
    rec = run(replace(SHORT, planner=planner, time_cap_s=None, budget_mm=100.0))
    assert rec.planner == planner
    assert rec.metrics["length_mm"] >= 100.0
    assert "sensitivity" in rec.metrics


def test_batch_order_failures_and_aggregate():
    cfgs = seeded(replace(SHORT, time_cap_s=2.0), [2, 1])
    bad = replace(cfgs[0], scenario="missing-file.field", seed=9)
    out = run_batch(cfgs + [bad])
    assert [r.seed for r in out[:2]] == [2, 1]
    assert isinstance(out[2], InvalidArgument)
    agg = aggregate(out)
    assert agg["runs"] == 3 and agg["failed"] == 1
    assert agg["rmse_kPa"] == pytest.approx(np.mean([r.metrics["rmse_kPa"] for r in out[:2]]))
    assert aggregate(list(reversed(out))) == agg


def test_parallel_batch_matches_serial():
    cfgs = seeded(replace(SHORT, time_cap_s=2.0), [5, 6])
    a = run_batch(cfgs, jobs=1)
    b = run_batch(cfgs, jobs=2)
    assert [format_csv(r) for r in a] == [format_csv(r) for r in b]
