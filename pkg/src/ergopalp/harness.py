"""Closed-loop palpation simulation, measurement sources and Monte-Carlo batches.

The ergodic loop is a discrete-event scheduler on a 100 Hz control clock:
each tick the agent steers on the current heat potential and deposits
coverage; every 25 ticks (4 Hz) the probe takes a stiffness sample; every 100
ticks (1 Hz) the GP is refitted on the accumulated batch, the ergodic weight
alpha is re-evaluated and the information density is recomposed.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import bo
from .contact import MaterialParams, TrapezoidProfile, synth_trace
from .eid import compose_eid
from .ekf import EkfConfig, estimate_elasticity
from .errors import FilterDivergence, InvalidArgument, NumericalFailure, UndefinedMetric
from .field import (GridSpec, GroundTruthField, ScalarGrid, parse_field, read_field,
                    sample_bilinear)
from .gpr import GpHyper, GridPredictor, empty_model, fit_batch, predict_grids
from .hedac import HedacController, HedacParams
from .record import RunRecord, rmse
from .segmentation import detection_check, score, score_regions, segment, truth_mask

PLANNERS = ("ergodic", "bo-ei", "bo-eis")
MODES = ("direct-noisy", "full-physics")
SCENARIOS = ("one_region", "two_regions", "three_regions", "irregular", "donut")
SCENARIO_ALIASES = {"1": "one_region", "2": "two_regions", "3": "three_regions"}
SAFETY_CAP_S = 300.0

__all__ = [
    "RunConfig", "RunRecord", "measure", "run", "run_ergodic", "run_batch", "aggregate",
    "rmse", "stopping_alpha", "load_scenario",
]


def stopping_alpha(alpha_trace, threshold: float) -> bool:
    """True once the latest alpha is at or below ``threshold``."""
    if len(alpha_trace) == 0:
        raise InvalidArgument("alpha trace is empty")
    last = alpha_trace[-1]
    value = last[1] if isinstance(last, tuple) else last
    return float(value) <= threshold


def load_scenario(name: str, spec: GridSpec | None = None) -> GroundTruthField:
    """Built-in preset by name (or ``1``/``2``/``3``), or a path to a field file."""
    key = SCENARIO_ALIASES.get(name, name)
    if key in SCENARIOS:
        text = resources.files("ergopalp.presets").joinpath(f"{key}.field").read_text()
        return parse_field(text, source=f"preset:{key}", spec=spec)
    path = Path(name)
    if path.is_file():
        return read_field(path, spec=spec)
    raise InvalidArgument(f"unknown scenario {name!r}; built-ins are {', '.join(SCENARIOS)}")


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines one simulated run.

    Exactly one stopping rule applies: ``budget_mm`` (trajectory length),
    ``time_cap_s`` (simulated seconds) or, for the ergodic planner only,
    ``alpha_stop``. The safety cap always applies on top.
    """

    scenario: str = "three_regions"
    planner: str = "ergodic"
    mode: str = "direct-noisy"
    noise_std: float = 0.0                 # kPa, direct-noisy mode
    alpha_stop: float | None = 0.4
    budget_mm: float | None = None
    time_cap_s: float | None = None
    safety_cap_s: float = SAFETY_CAP_S
    seed: int = 0
    control_hz: int = 100
    sample_hz: int = 4
    refit_hz: int = 1
    grid_n: int = 64
    start: tuple | None = None             # mm; None -> drawn from the seed
    hedac: HedacParams = field(default_factory=HedacParams)
    gp: GpHyper = field(default_factory=GpHyper)
    ekf: EkfConfig = field(default_factory=EkfConfig)
    profile: TrapezoidProfile = field(default_factory=lambda: TrapezoidProfile(retract=False))
    tissue_eta: float = 0.0                # Pa s, full-physics mode
    force_noise_n: float = 0.0             # N, full-physics mode
    probe_dwell_s: float = bo.PROBE_DWELL_S
    path_spacing_mm: float = bo.PATH_SPACING_MM
    tick_alpha: bool = False               # also log alpha after every control tick

    def __post_init__(self):
        if self.planner not in PLANNERS:
            raise InvalidArgument(f"unknown planner {self.planner!r}; expected one of {PLANNERS}")
        if self.mode not in MODES:
            raise InvalidArgument(f"unknown measurement mode {self.mode!r}")
        if not self.noise_std >= 0:
            raise InvalidArgument("noise_std must be nonnegative")
        if self.control_hz % self.sample_hz or self.control_hz % self.refit_hz:
            raise InvalidArgument("sampling and refit rates must divide the control rate")
        if abs(self.hedac.control_dt * self.control_hz - 1.0) > 1e-12:
            raise InvalidArgument("hedac.control_dt must equal 1 / control_hz")
        self.stop_rule()

    def stop_rule(self) -> tuple[str, float]:
        rules = [(k, v) for k, v in (("length", self.budget_mm), ("time", self.time_cap_s))
                 if v is not None]
        if len(rules) > 1:
            raise InvalidArgument("set only one of budget_mm and time_cap_s")
        if rules:
            kind, value = rules[0]
            if not value > 0:
                raise InvalidArgument(f"{kind} stopping value must be positive")
            return rules[0]
        if self.planner != "ergodic":
            raise InvalidArgument(f"planner {self.planner} needs budget_mm or time_cap_s")
        if self.alpha_stop is None or not 0 <= self.alpha_stop <= 1:
            raise InvalidArgument("alpha_stop must lie in [0, 1]")
        return ("alpha", float(self.alpha_stop))


# -- measurement ------------------------------------------------------------

def measure(mode: str, truth: ScalarGrid, p, noise_std: float, rng: np.random.Generator,
            cfg: RunConfig | None = None) -> float | None:
    """One stiffness sample (kPa) at ``p``; ``None`` if the EKF diverged."""
    value = sample_bilinear(truth, p)
    if mode == "direct-noisy":
        if noise_std > 0:
            value += float(rng.normal(0.0, noise_std))
        return value
    if mode != "full-physics":
        raise InvalidArgument(f"unknown measurement mode {mode!r}")
    cfg = cfg or RunConfig()
    material = MaterialParams(value * 1e3, cfg.tissue_eta, cfg.ekf.nu, cfg.ekf.R)
    trace = synth_trace(material, cfg.profile, cfg.force_noise_n,
                        seed=int(rng.integers(2 ** 63)))
    try:
        est = estimate_elasticity(trace, cfg.ekf)
    except (FilterDivergence, NumericalFailure):
        return None
    return est.E_f * 1e-3


def _streams(seed: int):
    start_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(start_ss), np.random.default_rng(noise_ss)


def _start(cfg: RunConfig, spec: GridSpec, rng) -> tuple:
    if cfg.start is not None:
        return (float(cfg.start[0]), float(cfg.start[1]))
    xmin, xmax, ymin, ymax = spec.bounds
    return (float(rng.uniform(xmin, xmax)), float(rng.uniform(ymin, ymax)))


# -- planners ---------------------------------------------------------------

def _finish(rec: RunRecord, mean: ScalarGrid, std: ScalarGrid, truth: GroundTruthField) -> None:
    grid = truth.grid()
    seg = segment(mean)
    gt = truth_mask(truth)
    m = rec.metrics
    m["detected"] = bool(detection_check(seg, truth))
    m["regions"] = seg.region_count
    m["rmse_kPa"] = rmse(mean, grid)
    try:
        s = score(seg.mask, gt)
        m["sensitivity"], m["specificity"] = s.sensitivity, s.specificity
    except UndefinedMetric:
        m["sensitivity"], m["specificity"] = float("nan"), float("nan")
    for k, s in enumerate(score_regions(seg.mask, gt), start=1):
        m[f"sensitivity_{k}"], m[f"specificity_{k}"] = s.sensitivity, s.specificity
    m["n_samples"] = len(rec.samples)
    rec.grids.update(truth=grid, mean=mean, std=std)
    rec.segmentation = seg


def run_ergodic(cfg: RunConfig, truth: GroundTruthField | None = None) -> RunRecord:
    truth = truth if truth is not None else load_scenario(cfg.scenario, GridSpec.square(n=cfg.grid_n))
    spec = truth.spec
    grid = truth.grid()
    rng_start, rng_noise = _streams(cfg.seed)
    start = _start(cfg, spec, rng_start)
    ctl = HedacController(spec, cfg.hedac, start)
    rule, limit = cfg.stop_rule()
    sample_every = cfg.control_hz // cfg.sample_hz
    refit_every = cfg.control_hz // cfg.refit_hz

    rec = RunRecord("ergodic", cfg.scenario, cfg.seed)
    rec.trajectory.append((0.0, start[0], start[1]))
    model = empty_model(cfg.gp)
    grids_of = GridPredictor(spec)
    pending = []
    first_unlogged = 0
    alpha = 1.0
    err = float("nan")
    eid = None
    length = 0.0
    pos = np.array(start)
    stop_reason = "safety_cap"
    tick = 0
    while True:
        t = tick / cfg.control_hz
        if tick % sample_every == 0:
            p = (float(pos[0]), float(pos[1]))
            val = measure(cfg.mode, grid, p, cfg.noise_std, rng_noise, cfg)
            if val is None:
                rec.skipped += 1
            else:
                pending.append((p, val))
                rec.samples.append([t, p[0], p[1], val, alpha, err])
        if tick % refit_every == 0:
            model = fit_batch(model, pending, spec)
            pending = []
            mean, std = grids_of(model)
            err = rmse(mean, grid)
            alpha = 1.0 if tick == 0 else ctl.alpha()
            rec.alpha_trace.append((t, alpha))
            rec.rmse_trace.append((t, err))
            for row in rec.samples[first_unlogged:]:
                row[4], row[5] = alpha, err
            first_unlogged = len(rec.samples)
            if rule == "alpha" and stopping_alpha(rec.alpha_trace, limit):
                stop_reason = "alpha"
                break
            if rule == "time" and t >= limit - 1e-9:
                stop_reason = "time_cap"
                break
            if t >= cfg.safety_cap_s - 1e-9:
                break
            eid = compose_eid(mean, std, alpha)
            ctl.set_target(eid)
        if rule == "length" and length >= limit:
            if pending:
                model = fit_batch(model, pending, spec)
                pending = []
            mean, std = grids_of(model)
            err = rmse(mean, grid)
            rec.rmse_trace.append((t, err))
            stop_reason = "budget"
            break
        new = ctl.tick()
        length += float(math.hypot(new[0] - pos[0], new[1] - pos[1]))
        pos = new.copy()
        tick += 1
        if cfg.tick_alpha:
            rec.tick_alpha_trace.append((tick / cfg.control_hz, ctl.alpha()))
        rec.trajectory.append((tick / cfg.control_hz, float(pos[0]), float(pos[1])))

    rec.samples = [tuple(r) for r in rec.samples]
    rec.metrics.update(planner="ergodic", scenario=cfg.scenario, seed=cfg.seed,
                       length_mm=length, time_s=t, final_alpha=alpha,
                       stop_reason=stop_reason, converged=stop_reason != "safety_cap")
    _finish(rec, mean, std, truth)
    if eid is not None:
        rec.grids["eid"] = eid
    rec.grids["coverage"] = ctl.coverage.density()
    return rec


def run_bo_config(cfg: RunConfig, truth: GroundTruthField | None = None) -> RunRecord:
    truth = truth if truth is not None else load_scenario(cfg.scenario, GridSpec.square(n=cfg.grid_n))
    spec = truth.spec
    grid = truth.grid()
    rng_start, rng_noise = _streams(cfg.seed)
    start = _start(cfg, spec, rng_start)
    rule, limit = cfg.stop_rule()

    def probe(p):
        return measure(cfg.mode, grid, p, cfg.noise_std, rng_noise, cfg)

    rec, state = bo.run_bo(
        cfg.planner.split("-", 1)[1], spec, probe, start,
        budget_mm=limit if rule == "length" else None,
        time_cap_s=limit if rule == "time" else None,
        safety_cap_s=cfg.safety_cap_s, hyper=cfg.gp, v_max=cfg.hedac.v_max,
        dwell_s=cfg.probe_dwell_s, spacing=cfg.path_spacing_mm, truth=grid,
        seed=cfg.seed, scenario=cfg.scenario,
    )
    rec.metrics.update(planner=cfg.planner, scenario=cfg.scenario, seed=cfg.seed)
    mean, std = predict_grids(state.model, spec)
    _finish(rec, mean, std, truth)
    return rec


def run(cfg: RunConfig, truth: GroundTruthField | None = None) -> RunRecord:
    if cfg.planner == "ergodic":
        return run_ergodic(cfg, truth)
    return run_bo_config(cfg, truth)


# -- batches ----------------------------------------------------------------

def _safe_run(cfg: RunConfig):
    try:
        return run(cfg)
    except Exception as exc:  # recorded per run; the batch carries on
        return exc


def run_batch(cfgs, jobs: int = 1) -> list:
    """Run every config; results come back in input order.

    A failed run is returned as its exception instance.
    """
    cfgs = list(cfgs)
    if jobs <= 1 or len(cfgs) <= 1:
        return [_safe_run(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_safe_run, cfgs, chunksize=1))


def aggregate(results) -> dict:
    """Table-style summary: DR %, mean time, RMSE and length over successful runs.

    Failed runs count in the DR denominator but not in the means. Means are
    taken over seed-sorted records, so the result does not depend on order.
    """
    ok = sorted((r for r in results if isinstance(r, RunRecord)), key=lambda r: r.seed)
    n = len(list(results)) if not isinstance(results, list) else len(results)
    failed = n - len(ok)

    def mean_of(key):
        vals = [float(r.metrics[key]) for r in ok]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    detected = sum(1 for r in ok if r.metrics.get("detected"))
    return {
        "runs": n,
        "failed": failed,
        "dr_pct": 100.0 * detected / n if n else float("nan"),
        "time_s": mean_of("time_s"),
        "rmse_kPa": mean_of("rmse_kPa"),
        "length_mm": mean_of("length_mm"),
        "sensitivity": mean_of("sensitivity"),
        "specificity": mean_of("specificity"),
    }


def seeded(cfg: RunConfig, seeds) -> list:
    return [replace(cfg, seed=int(s)) for s in seeds]
