"""Command-line front end: ``ergopalp run | sweep | segment | export | presets``."""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import harness
from .contact import TrapezoidProfile
from .ekf import EkfConfig
from .errors import ConfigError, PalpationError, UndefinedMetric
from .field import (GridSpec, ScalarGrid, format_field, parse_field, read_grid,
                    write_grid)
from .gpr import GpHyper
from .hedac import HedacParams
from .record import RunRecord, format_csv, format_metrics, format_trajectory
from .segmentation import format_polygons, score, score_regions, segment, truth_mask

OUT_ENV = "ERGOPALP_OUT"
DEFAULT_OUT_ROOT = "runs"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# -- configuration ----------------------------------------------------------

_RUN_KEYS = {
    "scenario": str, "planner": str, "mode": str, "noise_std": float, "alpha_stop": "opt_float",
    "budget_mm": "opt_float", "time_cap_s": "opt_float", "safety_cap_s": float, "seed": int,
    "grid_n": int, "start_x": float, "start_y": float, "tissue_eta": float,
    "force_noise_n": float, "probe_dwell_s": float, "path_spacing_mm": float,
}
_BLOCKS = {  # section -> dataclass
    "hedac": HedacParams, "gp": GpHyper, "ekf": EkfConfig, "profile": TrapezoidProfile,
}
_OUTPUT_KEYS = {"dir": str, "images": bool, "grids": bool}
_SWEEP_KEYS = {"planners": "list_str", "budgets": "list_float", "seeds": "seeds",
               "noise_std": "list_float", "jobs": int}


def _block_types(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        t = str(f.type)
        if "bool" in t:
            out[f.name] = bool
        elif "int" in t and "float" not in t:
            out[f.name] = int
        elif "str" in t:
            out[f.name] = "float_or_str"
        elif "None" in t:
            out[f.name] = "opt_float"
        else:
            out[f.name] = float
    return out


SCHEMA = {"run": _RUN_KEYS, "output": _OUTPUT_KEYS, "sweep": _SWEEP_KEYS}
SCHEMA.update({name: _block_types(cls) for name, cls in _BLOCKS.items()})


def parse_seeds(text: str) -> list:
    """``"0-49"``, ``"1,5,9"`` or a mix such as ``"0-4,10"``."""
    seeds = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        m = re.fullmatch(r"(\d+)-(\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise ValueError(f"empty seed range {part}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def _convert(kind, raw: str):
    raw = raw.strip()
    if kind is str:
        return raw
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind == "opt_float":
        return None if raw.lower() in ("", "none") else float(raw)
    if kind == "float_or_str":
        if raw.lower() in ("", "none"):
            return None
        try:
            return float(raw)
        except ValueError:
            return raw
    if kind == "list_str":
        return [p.strip() for p in raw.split(",") if p.strip()]
    if kind == "list_float":
        return [None if p.strip().lower() == "none" else float(p) for p in raw.split(",")
                if p.strip()]
    if kind == "seeds":
        return parse_seeds(raw)
    raise AssertionError(kind)


def _line_numbers(text: str) -> dict:
    # configparser drops positions; recover (section, key) -> line for diagnostics.
    out, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            out.setdefault((section, None), lineno)
            continue
        m = re.match(r"([^=:]+)[=:]", s)
        if m and section is not None:
            out.setdefault((section, m.group(1).strip().lower()), lineno)
    return out


def load_config(path) -> dict:
    """Parse an INI config into ``{section: {key: value}}``; unknown keys are errors."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config ({exc.strerror})", path=path) from None
    lines = _line_numbers(text)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        msg = str(exc).splitlines()[0]
        raise ConfigError(msg, path=path, line=line) from None
    out = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", path=path,
                              line=lines.get((section, None)))
        schema = SCHEMA[section]
        values = {}
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in schema:
                raise ConfigError(f"unknown key in [{section}]", path=path, key=key, line=line)
            try:
                values[key] = _convert(schema[key], raw)
            except ValueError as exc:
                raise ConfigError(str(exc), path=path, key=key, line=line) from None
        out[section] = values
    return out


def build_run_config(sections: dict, overrides: dict | None = None) -> harness.RunConfig:
    run = dict(sections.get("run", {}))
    run.update({k: v for k, v in (overrides or {}).items() if v is not None})
    start = None
    if "start_x" in run or "start_y" in run:
        if "start_x" not in run or "start_y" not in run:
            raise ConfigError("start_x and start_y must be given together", key="start_x")
        start = (run.pop("start_x"), run.pop("start_y"))
    kwargs = dict(run, start=start)
    if run.get("budget_mm") is not None or run.get("time_cap_s") is not None:
        kwargs.setdefault("alpha_stop", None)
    for name, cls in _BLOCKS.items():
        fields = sections.get(name, {})
        if fields or name == "profile":
            base = TrapezoidProfile(retract=False) if name == "profile" else cls()
            kwargs[name] = dataclasses.replace(base, **fields)
    return harness.RunConfig(**kwargs)


# -- images -----------------------------------------------------------------

def grid_to_gray(grid: ScalarGrid) -> np.ndarray:
    """8-bit levels by linear min-max scaling, image row 0 = top of the domain."""
    v = grid.values
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        levels = np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        levels = np.full(v.shape, 128, dtype=np.uint8)
    return levels[::-1]


def format_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, np.uint8).tobytes()


def heatmap_ppm(grid: ScalarGrid) -> bytes:
    g = grid_to_gray(grid)
    return format_ppm(np.repeat(g[:, :, None], 3, axis=2))


def trajectory_ppm(grid: ScalarGrid, trajectory) -> bytes:
    """Heatmap of ``grid`` with the visited cells marked in red."""
    g = grid_to_gray(grid)
    rgb = np.repeat(g[:, :, None], 3, axis=2)
    spec = grid.spec
    for _, x, y in trajectory:
        col = min(max(int((x - spec.origin[0]) // spec.dx), 0), spec.nx - 1)
        row = min(max(int((y - spec.origin[1]) // spec.dy), 0), spec.ny - 1)
        rgb[spec.ny - 1 - row, col] = (255, 0, 0)
    return format_ppm(rgb)


def read_ppm(path) -> tuple[int, int, np.ndarray]:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    pix = np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
    return w, h, pix


# -- outputs ----------------------------------------------------------------

def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT_ROOT))


def run_dir_name(cfg: harness.RunConfig) -> str:
    scen = Path(cfg.scenario).stem if os.sep in cfg.scenario else cfg.scenario
    return f"{scen}-{cfg.planner}-s{cfg.seed}"


def write_run_outputs(rec: RunRecord, out: Path, truth, images: bool = True,
                      grids: bool = True) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "record.csv").write_text(format_csv(rec))
    (out / "trajectory.csv").write_text(format_trajectory(rec))
    (out / "metrics.txt").write_text(format_metrics(rec.metrics))
    (out / "truth.field").write_text(format_field(truth))
    if grids:
        for name, g in sorted(rec.grids.items()):
            write_grid(g, out / f"{name}.grid")
    if images:
        for name in ("truth", "mean", "eid"):
            if name in rec.grids:
                (out / f"{name}.ppm").write_bytes(heatmap_ppm(rec.grids[name]))
        (out / "trajectory.ppm").write_bytes(trajectory_ppm(rec.grids["mean"], rec.trajectory))


# -- commands ---------------------------------------------------------------

def _overrides(args) -> dict:
    return {
        "seed": args.seed, "planner": args.planner, "scenario": args.scenario,
        "noise_std": args.noise_std, "alpha_stop": args.alpha_stop,
        "budget_mm": args.budget_mm, "time_cap_s": args.time_cap_s, "mode": args.mode,
    }


def _sections(args) -> dict:
    return load_config(args.config) if args.config else {}


def cmd_run(args) -> int:
    sections = _sections(args)
    cfg = build_run_config(sections, _overrides(args))
    output = sections.get("output", {})
    out = Path(args.out) if args.out else Path(output.get("dir", default_out_root())) / run_dir_name(cfg)
    truth = harness.load_scenario(cfg.scenario, GridSpec.square(n=cfg.grid_n))
    rec = harness.run(cfg, truth)
    write_run_outputs(rec, out, truth, images=not args.no_images and output.get("images", True),
                      grids=output.get("grids", True))
    m = rec.metrics
    print(f"{cfg.planner} on {cfg.scenario} (seed {cfg.seed}): detected={m['detected']} "
          f"rmse={m['rmse_kPa']:.3f} kPa length={m['length_mm']:.1f} mm time={m['time_s']:.2f} s"
          f" -> {out}")
    return EXIT_OK


AGG_HEADER = ("planner,budget_mm,noise_std,runs,failed,dr_pct,time_s,rmse_kPa,length_mm,"
              "sensitivity,specificity")


def cmd_sweep(args) -> int:
    sections = _sections(args)
    sweep = sections.get("sweep", {})
    planners = args.planners.split(",") if args.planners else sweep.get("planners", list(harness.PLANNERS))
    budgets = ([float(b) for b in args.budgets.split(",")] if args.budgets
               else sweep.get("budgets", [500.0, 650.0, 800.0]))
    seeds = parse_seeds(args.seeds) if args.seeds else sweep.get("seeds", list(range(10)))
    if args.noise_std is not None:
        noises = [args.noise_std]
    elif args.noise_levels:
        noises = [float(v) for v in args.noise_levels.split(",")]
    else:
        noises = sweep.get("noise_std", [sections.get("run", {}).get("noise_std", 0.0)])
    jobs = args.jobs or sweep.get("jobs", 1)
    for p in planners:
        if p not in harness.PLANNERS:
            raise ConfigError(f"unknown planner {p!r}", key="planners")
    base_over = _overrides(args)
    base_over.update(seed=None, planner=None, budget_mm=None, noise_std=None)
    cells, cfgs = [], []
    for noise in noises:
        for planner in planners:
            for budget in budgets:
                over = dict(base_over, planner=planner, budget_mm=budget, noise_std=noise)
                base = build_run_config(sections, over)
                group = harness.seeded(base, seeds)
                cells.append((planner, budget, noise, len(cfgs), len(group)))
                cfgs.extend(group)
    results = harness.run_batch(cfgs, jobs=jobs)
    out = Path(args.out) if args.out else Path(sections.get("output", {}).get("dir", default_out_root())) / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    rows = [AGG_HEADER]
    run_rows = ["planner,budget_mm,noise_std,seed,status,detected,time_s,rmse_kPa,length_mm"]
    for planner, budget, noise, start, n in cells:
        chunk = results[start:start + n]
        agg = harness.aggregate(chunk)
        rows.append(",".join([planner, f"{budget:g}", f"{noise:g}", str(agg["runs"]),
                              str(agg["failed"])] +
                             [f"{agg[k]:.6g}" for k in ("dr_pct", "time_s", "rmse_kPa",
                                                        "length_mm", "sensitivity",
                                                        "specificity")]))
        for cfg, r in zip(cfgs[start:start + n], chunk):
            if isinstance(r, RunRecord):
                m = r.metrics
                run_rows.append(f"{planner},{budget:g},{noise:g},{cfg.seed},ok,"
                                f"{str(m['detected']).lower()},{m['time_s']:.6g},"
                                f"{m['rmse_kPa']:.6g},{m['length_mm']:.6g}")
            else:
                reason = type(r).__name__
                run_rows.append(f"{planner},{budget:g},{noise:g},{cfg.seed},failed:{reason},,,,")
                print(f"run failed: {planner} budget={budget:g} seed={cfg.seed}: {r}",
                      file=sys.stderr)
    (out / "aggregate.csv").write_text("\n".join(rows) + "\n")
    (out / "runs.csv").write_text("\n".join(run_rows) + "\n")
    print("\n".join(rows))
    return EXIT_OK


def cmd_segment(args) -> int:
    run = Path(args.run_dir)
    mean_path = run / "mean.grid"
    if not mean_path.is_file():
        print(f"error: {mean_path} not found (run with grid dumps enabled)", file=sys.stderr)
        return EXIT_FAILURE
    mean = read_grid(mean_path)
    seg = segment(mean)
    lines = [f"regions={seg.region_count}"]
    if seg.region_count == 0:
        lines[0] += " (0 regions)"
    lines.append(f"threshold_kPa={seg.threshold!r}")
    for k, (cx, cy) in enumerate(seg.centroids, start=1):
        lines.append(f"centroid_{k}={cx:.6g},{cy:.6g}")
    truth_path = Path(args.truth) if args.truth else run / "truth.field"
    if truth_path.is_file():
        truth = parse_field(truth_path.read_text(), source=str(truth_path), spec=mean.spec)
        gt = truth_mask(truth, args.fraction)
        try:
            s = score(seg.mask, gt)
            lines += [f"sensitivity={s.sensitivity!r}", f"specificity={s.specificity!r}",
                      f"tp={s.tp}", f"fp={s.fp}", f"fn={s.fn}", f"tn={s.tn}"]
        except UndefinedMetric as exc:
            lines.append(f"sensitivity=undefined ({exc})")
        for k, s in enumerate(score_regions(seg.mask, gt), start=1):
            lines += [f"sensitivity_{k}={s.sensitivity!r}", f"specificity_{k}={s.specificity!r}"]
    (run / "segmentation.txt").write_text("\n".join(lines) + "\n")
    (run / "polygons.txt").write_text(format_polygons(seg.boundaries))
    print("\n".join(lines))
    return EXIT_OK


def cmd_export(args) -> int:
    grid = read_grid(args.grid)
    out = Path(args.output) if args.output else Path(args.grid).with_suffix(".ppm")
    if args.trajectory:
        rows = Path(args.trajectory).read_text().splitlines()[1:]
        traj = [tuple(float(v) for v in r.split(",")) for r in rows if r.strip()]
        out.write_bytes(trajectory_ppm(grid, traj))
    else:
        out.write_bytes(heatmap_ppm(grid))
    print(out)
    return EXIT_OK


PRESET_INFO = {
    "one_region": "one elongated inclusion",
    "two_regions": "two inclusions of different size",
    "three_regions": "three inclusions, one small",
    "irregular": "irregular inclusion (cluster 1) and a circular one (cluster 2)",
    "donut": "ring-shaped inclusion (cluster 3)",
}


def cmd_presets(args) -> int:
    if args.show:
        truth = harness.load_scenario(args.show)
        sys.stdout.write(format_field(truth))
        return EXIT_OK
    for name in harness.SCENARIOS:
        print(f"{name:14s} {PRESET_INFO[name]}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _add_run_flags(p, planner_choices=True):
    p.add_argument("--config", metavar="PATH", help="INI config file")
    p.add_argument("--seed", type=int)
    if planner_choices:
        p.add_argument("--planner", choices=harness.PLANNERS)
    p.add_argument("--scenario", metavar="NAME", help="preset name or field file")
    p.add_argument("--mode", choices=harness.MODES)
    p.add_argument("--noise-std", type=float, metavar="KPA", dest="noise_std")
    p.add_argument("--alpha-stop", type=float, metavar="X", dest="alpha_stop")
    p.add_argument("--budget-mm", type=float, metavar="L", dest="budget_mm")
    p.add_argument("--time-cap-s", type=float, metavar="T", dest="time_cap_s")
    p.add_argument("--out", metavar="DIR", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT_ROOT})")
    p.add_argument("--jobs", type=int, metavar="N", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ergopalp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one palpation run")
    _add_run_flags(p)
    p.add_argument("--no-images", action="store_true", help="skip PPM exports")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="planner x budget x seed batch")
    _add_run_flags(p)
    p.add_argument("--planners", help="comma-separated planners")
    p.add_argument("--budgets", help="comma-separated length budgets (mm)")
    p.add_argument("--seeds", help="seed list, e.g. 0-99 or 1,2,3")
    p.add_argument("--noise-levels", dest="noise_levels",
                   help="comma-separated noise std values (kPa), one block each")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("segment", help="segment a run's GP mean and score it")
    p.add_argument("run_dir")
    p.add_argument("--truth", help="field file (default: RUN_DIR/truth.field)")
    p.add_argument("--fraction", type=float, default=0.5, help="ground-truth mask level")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("export", help="render a grid file as a PPM heatmap")
    p.add_argument("grid")
    p.add_argument("-o", "--output")
    p.add_argument("--trajectory", help="trajectory.csv to overlay")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("presets", help="list built-in scenarios")
    p.add_argument("--show", metavar="NAME", help="print a preset as a field file")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 2, --help exits 0
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PalpationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ValueError) else EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
