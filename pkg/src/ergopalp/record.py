"""Per-run log shared by all planners, and its text serialisations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .field import ScalarGrid

CSV_HEADER = "t_s,x_mm,y_mm,meas_kPa,alpha,rmse_kPa,planner"

METRIC_KEYS = (
    "planner", "scenario", "seed", "detected", "regions", "length_mm", "time_s", "rmse_kPa",
    "sensitivity", "specificity", "n_samples", "final_alpha", "converged", "stop_reason",
)


@dataclass
class RunRecord:
    planner: str
    scenario: str
    seed: int
    samples: list = field(default_factory=list)      # (t, x, y, measured, alpha, rmse)
    alpha_trace: list = field(default_factory=list)  # (t, alpha), at each refit
    tick_alpha_trace: list = field(default_factory=list)  # (t, alpha), opt-in per tick
    rmse_trace: list = field(default_factory=list)   # (t, rmse)
    trajectory: list = field(default_factory=list)   # (t, x, y)
    metrics: dict = field(default_factory=dict)
    grids: dict = field(default_factory=dict)        # name -> ScalarGrid
    skipped: int = 0
    segmentation: object = None

    def length(self) -> float:
        if len(self.trajectory) < 2:
            return 0.0
        p = np.asarray(self.trajectory, dtype=float)[:, 1:]
        return float(np.hypot(*np.diff(p, axis=0).T).sum())

    def rmse_at_fraction(self, fraction: float) -> float:
        """RMSE logged at the first update at or after ``fraction`` of the run time."""
        if not self.rmse_trace:
            return float("nan")
        t_end = self.rmse_trace[-1][0]
        for t, r in self.rmse_trace:
            if t >= fraction * t_end - 1e-9:
                return r
        return self.rmse_trace[-1][1]


def _num(v) -> str:
    if v is None:
        return "nan"
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def format_csv(record: RunRecord) -> str:
    lines = [CSV_HEADER]
    for t, x, y, meas, a, r in record.samples:
        lines.append(",".join([_num(t), _num(x), _num(y), _num(meas), _num(a), _num(r),
                               record.planner]))
    return "\n".join(lines) + "\n"


def format_metrics(metrics: dict) -> str:
    keys = [k for k in METRIC_KEYS if k in metrics] + sorted(k for k in metrics
                                                             if k not in METRIC_KEYS)
    out = []
    for k in keys:
        v = metrics[k]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = _num(v)
        out.append(f"{k}={v}")
    return "\n".join(out) + "\n"


def parse_metrics(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def format_trajectory(record: RunRecord) -> str:
    lines = ["t_s,x_mm,y_mm"]
    lines.extend(f"{_num(t)},{_num(x)},{_num(y)}" for t, x, y in record.trajectory)
    return "\n".join(lines) + "\n"


def rmse(estimate: ScalarGrid, truth: ScalarGrid) -> float:
    """Root mean square cell difference (kPa)."""
    if estimate.spec != truth.spec:
        raise InvalidArgument("grids must share a GridSpec")
    d = estimate.values - truth.values
    return float(np.sqrt(np.mean(d * d)))
