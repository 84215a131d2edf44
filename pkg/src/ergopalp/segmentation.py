"""Stiff/background segmentation of stiffness maps and pixelwise scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, NoCluster, UndefinedMetric
from .field import GridSpec, GroundTruthField, ScalarGrid, connected_components

DETECTION_RADIUS_MM = 5.0
TRUTH_FRACTION = 0.5


@dataclass(frozen=True)
class SegmentationResult:
    mask: np.ndarray                  # bool, grid shape
    region_count: int
    boundaries: list                  # per region: list of closed loops [(x, y), ...]
    centroids: list                   # per region: (x, y) in mm
    threshold: float = float("nan")   # kPa


@dataclass(frozen=True)
class SegScores:
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    fn: int
    tn: int


def two_means(values, max_iter: int = 1000) -> tuple[float, float]:
    """Lloyd iterations of 1-D 2-means started from the min and max.

    Returns the (lower, upper) centres at the fixed point.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise NoCluster("no values to cluster")
    c0, c1 = float(v.min()), float(v.max())
    if not c1 > c0:
        raise NoCluster("values hold a single distinct value")
    for _ in range(max_iter):
        split = v > 0.5 * (c0 + c1)
        c0_new = float(v[~split].mean())
        c1_new = float(v[split].mean())
        if c0_new == c0 and c1_new == c1:
            break
        c0, c1 = c0_new, c1_new
    return c0, c1


def kmeans2(values: ScalarGrid) -> tuple[float, np.ndarray]:
    """2-means on cell values; returns the midpoint threshold and stiff-cluster mask."""
    c0, c1 = two_means(values.values)
    threshold = 0.5 * (c0 + c1)
    return threshold, (values.values > threshold)


# -- boundaries -------------------------------------------------------------

_LEFT_TURN = {(1, 0): (0, 1), (0, 1): (-1, 0), (-1, 0): (0, -1), (0, -1): (1, 0)}
_RIGHT_TURN = {b: a for a, b in _LEFT_TURN.items()}


def _directed_edges(mask: np.ndarray) -> dict:
    # Counter-clockwise edges of every filled cell; shared interior edges cancel.
    # Vertices are integer corner indices (col, row).
    out: dict = {}
    m = np.pad(mask, 1)
    rows, cols = np.nonzero(mask)
    for r, c in zip(rows.tolist(), cols.tolist()):
        pr, pc = r + 1, c + 1
        if not m[pr - 1, pc]:
            out.setdefault((c, r), []).append((c + 1, r))
        if not m[pr, pc + 1]:
            out.setdefault((c + 1, r), []).append((c + 1, r + 1))
        if not m[pr + 1, pc]:
            out.setdefault((c + 1, r + 1), []).append((c, r + 1))
        if not m[pr, pc - 1]:
            out.setdefault((c, r + 1), []).append((c, r))
    return out


def _trace_loops(mask: np.ndarray) -> list:
    edges = _directed_edges(mask)
    loops = []
    while edges:
        start = min(edges)
        loop = [start]
        v = start
        heading = None
        while True:
            options = edges[v]
            if len(options) == 1 or heading is None:
                nxt = options[0]
            else:
                # Pinch vertex: hug the current cell so diagonal neighbours stay apart.
                want = _LEFT_TURN[heading]
                nxt = next((o for o in options if (o[0] - v[0], o[1] - v[1]) == want), options[0])
            options.remove(nxt)
            if not options:
                del edges[v]
            heading = (nxt[0] - v[0], nxt[1] - v[1])
            v = nxt
            if v == start:
                break
            loop.append(v)
        loops.extend(_drop_collinear(lp) for lp in _split_at_repeats(loop))
    return loops


def _split_at_repeats(loop: list) -> list:
    # A loop that touches itself at a pinch vertex becomes two simple loops.
    seen = {}
    for i, v in enumerate(loop):
        if v in seen:
            j = seen[v]
            inner = loop[j:i]
            outer = loop[:j] + loop[i:]
            return _split_at_repeats(outer) + _split_at_repeats(inner)
        seen[v] = i
    return [loop]


def _drop_collinear(loop: list) -> list:
    n = len(loop)
    keep = []
    for i in range(n):
        a, b, c = loop[i - 1], loop[i], loop[(i + 1) % n]
        if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) != 0:
            keep.append(b)
    return keep


def _to_mm(loop: list, spec: GridSpec) -> list:
    ox, oy = spec.origin
    return [(ox + c * spec.dx, oy + r * spec.dy) for c, r in loop]


def extract_boundaries(mask, spec: GridSpec) -> list:
    """Cell-edge boundary loops, one list per 4-connected region.

    Each region's first loop is its exterior (counter-clockwise); any further
    loops are holes (clockwise), so signed shoelace areas sum to the cell area
    of the region.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != spec.shape:
        raise InvalidArgument(f"mask shape {mask.shape} does not match grid {spec.shape}")
    labels, count = connected_components(mask)
    regions = []
    for lab in range(1, count + 1):
        loops = _trace_loops(labels == lab)
        loops.sort(key=lambda lp: -shoelace_area(lp))
        regions.append([_to_mm(lp, spec) for lp in loops])
    return regions


def shoelace_area(loop: Sequence) -> float:
    """Signed area; positive for counter-clockwise loops."""
    p = np.asarray(loop, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def format_polygons(regions: list) -> str:
    """One loop per line as ``x0,y0 x1,y1 ...`` in mm."""
    lines = []
    for loops in regions:
        for loop in loops:
            lines.append(" ".join(f"{x:.6g},{y:.6g}" for x, y in loop))
    return "\n".join(lines) + ("\n" if lines else "")


# -- segmentation -----------------------------------------------------------

def region_centroids(labels: np.ndarray, count: int, spec: GridSpec) -> list:
    if count == 0:
        return []
    x, y = spec.mesh()
    idx = np.arange(1, count + 1)
    cx = ndimage.mean(x, labels, idx)
    cy = ndimage.mean(y, labels, idx)
    return [(float(a), float(b)) for a, b in zip(np.atleast_1d(cx), np.atleast_1d(cy))]


def segment_mask(mask, spec: GridSpec, threshold: float = float("nan")) -> SegmentationResult:
    mask = np.asarray(mask, dtype=bool)
    labels, count = connected_components(mask)
    return SegmentationResult(mask, count, extract_boundaries(mask, spec),
                              region_centroids(labels, count, spec), threshold)


def segment(grid: ScalarGrid) -> SegmentationResult:
    """2-means segmentation; a constant map yields zero regions."""
    try:
        threshold, mask = kmeans2(grid)
    except NoCluster:
        return segment_mask(np.zeros(grid.spec.shape, dtype=bool), grid.spec)
    return segment_mask(mask, grid.spec, threshold)


def truth_mask(truth: GroundTruthField, fraction: float = TRUTH_FRACTION) -> np.ndarray:
    """Cells above background plus ``fraction`` of the locally dominant amplitude."""
    if not 0 < fraction < 1:
        raise InvalidArgument(f"fraction must lie in (0, 1), got {fraction}")
    spec = truth.spec
    if not truth.components:
        return np.zeros(spec.shape, dtype=bool)
    x, y = spec.mesh()
    contrib = np.stack([c.evaluate(x, y) for c in truth.components])
    amps = np.array([c.amplitude for c in truth.components])
    dominant = amps[np.argmax(contrib, axis=0)]
    return contrib.sum(axis=0) > fraction * dominant


def score(mask, truth, window=None) -> SegScores:
    """Pixelwise sensitivity and specificity, optionally restricted to ``window``."""
    mask = np.asarray(mask, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if mask.shape != truth.shape:
        raise InvalidArgument("mask and truth shapes differ")
    if window is not None:
        window = np.asarray(window, dtype=bool)
        mask, truth = mask[window], truth[window]
    tp = int(np.sum(mask & truth))
    fp = int(np.sum(mask & ~truth))
    fn = int(np.sum(~mask & truth))
    tn = int(np.sum(~mask & ~truth))
    if tp + fn == 0:
        raise UndefinedMetric("truth has no positive cells; sensitivity is undefined")
    spec_val = tn / (tn + fp) if tn + fp else 1.0
    return SegScores(tp / (tp + fn), spec_val, tp, fp, fn, tn)


def region_windows(truth: np.ndarray) -> list:
    """Partition the grid by nearest ground-truth region (one window per region)."""
    labels, count = connected_components(truth)
    if count == 0:
        return []
    _, (ri, ci) = ndimage.distance_transform_edt(labels == 0, return_indices=True)
    nearest = labels[ri, ci]
    return [nearest == lab for lab in range(1, count + 1)]


def score_regions(mask, truth) -> list:
    """Scores per ground-truth region, each within its nearest-region window."""
    return [score(mask, truth, w) for w in region_windows(truth)]


def truth_regions(truth: GroundTruthField, fraction: float = TRUTH_FRACTION) -> SegmentationResult:
    return segment_mask(truth_mask(truth, fraction), truth.spec)


def detection_check(result: SegmentationResult, truth, radius: float = DETECTION_RADIUS_MM,
                    fraction: float = TRUTH_FRACTION) -> bool:
    """Region count matches and every centroid lies near a distinct true region.

    ``truth`` is a :class:`GroundTruthField` (regions taken from its
    half-maximum mask) or a sequence of true region centres.
    """
    if isinstance(truth, GroundTruthField):
        centers = truth_regions(truth, fraction).centroids
    else:
        centers = [tuple(map(float, c)) for c in truth]
    if result.region_count != len(centers):
        return False
    pairs = []
    for i, p in enumerate(result.centroids):
        for j, q in enumerate(centers):
            pairs.append((float(np.hypot(p[0] - q[0], p[1] - q[1])), i, j))
    pairs.sort()
    used_p, used_q = set(), set()
    for dist, i, j in pairs:
        if i in used_p or j in used_q:
            continue
        if dist > radius:
            return False
        used_p.add(i)
        used_q.add(j)
    return len(used_p) == len(centers)
