"""Classification metrics, length/curvature breakdowns, invariance probes,
voxel masks and max-activation attribution.

The positive class is "plausible" (label 1) throughout.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from .geometry import PLAUSIBLE, Tractogram, arc_length, flip, mean_curvature, resample
from .rng import Rng

LENGTH_BOUNDS = (0.0, 50.0, 100.0, 300.0)
CURVATURE_BOUNDS = (0.0, 0.05, 0.10, 0.20)
LENGTH_CLASSES = ("short", "medium", "long")
CURVATURE_CLASSES = ("straight", "curved", "very_curved")


def _ratio(num, den):
    # 0/0 means "no opportunity to err" and counts as perfect
    return 1.0 if den == 0 else num / den


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self):
        return _ratio(self.tp + self.tn, self.n)

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def dsc(self):
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def fp_rate(self):
        """Fraction of non-plausible fibers kept as plausible."""
        return 0.0 if self.fp + self.tn == 0 else self.fp / (self.fp + self.tn)

    def as_row(self) -> dict:
        d = asdict(self)
        d.update(n=self.n, accuracy=self.accuracy, precision=self.precision,
                 recall=self.recall, dsc=self.dsc)
        return d

    def __add__(self, other):
        return MetricsReport(self.tp + other.tp, self.fp + other.fp,
                             self.tn + other.tn, self.fn + other.fn)


METRIC_FIELDS = ("n", "tp", "fp", "tn", "fn", "accuracy", "precision", "recall", "dsc")


def _labels_of(preds) -> np.ndarray:
    preds = list(preds) if not isinstance(preds, np.ndarray) else preds
    if len(preds) and hasattr(preds[0], "label"):
        return np.array([p.label for p in preds], dtype=np.int64)
    return np.asarray(preds, dtype=np.int64)


def confusion_metrics(preds, labels) -> MetricsReport:
    p = _labels_of(preds)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError(f"{len(p)} predictions for {len(y)} labels")
    if len(y) == 0:
        raise ValueError("no samples")
    pos_p = p == PLAUSIBLE
    pos_y = y == PLAUSIBLE
    return MetricsReport(int(np.sum(pos_p & pos_y)), int(np.sum(pos_p & ~pos_y)),
                         int(np.sum(~pos_p & ~pos_y)), int(np.sum(~pos_p & pos_y)))


def format_float(x: float) -> str:
    return repr(float(x))


def metrics_csv(rows: list[dict], fields) -> str:
    """CSV text with a header row and LF endings; floats printed exactly."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow(["" if r.get(f) is None else
                    format_float(r[f]) if isinstance(r[f], float) else r[f] for f in fields])
    return buf.getvalue()


# ----------------------------------------------------------------------
# length x curvature partition


@dataclass(frozen=True)
class CategoryCell:
    length_class: str
    curvature_class: str


def _bin(value, bounds):
    # left-closed, right-open; anything past the last bound joins the top class
    i = int(np.searchsorted(bounds[1:-1], value, side="right"))
    return min(i, len(bounds) - 2)


def categorize(s) -> CategoryCell:
    return CategoryCell(LENGTH_CLASSES[_bin(arc_length(s), LENGTH_BOUNDS)],
                        CURVATURE_CLASSES[_bin(mean_curvature(s), CURVATURE_BOUNDS)])


ALL_CELLS = tuple(CategoryCell(a, b) for a in LENGTH_CLASSES for b in CURVATURE_CLASSES)


def per_category_report(preds, labels, streamlines) -> dict:
    """MetricsReport per non-empty length/curvature cell."""
    p = _labels_of(preds)
    y = np.asarray(labels, dtype=np.int64)
    if not len(p) == len(y) == len(streamlines):
        raise ValueError("predictions, labels and streamlines differ in count")
    cells = [categorize(s) for s in streamlines]
    out = {}
    for cell in ALL_CELLS:
        idx = [i for i, c in enumerate(cells) if c == cell]
        if idx:
            out[cell] = confusion_metrics(p[idx], y[idx])
    return out


def category_csv(report: dict) -> str:
    rows = []
    for cell, m in report.items():
        r = m.as_row()
        r.update(length=cell.length_class, curvature=cell.curvature_class, fp_rate=m.fp_rate)
        rows.append(r)
    return metrics_csv(rows, ("length", "curvature") + METRIC_FIELDS + ("fp_rate",))


# ----------------------------------------------------------------------
# invariance probes


def non_identity_permutation(rng: Rng, n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("a single point has no non-identity permutation")
    while True:
        perm = rng.permutation(n)
        if np.any(perm != np.arange(n)):
            return perm


def shuffle_points(streamlines, seed: int, resample_to: int | None = 16) -> list:
    """Resample, then reorder each streamline's points by a non-identity permutation."""
    rng = Rng(seed)
    out = []
    for s in streamlines:
        pts = resample(s, resample_to) if resample_to else np.asarray(s, dtype=np.float64)
        out.append(pts[non_identity_permutation(rng, len(pts))])
    return out


def permutation_test(model, t: Tractogram, labels=None, seed: int = 0,
                     resample_to: int | None = 16, workers: int = 1) -> MetricsReport:
    from .models import predict_logits

    labels = t.labels if labels is None else labels
    if labels is None:
        raise ValueError("permutation test needs labels")
    shuffled = shuffle_points(t.streamlines, seed, resample_to)
    logits = predict_logits(model, shuffled, resample_to=None, workers=workers)
    return confusion_metrics(np.argmax(logits, axis=1), labels)


def flip_test(model, t: Tractogram, resample_to: int | None = 16) -> float:
    """Max |logit(s) - logit(flip(s))| over all streamlines and classes.

    Streamlines are resampled first so both orientations see the same points.
    """
    from .models import predict_logits

    pts = [resample(s, resample_to) if resample_to else s for s in t.streamlines]
    fwd = predict_logits(model, pts, resample_to=None)
    bwd = predict_logits(model, [flip(s) for s in pts], resample_to=None)
    return float(np.max(np.abs(fwd - bwd)))


# ----------------------------------------------------------------------
# voxel masks


@dataclass
class VoxelMask:
    origin: np.ndarray
    voxel_mm: float
    occupied: np.ndarray  # bool, shape = dims

    @property
    def dims(self):
        return self.occupied.shape

    def count(self) -> int:
        return int(self.occupied.sum())

    def same_grid(self, other) -> bool:
        return (self.dims == other.dims and self.voxel_mm == other.voxel_mm
                and np.array_equal(self.origin, other.origin))


def grid_for(bounds, voxel_mm: float):
    if voxel_mm <= 0:
        raise ValueError("voxel size must be positive")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise ValueError("bounds must be two 3-vectors with lo < hi")
    dims = tuple(int(d) for d in np.maximum(np.ceil((hi - lo) / voxel_mm), 1))
    return lo, hi, dims


def brain_bounds(radius: float = 70.0):
    r = float(radius)
    return (np.array([-r, -r, -r]), np.array([r, r, r]))


@njit(cache=True)
def _traverse(p0, p1, lo, h, dims, occ):
    """Mark every voxel the segment p0 -> p1 passes through (3D DDA)."""
    cur = np.empty(3, np.int64)
    end = np.empty(3, np.int64)
    step = np.zeros(3, np.int64)
    tmax = np.full(3, np.inf)
    tdelta = np.full(3, np.inf)
    for a in range(3):
        u0 = (p0[a] - lo[a]) / h
        u1 = (p1[a] - lo[a]) / h
        c = min(max(int(np.floor(u0)), 0), dims[a] - 1)
        e = min(max(int(np.floor(u1)), 0), dims[a] - 1)
        cur[a] = c
        end[a] = e
        d = u1 - u0
        if d > 0:
            step[a] = 1
            tmax[a] = (c + 1 - u0) / d
            tdelta[a] = 1.0 / d
        elif d < 0:
            step[a] = -1
            tmax[a] = (u0 - c) / -d
            tdelta[a] = -1.0 / d
    occ[cur[0], cur[1], cur[2]] = True
    # at most one step per crossed plane along each axis
    n_steps = abs(end[0] - cur[0]) + abs(end[1] - cur[1]) + abs(end[2] - cur[2])
    for _ in range(n_steps):
        a = 0
        if tmax[1] < tmax[a]:
            a = 1
        if tmax[2] < tmax[a]:
            a = 2
        if tmax[a] > 1.0:
            break
        cur[a] += step[a]
        tmax[a] += tdelta[a]
        occ[cur[0], cur[1], cur[2]] = True


def voxelize(streamlines, voxel_mm: float = 2.0, bounds=None) -> VoxelMask:
    """Voxels crossed by any streamline segment."""
    lo, hi, dims = grid_for(bounds if bounds is not None else brain_bounds(), voxel_mm)
    occ = np.zeros(dims, dtype=np.bool_)
    dims_arr = np.array(dims, dtype=np.int64)
    for k, s in enumerate(streamlines):
        s = np.asarray(s, dtype=np.float64)
        if np.any(s < lo) or np.any(s > hi):
            raise ValueError(f"streamline {k} leaves the voxel grid bounds")
        if len(s) == 1:
            _traverse(s[0], s[0], lo, float(voxel_mm), dims_arr, occ)
        for i in range(len(s) - 1):
            _traverse(s[i], s[i + 1], lo, float(voxel_mm), dims_arr, occ)
    return VoxelMask(lo, float(voxel_mm), occ)


def volumetric_dsc(a: VoxelMask, b: VoxelMask) -> float:
    if not a.same_grid(b):
        raise ValueError("masks live on different grids")
    na, nb = a.count(), b.count()
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.sum(a.occupied & b.occupied)) / (na + nb)


# ----------------------------------------------------------------------
# attribution


def max_activation_attribution(model, s) -> np.ndarray:
    """How many global-descriptor columns each point wins in the max pool.

    Counts sum to the descriptor width.
    """
    pts = np.asarray(s, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("streamline needs at least 2 points")
    runner = model.clone()
    if not hasattr(runner, "encoder"):
        raise ValueError("model has no global max pooling")
    runner.descriptor(pts[None])
    return np.bincount(runner.encoder.argmax[0], minlength=len(pts))
