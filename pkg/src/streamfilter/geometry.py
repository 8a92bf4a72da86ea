"""Polyline primitives for streamlines: length, resampling, curvature, flipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PLAUSIBLE = 1
NON_PLAUSIBLE = 0


def as_streamline(points) -> np.ndarray:
    """Validate and return an (n, 3) float64 array.

    Raises ``ValueError`` for fewer than two points, non-finite coordinates,
    or repeated consecutive points.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"streamline must have shape (n, 3), got {pts.shape}")
    if pts.shape[0] < 2:
        raise ValueError("streamline needs at least 2 points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("streamline has non-finite coordinates")
    if np.any(np.all(pts[1:] == pts[:-1], axis=1)):
        raise ValueError("streamline has repeated consecutive points")
    return pts


@dataclass
class Tractogram:
    """A collection of streamlines with optional per-streamline annotations.

    ``labels`` holds 1 for plausible and 0 for non-plausible. ``class_ids``
    holds bundle identities (0 = unassigned). ``origins`` is generator
    metadata naming how each fiber was produced; it is not persisted.
    """

    streamlines: list
    labels: np.ndarray | None = None
    class_ids: np.ndarray | None = None
    origins: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.streamlines = [np.asarray(s, dtype=np.float64) for s in self.streamlines]
        n = len(self.streamlines)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != n:
                raise ValueError(f"{len(self.labels)} labels for {n} streamlines")
        if self.class_ids is not None:
            self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
            if len(self.class_ids) != n:
                raise ValueError(f"{len(self.class_ids)} class ids for {n} streamlines")
            if np.any(self.class_ids < 0):
                raise ValueError("class ids must be non-negative")
        if self.origins is not None and len(self.origins) != n:
            raise ValueError(f"{len(self.origins)} origins for {n} streamlines")

    def __len__(self):
        return len(self.streamlines)

    def subset(self, idx) -> "Tractogram":
        idx = np.asarray(idx, dtype=np.int64)
        return Tractogram(
            [self.streamlines[i] for i in idx],
            None if self.labels is None else self.labels[idx],
            None if self.class_ids is None else self.class_ids[idx],
            None if self.origins is None else [self.origins[i] for i in idx],
        )

    @classmethod
    def concat(cls, parts) -> "Tractogram":
        parts = list(parts)
        streamlines = [s for p in parts for s in p.streamlines]

        def _join(attr):
            vals = [getattr(p, attr) for p in parts]
            if any(v is None for v in vals):
                return None
            if attr == "origins":
                return [o for v in vals for o in v]
            return np.concatenate(vals)

        return cls(streamlines, _join("labels"), _join("class_ids"), _join("origins"))


def segment_lengths(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.linalg.norm(np.diff(s, axis=0), axis=1)


def arc_length(s) -> float:
    """Sum of the Euclidean lengths of consecutive segments, in mm."""
    # fsum is order independent, so the result is bitwise flip invariant
    return math.fsum(segment_lengths(s))


def resample(s, m: int) -> np.ndarray:
    """Resample to ``m`` points equally spaced along the arc length.

    Interpolation is piecewise linear; the first and last points are kept
    exactly.
    """
    if m < 2:
        raise ValueError(f"cannot resample to {m} points (need m >= 2)")
    s = np.asarray(s, dtype=np.float64)
    cum = np.concatenate([[0.0], np.cumsum(segment_lengths(s))])
    total = cum[-1]
    targets = np.linspace(0.0, total, m)
    seg = np.searchsorted(cum, targets, side="right") - 1
    seg = np.clip(seg, 0, len(s) - 2)
    seg_len = cum[seg + 1] - cum[seg]
    t = np.divide(targets - cum[seg], seg_len, out=np.zeros(m), where=seg_len > 0)
    out = s[seg] + t[:, None] * (s[seg + 1] - s[seg])
    out[0] = s[0]
    out[-1] = s[-1]
    return out


def menger_curvatures(s) -> np.ndarray:
    """Menger curvature (1 / circumradius) of every consecutive point triple.

    Collinear or degenerate triples give 0.
    """
    s = np.asarray(s, dtype=np.float64)
    if len(s) < 3:
        return np.zeros(0)
    a = s[:-2]
    b = s[1:-1]
    c = s[2:]
    ab = np.linalg.norm(a - b, axis=1)
    bc = np.linalg.norm(c - b, axis=1)
    ca = np.linalg.norm(a - c, axis=1)
    # every term below is symmetric under a <-> c, keeping flips bitwise exact
    cross = np.linalg.norm(np.cross(a - b, c - b), axis=1)
    denom = (ab * bc) * ca
    return np.divide(2.0 * cross, denom, out=np.zeros(len(a)), where=denom > 0)


def mean_curvature(s) -> float:
    """Mean Menger curvature over interior points, in 1/mm (0 when n < 3)."""
    k = menger_curvatures(s)
    return math.fsum(k) / len(k) if len(k) else 0.0


def flip(s) -> np.ndarray:
    return np.asarray(s)[::-1].copy()


def turning_angles(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if len(s) < 3:
        return np.zeros(0)
    d = np.diff(s, axis=0)
    u, v = d[:-1], d[1:]
    # atan2 form stays accurate near 0 and pi, unlike arccos of the dot product
    cross = np.linalg.norm(np.cross(u, v), axis=1)
    dot = np.einsum("ij,ij->i", u, v)
    return np.arctan2(cross, dot)


def total_turning_angle(s) -> float:
    """Sum of unsigned angles between successive segment directions, in radians."""
    return math.fsum(turning_angles(s))
