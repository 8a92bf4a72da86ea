"""Synthetic tractograms and rule-based plausibility labels.

The synthetic brain is a sphere of radius R centered at the origin. The
cortical interface is the shell r_inner * R <= |x| <= r_outer * R. Plausible
fibers are jittered cubic Bezier curves running between two points of the
shell; non-plausible fibers are corruptions of them (too short, looping,
truncated, folded back) or free random walks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    NON_PLAUSIBLE,
    PLAUSIBLE,
    Tractogram,
    arc_length,
    resample,
    total_turning_angle,
)
from .rng import Rng

log = logging.getLogger(__name__)

CORRUPTIONS = ("short", "loop", "truncated", "uturn", "random_walk")
MAX_TRIES = 100


@dataclass(frozen=True)
class LabelRules:
    min_length_mm: float = 20.0
    loop_angle_rad: float = 2.0 * math.pi
    r_inner: float = 0.9
    r_outer: float = 1.0
    brain_radius: float = 70.0

    def __post_init__(self):
        if not 0.0 < self.r_inner < self.r_outer <= 1.0:
            raise ValueError("need 0 < r_inner < r_outer <= 1")
        if self.min_length_mm <= 0 or self.brain_radius <= 0:
            raise ValueError("min_length_mm and brain_radius must be positive")

    def in_shell(self, p) -> bool:
        r = float(np.linalg.norm(p))
        return self.r_inner * self.brain_radius <= r <= self.r_outer * self.brain_radius

    def violations(self, s) -> list[str]:
        """Names of the rules a streamline breaks (empty list = plausible)."""
        out = []
        if arc_length(s) < self.min_length_mm:
            out.append("short")
        if total_turning_angle(s) >= self.loop_angle_rad:
            out.append("loop")
        if not (self.in_shell(s[0]) and self.in_shell(s[-1])):
            out.append("endpoint")
        return out


@dataclass(frozen=True)
class BundleTemplate:
    name: str
    control: tuple  # four (x, y, z) control points, mm
    class_id: int
    count: int
    jitter_mm: float = 2.0
    noise_mm: float = 0.03

    def sample(self, rng: Rng, n_points: int) -> np.ndarray:
        ctrl = np.asarray(self.control, dtype=np.float64)
        ctrl = ctrl + rng.normal(0.0, self.jitter_mm, size=(4, 3))
        t = np.linspace(0.0, 1.0, n_points)[:, None]
        pts = ((1 - t) ** 3 * ctrl[0] + 3 * (1 - t) ** 2 * t * ctrl[1]
               + 3 * (1 - t) * t ** 2 * ctrl[2] + t ** 3 * ctrl[3])
        return pts + rng.normal(0.0, self.noise_mm, size=pts.shape)


@dataclass
class GenConfig:
    templates: list
    corruptions: dict = field(default_factory=dict)  # corruption type -> count
    seed: int = 42
    points_per_fiber: int = 32
    rules: LabelRules = field(default_factory=LabelRules)

    def __post_init__(self):
        unknown = set(self.corruptions) - set(CORRUPTIONS)
        if unknown:
            raise ValueError(f"unknown corruption types {sorted(unknown)}")
        if any(c < 0 for c in self.corruptions.values()):
            raise ValueError("corruption counts must be non-negative")
        if self.total < 2:
            raise ValueError("need at least 2 fibers in total")
        if self.points_per_fiber < 4:
            raise ValueError("points_per_fiber must be >= 4")
        if self.corruptions and not self.templates:
            raise ValueError("corruptions need at least one template to corrupt")

    @property
    def n_plausible(self) -> int:
        return sum(t.count for t in self.templates)

    @property
    def total(self) -> int:
        return self.n_plausible + sum(self.corruptions.values())


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def make_template(name, class_id, u, v, dip, count, radius=66.5, **kw) -> BundleTemplate:
    """Bezier bundle from shell direction ``u`` to ``v``.

    ``dip`` pulls the curve's midpoint toward the brain center by that many
    mm; negative values push it outward.
    """
    p0 = radius * _unit(u)
    p3 = radius * _unit(v)
    mid = 0.5 * (p0 + p3)
    inward = -_unit(mid)
    # a cubic's midpoint is (p0 + 3 p1 + 3 p2 + p3) / 8
    shift = (4.0 / 3.0) * dip * inward
    p1 = p0 + (p3 - p0) / 3.0 + shift
    p2 = p0 + 2.0 * (p3 - p0) / 3.0 + shift
    return BundleTemplate(name, tuple(map(tuple, (p0, p1, p2, p3))), class_id, count, **kw)


def default_templates(n_plausible: int = 6000) -> list:
    """Eight bundles in distinct regions, spanning straight, arc and C shapes."""
    specs = [
        # name, u, v, dip
        ("commissural", (-1.0, 0.2, 0.35), (1.0, 0.2, 0.35), 0.0),
        ("long_arc", (-0.6, -0.8, -0.3), (0.5, 0.75, -0.45), 25.0),
        ("frontal_chord", (0.7, 0.7, 0.1), (0.55, 0.1, 0.85), 0.0),
        ("occipital_arc", (-0.3, -1.0, 0.2), (-0.9, -0.2, -0.5), 18.0),
        ("temporal_c", (0.9, -0.3, -0.4), (0.55, -0.75, -0.35), 30.0),
        ("parietal_chord", (-0.35, 0.2, 0.95), (-0.75, 0.5, 0.55), 0.0),
        ("u_fiber", (0.3, -0.5, 0.8), (0.05, -0.4, 0.9), 12.0),
        ("short_arc", (-0.5, 0.85, -0.2), (-0.75, 0.6, -0.35), 7.0),
    ]
    base, extra = divmod(n_plausible, len(specs))
    return [
        make_template(name, i + 1, u, v, dip, base + (1 if i < extra else 0))
        for i, (name, u, v, dip) in enumerate(specs)
    ]


def default_config(n_total: int = 10000, plausible_fraction: float = 0.6,
                   seed: int = 42, points_per_fiber: int = 32) -> GenConfig:
    """Dataset with an exact plausible/non-plausible split.

    Non-plausible fibers are divided evenly over the corruption types.
    """
    if not 0.0 < plausible_fraction < 1.0:
        raise ValueError("plausible_fraction must lie in (0, 1)")
    n_p = int(round(n_total * plausible_fraction))
    n_np = n_total - n_p
    base, extra = divmod(n_np, len(CORRUPTIONS))
    corr = {c: base + (1 if i < extra else 0) for i, c in enumerate(CORRUPTIONS)}
    return GenConfig(default_templates(n_p), corr, seed, points_per_fiber)


# ----------------------------------------------------------------------
# plausible sampling and corruptions


def _sample_plausible(tpl: BundleTemplate, rng: Rng, n_points: int, rules: LabelRules):
    for _ in range(MAX_TRIES):
        s = tpl.sample(rng, n_points)
        if not rules.violations(s):
            return s
    raise RuntimeError(f"template {tpl.name!r} failed the plausibility rules "
                       f"{MAX_TRIES} times in a row")


def _cut(s, length):
    """Prefix of ``s`` with the given arc length (last point interpolated)."""
    seg = np.linalg.norm(np.diff(s, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    j = int(np.searchsorted(cum, length, side="left"))
    j = min(max(j, 1), len(s) - 1)
    t = (length - cum[j - 1]) / seg[j - 1]
    end = s[j - 1] + t * (s[j] - s[j - 1])
    head = s[:j]
    if t <= 1e-9:
        return head.copy() if len(head) >= 2 else np.vstack([head, end])
    return np.vstack([head, end])


def _frame(d):
    """Two unit vectors orthogonal to unit vector ``d``."""
    a = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = _unit(np.cross(d, a))
    return e1, np.cross(d, e1)


def _short(base, rng, n_points, rules):
    target = rng.uniform(5.0, 19.0)
    s = resample(base, n_points)
    return s[0] + (s - s[0]) * (target / arc_length(s))


def _loop(base, rng, n_points, rules):
    d = _unit(base[-1] - base[-2])
    e1, e2 = _frame(d)
    r = rng.uniform(3.0, 6.0)
    pitch = rng.uniform(0.5, 1.5)  # advance along d per radian
    theta = np.linspace(0.0, 2.5 * math.pi, 21)[1:]
    # the circle is tangent to d at the fiber end
    helix = (base[-1] + r * np.sin(theta)[:, None] * d
             + r * (1.0 - np.cos(theta))[:, None] * e1
             + (pitch * theta)[:, None] * e2)
    return np.vstack([base, helix])


def _truncated(base, rng, n_points, rules):
    return _cut(base, rng.uniform(0.4, 0.7) * arc_length(base))


def _uturn(base, rng, n_points, rules):
    total = arc_length(base)
    head = _cut(base, rng.uniform(0.4, 0.7) * total)
    back_len = rng.uniform(0.3, 0.7) * arc_length(head)
    d = _unit(head[-1] - head[-2])
    e1, _ = _frame(d)
    spacing = total / (n_points - 1)
    # hairpin: the return leg runs at 170 degrees to the incoming direction
    ang = math.radians(170.0)
    back_dir = math.cos(ang) * d + math.sin(ang) * e1
    steps = max(2, int(round(back_len / spacing)))
    back = head[-1] + np.outer(np.arange(1, steps + 1) * (back_len / steps), back_dir)
    return np.vstack([head, back])


def _random_walk(base, rng, n_points, rules):
    r0 = 0.8 * rules.brain_radius
    start = rng.unit_vectors(1)[0] * r0 * rng.random() ** (1.0 / 3.0)
    steps = rng.normal(0.0, 2.0, size=(n_points - 1, 3))
    return np.vstack([start, start + np.cumsum(steps, axis=0)])


_CORRUPTORS = {
    "short": _short,
    "loop": _loop,
    "truncated": _truncated,
    "uturn": _uturn,
    "random_walk": _random_walk,
}


def _corrupt(kind, templates, rng, n_points, rules):
    """One corrupted fiber; redrawn until it really breaks a rule.

    A truncation or U-turn that happens to end back inside the interface
    shell is not a corruption of the kind intended, so it is drawn again.
    """
    for _ in range(MAX_TRIES):
        tpl = templates[rng.integers(len(templates))]
        base = _sample_plausible(tpl, rng, n_points, rules)
        s = _CORRUPTORS[kind](base, rng, n_points, rules)
        if rules.violations(s):
            return s
    raise RuntimeError(f"corruption {kind!r} kept producing rule-abiding fibers")


def generate(config: GenConfig) -> Tractogram:
    """Deterministic synthetic tractogram, shuffled.

    Labels come from :func:`apply_exclusive_rules`; ``class_ids`` hold the
    template id for bundle fibers and 0 for corruptions; ``origins`` names
    the template or corruption type of each fiber.
    """
    root = Rng(config.seed)
    rules = config.rules
    fibers, ids, origins = [], [], []
    for i, tpl in enumerate(config.templates):
        rng = root.spawn(i + 1)
        for _ in range(tpl.count):
            fibers.append(_sample_plausible(tpl, rng, config.points_per_fiber, rules))
            ids.append(tpl.class_id)
            origins.append(tpl.name)
    for j, kind in enumerate(CORRUPTIONS):
        rng = root.spawn(1000 + j)
        for _ in range(config.corruptions.get(kind, 0)):
            fibers.append(_corrupt(kind, config.templates, rng, config.points_per_fiber, rules))
            ids.append(0)
            origins.append(kind)
    order = root.spawn(0).permutation(len(fibers))
    t = Tractogram([fibers[i] for i in order], None,
                   np.asarray(ids, dtype=np.int64)[order], [origins[i] for i in order])
    t.labels = apply_exclusive_rules(t, rules)
    return t


# ----------------------------------------------------------------------
# labeling policies


def apply_exclusive_rules(t: Tractogram, rules: LabelRules | None = None) -> np.ndarray:
    """Non-plausible iff too short, looping, or an endpoint off the shell."""
    rules = rules or LabelRules()
    return np.array([NON_PLAUSIBLE if rules.violations(s) else PLAUSIBLE
                     for s in t.streamlines], dtype=np.int64)


def relabel_inclusive(class_ids, included) -> np.ndarray:
    """Plausible iff the class id is in ``included``; class 0 never is."""
    ids = np.asarray(class_ids, dtype=np.int64)
    inc = np.array(sorted(int(c) for c in included if int(c) != 0), dtype=np.int64)
    return np.where(np.isin(ids, inc), PLAUSIBLE, NON_PLAUSIBLE).astype(np.int64)


def rule_agreement(t: Tractogram, rules: LabelRules | None = None) -> dict:
    """Fraction of fibers per origin whose rule label matches the intended one.

    Bundle fibers are meant plausible, corruptions non-plausible. Mismatches
    are logged.
    """
    if t.origins is None:
        raise ValueError("tractogram carries no generator origins")
    labels = apply_exclusive_rules(t, rules)
    out = {}
    for origin in sorted(set(t.origins)):
        idx = [i for i, o in enumerate(t.origins) if o == origin]
        want = NON_PLAUSIBLE if origin in CORRUPTIONS else PLAUSIBLE
        ok = labels[idx] == want
        if not ok.all():
            log.warning("%s: %d of %d fibers disagree with the rules",
                        origin, int((~ok).sum()), len(idx))
        out[origin] = float(ok.mean())
    return out
