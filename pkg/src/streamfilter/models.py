"""Model assembly: the sequence edge-convolution classifier and two baselines.

Architectures
-------------
``vf``
    sequence EC over the point chain -> EC on latent k-nn -> concatenate both
    feature sets -> per-point encoder (1024) -> max over points -> FC head.
``pn``
    per-point MLP (64, 64, 64, 128) -> encoder (1024) -> max -> FC head
    (512, 256, 40) -> FC(c).
``dgcnn``
    EC(64, 64, 64) on coordinate k-nn -> EC(64, 64, 64, 128) on latent k-nn
    -> concatenate -> encoder (1024) -> max -> FC head.

Class index 1 is "plausible", 0 is "non-plausible".
"""

from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Tractogram, resample
from .layers import ClassifierHead, EdgeConv, GlobalEncoder
from .rng import Rng
from .tensor import MLP, softmax

ARCHITECTURES = ("vf", "pn", "dgcnn")

_DEFAULT_BLOCKS = {
    "vf": ((64, 64), (128, 128)),
    "pn": ((64, 64, 64, 128),),
    "dgcnn": ((64, 64, 64), (64, 64, 64, 128)),
}
_DEFAULT_HEAD = {
    "vf": (512, 256),
    "pn": (512, 256, 40),
    "dgcnn": (512, 256),
}


@dataclass
class ModelSpec:
    """Architecture description; ``blocks`` are the feature-extractor widths.

    ``coord_scale`` multiplies raw millimeter coordinates before the first
    layer so that inputs are O(1).
    """

    arch: str = "vf"
    blocks: tuple = None
    encoder_width: int = 1024
    head: tuple = None
    n_classes: int = 2
    k: int = 5
    seed: int = 0
    slope: float = 0.2
    pooling: str = "max"
    coord_scale: float = 0.01

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.blocks is None:
            self.blocks = _DEFAULT_BLOCKS[self.arch]
        if self.head is None:
            self.head = _DEFAULT_HEAD[self.arch]
        self.blocks = tuple(tuple(int(w) for w in b) for b in self.blocks)
        self.head = tuple(int(w) for w in self.head)
        n_blocks = {"vf": 2, "pn": 1, "dgcnn": 2}[self.arch]
        if len(self.blocks) != n_blocks:
            raise ValueError(f"{self.arch} needs {n_blocks} feature blocks, got {len(self.blocks)}")
        widths = [w for b in self.blocks for w in b] + list(self.head) + [self.encoder_width]
        if any(len(b) == 0 for b in self.blocks) or any(w < 1 for w in widths):
            raise ValueError("all layer widths must be positive")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.pooling not in ("max", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        d["head"] = list(self.head)
        return d


@dataclass
class Prediction:
    logits: np.ndarray
    label: int
    prob_plausible: float
    probs: np.ndarray = field(repr=False, default=None)


class Model:
    """A built network: forward/backward over (B, n, 3) batches."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        rng = Rng(spec.seed)
        s = spec
        if s.arch == "vf":
            self.ec1 = EdgeConv(3, s.blocks[0], rng, "sequence", s.k, s.pooling, s.slope, "sec")
            self.ec2 = EdgeConv(s.blocks[0][-1], s.blocks[1], rng, "latent", s.k, s.pooling,
                                s.slope, "ec")
            enc_in = s.blocks[0][-1] + s.blocks[1][-1]
        elif s.arch == "dgcnn":
            self.ec1 = EdgeConv(3, s.blocks[0], rng, "euclidean", s.k, s.pooling, s.slope, "ec1")
            self.ec2 = EdgeConv(s.blocks[0][-1], s.blocks[1], rng, "latent", s.k, s.pooling,
                                s.slope, "ec2")
            enc_in = s.blocks[0][-1] + s.blocks[1][-1]
        else:
            self.point_mlp = MLP([3, *s.blocks[0]], rng, "mlp", s.slope)
            enc_in = s.blocks[0][-1]
        self.encoder = GlobalEncoder(enc_in, s.encoder_width, rng, s.slope, "enc")
        self.head = ClassifierHead(s.encoder_width, (*s.head, s.n_classes), rng, "head")

    # ------------------------------------------------------------------
    def parameters(self):
        if self.spec.arch == "pn":
            feats = self.point_mlp.parameters()
        else:
            feats = self.ec1.parameters() + self.ec2.parameters()
        return feats + self.encoder.parameters() + self.head.parameters()

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def dtype(self):
        return self.head.parameters()[0].value.dtype

    def descriptor(self, x):
        """Pooled global descriptor z, shape (B, encoder_width)."""
        x = np.asarray(x, dtype=self.dtype) * self.spec.coord_scale
        if x.ndim != 3 or x.shape[-1] != 3:
            raise ValueError(f"expected (B, n, 3) points, got {x.shape}")
        if x.shape[1] < 2:
            raise ValueError("streamlines need at least 2 points")
        if self.spec.arch == "pn":
            return self.encoder.forward(self.point_mlp.forward(x))
        x1 = self.ec1.forward(x)
        x2 = self.ec2.forward(x1)
        return self.encoder.forward(x1, x2)

    def forward(self, x):
        return self.head.forward(self.descriptor(x))

    def backward(self, grad_logits):
        """Accumulate parameter gradients; returns d loss / d raw coordinates."""
        gz = self.head.backward(grad_logits)
        if self.spec.arch == "pn":
            (g,) = self.encoder.backward(gz)
            gx = self.point_mlp.backward(g)
        else:
            g1, g2 = self.encoder.backward(gz)
            g1 = g1 + self.ec2.backward(g2)
            gx = self.ec1.backward(g1)
        return gx * self.spec.coord_scale

    def graph_signature(self):
        """Discrete state of the last forward: argmaxes and neighbor tables.

        Two forwards with equal signatures lie on the same smooth piece of
        the network function.
        """
        parts = [self.encoder.argmax.tobytes()]
        mods = [self.point_mlp] if self.spec.arch == "pn" else [self.ec1, self.ec2]
        for m in mods:
            if isinstance(m, EdgeConv):
                parts.append(m.table.index.tobytes())
                if m.pool.mode == "max":
                    parts.append(m.pool._cache[1].tobytes())
                parts.extend(a._mask.tobytes() for a in _activations(m))
            else:
                parts.extend(a._mask.tobytes() for a in _activations(m))
        parts.extend(a._mask.tobytes() for a in _activations(self.head.mlp))
        parts.append(self.encoder.act._mask.tobytes())
        return hash(tuple(parts))

    # ------------------------------------------------------------------
    def clone(self, dtype=None) -> "Model":
        """Copy with private forward caches.

        Parameter arrays are shared unless ``dtype`` asks for a cast copy,
        so clones are suitable as read-only inference snapshots.
        """
        other = copy.copy(self)
        other.__dict__ = {}
        other.spec = self.spec
        memo = {}
        for key, val in self.__dict__.items():
            if key == "spec":
                continue
            other.__dict__[key] = _clone_module(val, memo, dtype)
        return other

    def copy_params_from(self, other: "Model"):
        mine = self.named_parameters()
        for name, p in other.named_parameters().items():
            mine[name].value[...] = p.value


def _activations(mod):
    from .tensor import LeakyReLU

    out = []
    if isinstance(mod, EdgeConv):
        out.append(mod.act)
        if mod.rest is not None:
            out.extend(_activations(mod.rest))
    elif isinstance(mod, MLP):
        out.extend(l for l in mod.layers if isinstance(l, LeakyReLU))
    return out


def _clone_module(obj, memo, dtype):
    from .tensor import Param

    if id(obj) in memo:
        return memo[id(obj)]
    if isinstance(obj, Param):
        if dtype is None:
            new = obj  # shared read-only snapshot
        else:
            new = Param(obj.name, obj.value.astype(dtype))
        memo[id(obj)] = new
        return new
    if isinstance(obj, list):
        return [_clone_module(o, memo, dtype) for o in obj]
    if hasattr(obj, "__dict__") and obj.__class__.__module__.startswith("streamfilter"):
        new = copy.copy(obj)
        memo[id(obj)] = new
        for k, v in obj.__dict__.items():
            if isinstance(v, np.ndarray) or k.startswith("_") or k in ("table", "argmax"):
                setattr(new, k, None if k.startswith("_") or k in ("table", "argmax") else v)
            else:
                setattr(new, k, _clone_module(v, memo, dtype))
        return new
    return obj


def build(spec: ModelSpec) -> Model:
    return Model(spec)


def parameter_count(spec: ModelSpec) -> int:
    """Closed-form parameter count from the layer shapes."""

    def dense(widths):
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))

    s = spec
    if s.arch == "pn":
        feats = dense([3, *s.blocks[0]])
        enc_in = s.blocks[0][-1]
    else:
        b1, b2 = s.blocks
        # edge networks take x_i concatenated with x_j - x_i
        feats = dense([6, *b1]) + dense([2 * b1[-1], *b2])
        enc_in = b1[-1] + b2[-1]
    return (feats + dense([enc_in, s.encoder_width])
            + dense([s.encoder_width, *s.head, s.n_classes]))


# ----------------------------------------------------------------------
def _prepare(streamlines, resample_to):
    if resample_to is None:
        lens = {len(s) for s in streamlines}
        if len(lens) != 1:
            raise ValueError("streamlines differ in length; pass resample_to")
        return np.stack([np.asarray(s, dtype=np.float64) for s in streamlines])
    return np.stack([resample(s, resample_to) for s in streamlines])


def _to_prediction(logits_row) -> Prediction:
    p = softmax(logits_row[None].astype(np.float64))[0]
    return Prediction(logits_row.copy(), int(np.argmax(logits_row)), float(p[1]), p)


def forward(model: Model, s) -> Prediction:
    """Predict a single streamline at its own resolution (k capped at n - 1)."""
    pts = np.asarray(s, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("streamline needs at least 2 points")
    return _to_prediction(model.forward(pts[None])[0])


def predict_logits(model: Model, streamlines, resample_to: int | None = 16,
                   workers: int = 1, chunk: int = 512, dtype=None) -> np.ndarray:
    """Logits for many streamlines, shape (S, c).

    Work is split into fixed ``chunk``-sized slices independent of the
    worker count, so the result is bitwise identical for any ``workers``.
    ``dtype=np.float32`` runs inference in single precision.
    """
    if len(streamlines) == 0:
        raise ValueError("empty tractogram")
    x = _prepare(streamlines, resample_to)
    starts = list(range(0, len(x), chunk))
    snapshot = model.clone(dtype) if dtype is not None and dtype != model.dtype else model
    if workers <= 1:
        runner = snapshot.clone()
        parts = [runner.forward(x[i:i + chunk]) for i in starts]
    else:
        runners = [snapshot.clone() for _ in range(workers)]

        def job(w):
            m = runners[w]
            return [(i, m.forward(x[i:i + chunk])) for i in starts[w::workers]]

        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = dict(r for rs in pool.map(job, range(workers)) for r in rs)
        parts = [done[i] for i in starts]
    return np.concatenate(parts, axis=0)


def predict_batch(model: Model, t: Tractogram, resample_to: int | None = 16,
                  workers: int = 1, dtype=None) -> list:
    logits = predict_logits(model, t.streamlines, resample_to, workers, dtype=dtype)
    return [_to_prediction(row) for row in logits]


def export_latent(model: Model, t: Tractogram, resample_to: int | None = 16,
                  chunk: int = 512) -> np.ndarray:
    """Pooled global descriptor per streamline, shape (S, encoder_width)."""
    if model.spec.arch not in ARCHITECTURES:
        raise ValueError(f"architecture {model.spec.arch!r} has no global descriptor")
    if len(t) == 0:
        raise ValueError("empty tractogram")
    x = _prepare(t.streamlines, resample_to)
    runner = model.clone()
    return np.concatenate([runner.descriptor(x[i:i + chunk]) for i in range(0, len(x), chunk)])
