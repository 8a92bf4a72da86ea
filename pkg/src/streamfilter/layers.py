"""Edge convolution, sequence edge convolution, global encoder and head.

All blocks take batches shaped (B, n, d): B streamlines of n points each.
"""

from __future__ import annotations

import numpy as np

from .graph import FiberGraph, batch_knn_table, batch_sequence_table
from .tensor import (
    LeakyReLU,
    Linear,
    MaxPoolRows,
    MLP,
    Module,
    NeighborPool,
    NeighborTable,
    Param,
    glorot_uniform,
)

NEIGHBOR_SOURCES = ("sequence", "euclidean", "latent")


class EdgeLinear(Module):
    """First layer of an edge network, applied to x_i concatenated with x_j - x_i.

    With W = [W_a; W_b] split by input half, the pre-activation of edge
    (i, j) is x_i (W_a - W_b) + x_j W_b + b, so the matrix products run once
    per node instead of once per edge.
    """

    def __init__(self, d_in: int, d_out: int, rng, name: str):
        w = glorot_uniform(rng, 2 * d_in, d_out) if rng is not None else np.zeros((2 * d_in, d_out))
        self.W = Param(f"{name}.W", w)
        self.b = Param(f"{name}.b", np.zeros(d_out))
        self.d_in = d_in
        self._cache = None

    def parameters(self):
        return [self.W, self.b]

    def forward(self, x, table: NeighborTable):
        d = self.d_in
        if x.shape[-1] != d:
            raise ValueError(f"edge layer expects width {d}, got {x.shape[-1]}")
        Wa, Wb = self.W.value[:d], self.W.value[d:]
        p = x @ (Wa - Wb)
        q = x @ Wb
        self._cache = (x, table)
        return p[:, None, :] + q[table.index] + self.b.value

    def backward(self, grad):
        x, table = self._cache
        d = self.d_in
        dp = grad.sum(axis=1)
        dq = table.scatter_matrix() @ grad.reshape(-1, grad.shape[-1])
        xt_dp = x.T @ dp
        xt_dq = x.T @ dq
        self.W.grad[:d] += xt_dp
        self.W.grad[d:] += xt_dq - xt_dp
        self.b.grad += dp.sum(axis=0)
        Wa, Wb = self.W.value[:d], self.W.value[d:]
        return dp @ (Wa - Wb).T + dq @ Wb.T


class EdgeConv(Module):
    """Edge convolution block.

    For every edge i -> j of the neighbor graph the edge network h maps
    x_i concatenated with (x_j - x_i) to an edge feature; node i's output is
    the max (or mean) over its edge features. ``widths`` lists the layer
    widths of h after the 2 * d_in input. The graph comes from ``source``:
    the fixed chain over consecutive points ("sequence") or k nearest
    neighbors among the input rows ("euclidean" on coordinates, "latent" on
    learned features; the computation is the same).
    """

    def __init__(self, d_in: int, widths, rng=None, source: str = "latent", k: int = 5,
                 pooling: str = "max", slope: float = 0.2, name: str = "ec"):
        if source not in NEIGHBOR_SOURCES:
            raise ValueError(f"unknown neighbor source {source!r}")
        widths = list(widths)
        if not widths or any(w < 1 for w in widths):
            raise ValueError(f"invalid edge network widths {widths}")
        self.d_in = d_in
        self.widths = widths
        self.source = source
        self.k = k
        self.first = EdgeLinear(d_in, widths[0], rng, name=f"{name}.h.0")
        self.act = LeakyReLU(slope)
        self.rest = MLP(widths, rng, name=f"{name}.h.r", slope=slope) if len(widths) > 1 else None
        self.pool = NeighborPool(pooling)
        self.table = None
        self._shape = None

    @property
    def d_out(self):
        return self.widths[-1]

    def parameters(self):
        return self.first.parameters() + (self.rest.parameters() if self.rest else [])

    def build_table(self, x) -> NeighborTable:
        b, n, _ = x.shape
        if self.source == "sequence":
            return batch_sequence_table(b, n)
        return batch_knn_table(x, min(self.k, n - 1))

    def forward(self, x, table: NeighborTable | None = None):
        if x.ndim != 3:
            raise ValueError(f"expected (B, n, d) input, got shape {x.shape}")
        b, n, d = x.shape
        self.table = table if table is not None else self.build_table(x)
        self._shape = x.shape
        h = self.act.forward(self.first.forward(x.reshape(b * n, d), self.table))
        if self.rest is not None:
            h = self.rest.forward(h)
        return self.pool.forward(h, self.table).reshape(b, n, -1)

    def backward(self, grad):
        b, n, d = self._shape
        g = self.pool.backward(grad.reshape(b * n, -1))
        if self.rest is not None:
            g = self.rest.backward(g)
        g = self.first.backward(self.act.backward(g))
        return g.reshape(b, n, d)

    def edge_features(self, x, table: NeighborTable):
        """Unpooled edge features (N, width, d_out), for inspection and tests."""
        b, n, d = x.shape
        h = self.act.forward(self.first.forward(x.reshape(b * n, d), table))
        return self.rest.forward(h) if self.rest is not None else h


def ec_forward(layer: EdgeConv, x, graph: FiberGraph) -> np.ndarray:
    """Edge convolution of one streamline's feature rows over ``graph``."""
    x = np.asarray(x, dtype=np.float64)
    if graph.n != x.shape[0]:
        raise ValueError(f"graph has {graph.n} nodes but input has {x.shape[0]} rows")
    return layer.forward(x[None], graph.neighbor_table())[0]


def sec_forward(layer: EdgeConv, points) -> np.ndarray:
    """Edge convolution over the chain graph of consecutive points."""
    x = np.asarray(points, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("sequence edge convolution needs at least 2 points")
    return layer.forward(x[None], batch_sequence_table(1, x.shape[0]))[0]


class GlobalEncoder(Module):
    """Per-point encoder over concatenated feature sets, then max over points."""

    def __init__(self, d_in: int, width: int = 1024, rng=None, slope: float = 0.2,
                 name: str = "enc"):
        self.lin = Linear(d_in, width, rng, name=f"{name}.0")
        self.act = LeakyReLU(slope)
        self.pool = MaxPoolRows()
        self._splits = None

    @property
    def width(self):
        return self.lin.d_out

    def parameters(self):
        return self.lin.parameters()

    def encode(self, *parts):
        """Pre-pool per-point codes, shape (B, n, width)."""
        rows = {p.shape[-2] for p in parts}
        if len(rows) != 1:
            raise ValueError(f"feature sets disagree on row count: {sorted(rows)}")
        self._splits = np.cumsum([p.shape[-1] for p in parts])[:-1]
        x = np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]
        return self.act.forward(self.lin.forward(x))

    def forward(self, *parts):
        return self.pool.forward(self.encode(*parts))

    def backward(self, grad):
        g = self.lin.backward(self.act.backward(self.pool.backward(grad)))
        return tuple(np.split(g, self._splits, axis=-1))

    @property
    def argmax(self):
        return self.pool.argmax


def global_descriptor(enc: GlobalEncoder, x1, x2) -> np.ndarray:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape[0] != x2.shape[0]:
        raise ValueError(f"row count mismatch: {x1.shape[0]} vs {x2.shape[0]}")
    return enc.forward(x1[None], x2[None])[0]


class ClassifierHead(Module):
    """Fully connected head: ReLU between layers, raw logits out."""

    def __init__(self, d_in: int, widths=(512, 256, 2), rng=None, name: str = "head"):
        self.mlp = MLP([d_in, *widths], rng, name=name, slope=0.0, final_activation=False)

    @property
    def n_classes(self):
        return self.mlp.widths[-1]

    def parameters(self):
        return self.mlp.parameters()

    def forward(self, z):
        if z.shape[-1] != self.mlp.widths[0]:
            raise ValueError(f"head expects width {self.mlp.widths[0]}, got {z.shape[-1]}")
        return self.mlp.forward(z)

    def backward(self, grad):
        return self.mlp.backward(grad)


def head_forward(head: ClassifierHead, z) -> np.ndarray:
    return head.forward(np.asarray(z, dtype=np.float64))
