"""Neighbor graphs over the points of one streamline.

Graphs are directed edge sets i -> j. Besides the per-streamline
:class:`FiberGraph` API there are batched builders returning a
:class:`~streamfilter.tensor.NeighborTable` over flattened (batch * n) nodes,
which is what the layers consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NeighborTable


@dataclass(frozen=True)
class FiberGraph:
    n: int
    edges: np.ndarray  # (E, 2) int64, rows are (source, target)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", e)
        if len(e):
            if e.min() < 0 or e.max() >= self.n:
                raise ValueError("edge index out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise ValueError("self-loops are not allowed")
            if len(np.unique(e, axis=0)) != len(e):
                raise ValueError("duplicate edges")

    def edge_set(self) -> set:
        return {(int(i), int(j)) for i, j in self.edges}

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n)

    def neighbor_table(self) -> NeighborTable:
        return NeighborTable.from_edges(self.n, self.edges)


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """Squared distances between rows along the last two axes.

    Differences are formed explicitly rather than through the Gram-matrix
    identity, so d(i, j) is bitwise equal to d(j, i) and does not depend on
    where the rows sit in the array.
    """
    diff = x[..., :, None, :] - x[..., None, :, :]
    return np.einsum("...ijd,...ijd->...ij", diff, diff)


def knn_index(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest other rows, shape (..., n, k).

    Ties are broken by the smaller row index.
    """
    n = x.shape[-2]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k >= n:
        raise ValueError(f"k={k} needs more than {n} points (self is excluded)")
    d = pairwise_sq_dists(x)
    diag = np.arange(n)
    d[..., diag, diag] = np.inf
    order = np.argsort(d, axis=-1, kind="stable")
    return order[..., :k]


def _check_features(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"features must be a non-empty 2-D matrix, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    return x


def euclidean_knn(features, k: int) -> FiberGraph:
    x = _check_features(features)
    idx = knn_index(x, k)
    n = x.shape[0]
    src = np.repeat(np.arange(n), k)
    return FiberGraph(n, np.stack([src, idx.ravel()], axis=1))


# The dynamic graph is the same routine applied to learned feature rows.
latent_knn = euclidean_knn


def sequence_graph(n: int) -> FiberGraph:
    """Bidirectional chain: i -> i + 1 and i -> i - 1 wherever valid."""
    if n < 2:
        raise ValueError(f"sequence graph needs n >= 2, got {n}")
    fwd = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    bwd = fwd[:, ::-1]
    edges = np.empty((2 * (n - 1), 2), dtype=np.int64)
    edges[0::2] = fwd
    edges[1::2] = bwd
    return FiberGraph(n, edges)


def batch_knn_table(x: np.ndarray, k: int) -> NeighborTable:
    """k-nn table over a (B, n, d) batch, nodes flattened as b * n + i."""
    b, n, _ = x.shape
    idx = knn_index(x, k) + (np.arange(b) * n)[:, None, None]
    return NeighborTable(idx.reshape(b * n, k))


def batch_sequence_table(b: int, n: int) -> NeighborTable:
    """Chain-graph table for B streamlines of n points each.

    Terminal points have out-degree 1; their spare slot repeats the single
    neighbor.
    """
    if n < 2:
        raise ValueError(f"sequence graph needs n >= 2, got {n}")
    i = np.arange(n)
    prev = np.where(i > 0, i - 1, 1)
    nxt = np.where(i < n - 1, i + 1, n - 2)
    local = np.stack([prev, nxt], axis=1)
    # first slot always holds a real neighbor: node 0 -> 1, node n-1 -> n-2
    degree = np.where((i == 0) | (i == n - 1), 1, 2)
    if n == 2:
        degree = np.ones(2, dtype=np.int64)
    offsets = (np.arange(b) * n)[:, None, None]
    index = (local[None] + offsets).reshape(b * n, 2)
    return NeighborTable(index, np.tile(degree, b))
