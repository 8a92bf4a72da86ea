"""Dense numerics with hand-written reverse-mode gradients.

Every block caches what it needs in ``forward`` and consumes it in
``backward``; gradients accumulate into :class:`Param` buffers until the
optimizer clears them. Arrays may carry any number of leading batch axes,
the feature axis is always last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .rng import Rng


class Param:
    """A named parameter block with gradient and Adam moment buffers."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        value = np.asarray(value)
        dtype = value.dtype if value.dtype in (np.float32, np.float64) else np.float64
        self.value = np.ascontiguousarray(value, dtype=dtype)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def glorot_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    def parameters(self) -> list[Param]:
        return []

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """y = x W + b over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: Rng | None = None, name: str = "linear"):
        if d_in < 1 or d_out < 1:
            raise ValueError(f"invalid linear shape {d_in}x{d_out}")
        w = glorot_uniform(rng, d_in, d_out) if rng is not None else np.zeros((d_in, d_out))
        self.W = Param(f"{name}.W", w)
        self.b = Param(f"{name}.b", np.zeros(d_out))
        self._x = None

    @property
    def d_in(self):
        return self.W.shape[0]

    @property
    def d_out(self):
        return self.W.shape[1]

    def parameters(self):
        return [self.W, self.b]

    def forward(self, x, W=None, b=None):
        W = self.W.value if W is None else W
        b = self.b.value if b is None else b
        if x.shape[-1] != W.shape[0]:
            raise ValueError(f"linear input width {x.shape[-1]} != {W.shape[0]}")
        self._x = x
        return x @ W + b

    def backward(self, grad_out):
        x2 = self._x.reshape(-1, self.d_in)
        g2 = grad_out.reshape(-1, self.d_out)
        self.W.grad += x2.T @ g2
        self.b.grad += g2.sum(axis=0)
        return grad_out @ self.W.value.T


def linear(x, W, b):
    """Functional form of :class:`Linear` without gradient bookkeeping."""
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear input width {x.shape[-1]} != {W.shape[0]}")
    return x @ W + b


@njit(cache=True)
def _leaky_fwd(x, slope, out, mask):
    for i in range(x.size):
        v = x[i]
        m = v > 0
        mask[i] = m
        out[i] = v if m else slope * v


@njit(cache=True)
def _leaky_bwd(g, slope, mask, out):
    for i in range(g.size):
        out[i] = g[i] if mask[i] else slope * g[i]


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.2):
        if not 0.0 <= slope < 1.0:
            raise ValueError(f"slope must lie in [0, 1), got {slope}")
        self.slope = slope
        self._mask = None

    def forward(self, x):
        # one fused pass; for slope < 1 this selection equals max(x, slope * x)
        x = np.ascontiguousarray(x)
        out = np.empty_like(x)
        self._mask = np.empty(x.shape, dtype=np.bool_)
        _leaky_fwd(x.reshape(-1), x.dtype.type(self.slope), out.reshape(-1),
                   self._mask.reshape(-1))
        return out

    def backward(self, grad_out):
        g = np.ascontiguousarray(grad_out)
        out = np.empty_like(g)
        _leaky_bwd(g.reshape(-1), g.dtype.type(self.slope), self._mask.reshape(-1),
                   out.reshape(-1))
        return out


def leaky_relu(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


class MLP(Module):
    """Stacked Linear + activation; ``final_activation`` controls the last layer."""

    def __init__(self, widths, rng: Rng | None, name: str, slope: float = 0.2,
                 final_activation: bool = True):
        widths = list(widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"invalid MLP widths {widths}")
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.layers.append(Linear(a, b, rng, name=f"{name}.{i}"))
            if i < len(widths) - 2 or final_activation:
                self.layers.append(LeakyReLU(slope))

    @property
    def widths(self):
        lins = [l for l in self.layers if isinstance(l, Linear)]
        return [lins[0].d_in] + [l.d_out for l in lins]

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class MaxPoolRows(Module):
    """Column-wise max over the row axis (axis -2).

    Ties resolve to the smallest row index, which also receives the gradient.
    """

    def __init__(self):
        self.argmax = None
        self._shape = None

    def forward(self, x):
        if x.shape[-2] < 1:
            raise ValueError("max pool over zero rows")
        self._shape = x.shape
        self.argmax = np.argmax(x, axis=-2)
        return np.take_along_axis(x, self.argmax[..., None, :], axis=-2)[..., 0, :]

    def backward(self, grad_out):
        grad = np.zeros(self._shape, dtype=grad_out.dtype)
        np.put_along_axis(grad, self.argmax[..., None, :], grad_out[..., None, :], axis=-2)
        return grad


def max_pool_rows(x):
    """Return (per-column max, winning row index per column)."""
    pool = MaxPoolRows()
    return pool.forward(np.asarray(x)), pool.argmax


class NeighborTable:
    """Fixed-width neighbor lists over flattened nodes.

    ``index[i, s]`` is the s-th neighbor of node i. Nodes with fewer than
    ``width`` neighbors repeat their first neighbor in the spare slots and
    carry zero weight there, which leaves max pooling exact and lets mean
    pooling divide by the true out-degree.
    """

    def __init__(self, index: np.ndarray, degree: np.ndarray | None = None):
        self.index = np.asarray(index, dtype=np.int64)
        n, width = self.index.shape
        if degree is None:
            degree = np.full(n, width, dtype=np.int64)
        self.degree = np.asarray(degree, dtype=np.int64)
        if np.any(self.degree < 1):
            bad = int(np.flatnonzero(self.degree < 1)[0])
            raise ValueError(f"node {bad} has out-degree 0")
        self.valid = np.arange(width)[None, :] < self.degree[:, None]
        self._scatter = None

    @property
    def n(self):
        return self.index.shape[0]

    @property
    def width(self):
        return self.index.shape[1]

    @classmethod
    def from_edges(cls, n: int, edges) -> "NeighborTable":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        degree = np.bincount(edges[:, 0], minlength=n)
        if np.any(degree == 0):
            bad = int(np.flatnonzero(degree == 0)[0])
            raise ValueError(f"node {bad} has out-degree 0")
        width = int(degree.max())
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        edges = edges[order]
        starts = np.concatenate([[0], np.cumsum(degree)[:-1]])
        slot = np.arange(len(edges)) - starts[edges[:, 0]]
        index = np.repeat(edges[starts, 1][:, None], width, axis=1)
        index[edges[:, 0], slot] = edges[:, 1]
        return cls(index, degree)

    def scatter_matrix(self):
        """Sparse (n, n * width) matrix summing slot values into their neighbor rows."""
        if self._scatter is None:
            from scipy.sparse import csr_matrix

            flat = self.index.ravel()
            cols = np.arange(flat.size)
            self._scatter = csr_matrix((np.ones(flat.size), (flat, cols)),
                                       shape=(self.n, flat.size))
        return self._scatter


class NeighborPool(Module):
    """Pool per-edge features (n, width, d) into per-node rows (n, d)."""

    def __init__(self, mode: str = "max"):
        if mode not in ("max", "mean"):
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.mode = mode
        self._cache = None

    def forward(self, edge_feats, table: NeighborTable):
        if edge_feats.shape[0] != table.n:
            raise ValueError(f"{edge_feats.shape[0]} nodes but graph has {table.n}")
        if self.mode == "max":
            # spare slots duplicate a real neighbor, so they never change the max
            arg = np.argmax(edge_feats, axis=1)
            self._cache = (edge_feats.shape, arg)
            return np.take_along_axis(edge_feats, arg[:, None, :], axis=1)[:, 0, :]
        w = table.valid / table.degree[:, None]
        self._cache = (edge_feats.shape, w)
        return np.einsum("nk,nkd->nd", w.astype(edge_feats.dtype), edge_feats)

    def backward(self, grad_out):
        shape, aux = self._cache
        if self.mode == "max":
            grad = np.zeros(shape, dtype=grad_out.dtype)
            np.put_along_axis(grad, aux[:, None, :], grad_out[:, None, :], axis=1)
            return grad
        return aux[:, :, None] * grad_out[:, None, :]


def pool_neighbors(x, table: NeighborTable, mode: str):
    """Pool rows of ``x`` over each node's neighbors (features are x[j])."""
    return NeighborPool(mode).forward(np.asarray(x)[table.index], table)


def mean_pool_neighbors(x, table: NeighborTable):
    return pool_neighbors(x, table, "mean")


def max_pool_neighbors(x, table: NeighborTable):
    return pool_neighbors(x, table, "max")


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels >= c)):
        raise ValueError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


class Adam:
    """Adam with bias correction; clears gradients after each step."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        adam_step(self.params, lr, self.beta1, self.beta2, self.eps, self.t)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def adam_step(params, lr, beta1=0.9, beta2=0.99, eps=1e-8, t=1):
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        p.value -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        p.zero_grad()


def lr_schedule(epoch: int, base: float = 1e-3, factor: float = 0.7,
                every: int = 90, floor: float = 5e-5) -> float:
    """Step decay: base * factor**(epoch // every), never below ``floor``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return max(floor, base * factor ** (epoch // every))


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int
    worst: tuple = field(default=())

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_error < tol


def gradient_check(fun, x, analytic, h: float = 1e-5, indices=None,
                   signature=None, floor: float = 1e-6) -> GradCheckReport:
    """Compare ``analytic`` with central differences of scalar ``fun`` at ``x``.

    ``x`` is perturbed in place and restored. Relative error per coordinate is
    |a - n| / max(|a|, |n|, floor). When ``signature`` is given, coordinates
    whose perturbation changes it (an argmax switch, an activation crossing
    its kink, a neighbor swap) are skipped, since the function is not smooth
    there.
    """
    flat = x.reshape(-1)
    agrad = np.asarray(analytic).reshape(-1)
    if indices is None:
        indices = range(flat.size)
    base_sig = signature() if signature is not None else None
    worst_err, worst = 0.0, ()
    checked = skipped = 0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = fun()
        sig_p = signature() if signature is not None else None
        flat[i] = orig - h
        fm = fun()
        sig_m = signature() if signature is not None else None
        flat[i] = orig
        if signature is not None and (sig_p != base_sig or sig_m != base_sig):
            skipped += 1
            continue
        num = (fp - fm) / (2 * h)
        a = agrad[i]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        checked += 1
        if err > worst_err:
            worst_err, worst = err, (int(i), float(a), float(num))
    return GradCheckReport(worst_err, checked, skipped, worst)
