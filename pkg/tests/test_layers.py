import numpy as np
import pytest

from streamfilter.graph import FiberGraph, euclidean_knn, sequence_graph
from streamfilter.layers import (
    ClassifierHead,
    EdgeConv,
    EdgeLinear,
    GlobalEncoder,
    ec_forward,
    global_descriptor,
    head_forward,
    sec_forward,
)
from streamfilter.rng import Rng
from streamfilter.tensor import LeakyReLU, NeighborTable, gradient_check, leaky_relu


def naive_ec(layer, x, edges, n):
    """Per-edge evaluation of the edge network, then per-node max/mean."""
    lins = [layer.first] + ([] if layer.rest is None else
                            [l for l in layer.rest.layers if not isinstance(l, LeakyReLU)])
    slope = layer.act.slope
    out = []
    for i in range(n):
        feats = []
        for s, j in edges:
            if s != i:
                continue
            h = np.concatenate([x[i], x[j] - x[i]])
            for L in lins:
                h = leaky_relu(h @ L.W.value + L.b.value, slope)
            feats.append(h)
        feats = np.array(feats)
        out.append(feats.max(axis=0) if layer.pool.mode == "max" else feats.mean(axis=0))
    return np.array(out)


def test_edge_linear_matches_concatenation():
    rng = Rng(1)
    el = EdgeLinear(4, 6, rng, "e")
    el.b.value[:] = rng.normal(size=6)
    x = rng.normal(size=(7, 4))
    table = euclidean_knn(x, 3).neighbor_table()
    y = el.forward(x, table)
    naive = np.array([[np.concatenate([x[i], x[j] - x[i]]) @ el.W.value + el.b.value
                       for j in table.index[i]] for i in range(7)])
    np.testing.assert_allclose(y, naive, rtol=1e-12, atol=1e-12)
    w = rng.normal(size=y.shape)
    f = lambda: float(np.sum(el.forward(x, table) * w))
    f()
    gx = el.backward(w)
    assert gradient_check(f, x, gx).max_rel_error < 1e-6
    assert gradient_check(f, el.W.value, el.W.grad.copy()).max_rel_error < 1e-6
    assert gradient_check(f, el.b.value, el.b.grad.copy()).max_rel_error < 1e-6


def test_ec_zero_weights_give_zero():
    layer = EdgeConv(3, [4, 5], None, "latent", k=2)
    x = Rng(2).normal(size=(6, 3))
    assert np.all(ec_forward(layer, x, euclidean_knn(x, 2)) == 0)


def test_ec_identical_points_give_identical_rows():
    layer = EdgeConv(3, [8, 8], Rng(3), "latent", k=2)
    x = np.tile([[1.0, 2.0, 3.0]], (5, 1))
    y = ec_forward(layer, x, euclidean_knn(x, 2))
    assert np.all(y == y[0])


def test_ec_hand_computed_three_points():
    layer = EdgeConv(1, [1], None, "latent", k=1)
    # h(a, d) = leaky(2a + 3d + 1)
    layer.first.W.value[:] = [[2.0], [3.0]]
    layer.first.b.value[:] = [1.0]
    x = np.array([[0.0], [1.0], [-2.0]])
    g = FiberGraph(3, [[0, 1], [0, 2], [1, 0], [2, 0], [2, 1]])
    y = ec_forward(layer, x, g)
    lr = lambda v: v if v > 0 else 0.2 * v
    e01 = lr(2 * 0 + 3 * 1 + 1)      # 4
    e02 = lr(2 * 0 + 3 * -2 + 1)     # -1
    e10 = lr(2 * 1 + 3 * -1 + 1)     # 0
    e20 = lr(2 * -2 + 3 * 2 + 1)     # 3
    e21 = lr(2 * -2 + 3 * 3 + 1)     # 6
    np.testing.assert_allclose(y[:, 0], [max(e01, e02), e10, max(e20, e21)])


@pytest.mark.parametrize("pooling", ["max", "mean"])
def test_ec_matches_per_edge_oracle(pooling):
    rng = Rng(4)
    layer = EdgeConv(5, [7, 6], rng, "latent", k=3, pooling=pooling)
    x = rng.normal(size=(9, 5))
    g = euclidean_knn(x, 3)
    np.testing.assert_allclose(ec_forward(layer, x, g), naive_ec(layer, x, g.edge_set(), 9),
                               rtol=1e-12, atol=1e-12)
    s = sequence_graph(9)
    np.testing.assert_allclose(ec_forward(layer, x, s), naive_ec(layer, x, s.edge_set(), 9),
                               rtol=1e-12, atol=1e-12)


def test_sec_two_points_single_edge():
    layer = EdgeConv(3, [4], Rng(5), "sequence")
    x = Rng(6).normal(size=(2, 3))
    y = sec_forward(layer, x)
    np.testing.assert_allclose(y, naive_ec(layer, x, {(0, 1), (1, 0)}, 2), rtol=1e-12)


def test_sec_matches_explicit_chain_graph():
    layer = EdgeConv(3, [64, 64], Rng(7), "sequence")
    x = Rng(8).normal(size=(16, 3))
    np.testing.assert_array_equal(sec_forward(layer, x), ec_forward(layer, x, sequence_graph(16)))


@pytest.mark.parametrize("pooling", ["max", "mean"])
def test_sec_flip_equivariance(pooling):
    layer = EdgeConv(3, [32, 16], Rng(9), "sequence", pooling=pooling)
    for seed in range(10):
        x = Rng(seed).normal(size=(16, 3))
        a = sec_forward(layer, x)
        b = sec_forward(layer, x[::-1].copy())
        if pooling == "max":
            np.testing.assert_array_equal(b, a[::-1])
        else:
            assert np.max(np.abs(b - a[::-1])) <= 1e-12


def test_ec_permutation_equivariance():
    layer = EdgeConv(4, [16, 8], Rng(10), "latent", k=4)
    x = Rng(11).normal(size=(12, 4))
    perm = Rng(12).permutation(12)
    y = layer.forward(x[None])[0]
    yp = layer.forward(x[perm][None])[0]
    np.testing.assert_allclose(yp, y[perm], rtol=1e-13, atol=1e-13)


def test_ec_k_is_capped_for_short_inputs():
    layer = EdgeConv(3, [4], Rng(13), "euclidean", k=5)
    y = layer.forward(Rng(14).normal(size=(1, 3, 3)))
    assert y.shape == (1, 3, 4) and layer.table.width == 2


@pytest.mark.parametrize("source", ["sequence", "latent"])
@pytest.mark.parametrize("pooling", ["max", "mean"])
def test_ec_full_gradient(source, pooling):
    rng = Rng(15)
    layer = EdgeConv(3, [6, 5], rng, source, k=3, pooling=pooling)
    for p in layer.parameters():
        if p.name.endswith(".b"):
            p.value[:] = rng.normal(0, 0.1, size=p.shape)
    x = rng.normal(size=(2, 8, 3))
    w = rng.normal(size=(2, 8, 5))
    f = lambda: float(np.sum(layer.forward(x) * w))

    def sig():
        parts = [layer.table.index.tobytes(), layer.act._mask.tobytes()]
        parts += [l._mask.tobytes() for l in layer.rest.layers if isinstance(l, LeakyReLU)]
        if pooling == "max":
            parts.append(layer.pool._cache[1].tobytes())
        return b"".join(parts)

    f()
    gx = layer.backward(w)
    rep = gradient_check(f, x, gx, signature=sig)
    assert rep.checked > 30 and rep.max_rel_error < 1e-4
    for p in layer.parameters():
        p.zero_grad()
    f()
    layer.backward(w)
    for p in layer.parameters():
        rep = gradient_check(f, p.value, p.grad.copy(), signature=sig)
        assert rep.max_rel_error < 1e-4, p.name


def test_global_descriptor():
    rng = Rng(16)
    enc = GlobalEncoder(5, 32, rng)
    x1, x2 = rng.normal(size=(1, 2)), rng.normal(size=(1, 3))
    z = global_descriptor(enc, x1, x2)
    np.testing.assert_allclose(z, leaky_relu(np.concatenate([x1, x2], 1) @ enc.lin.W.value
                                             + enc.lin.b.value)[0])
    x1, x2 = rng.normal(size=(10, 2)), rng.normal(size=(10, 3))
    z = global_descriptor(enc, x1, x2)
    rows = [leaky_relu(np.concatenate([a, b]) @ enc.lin.W.value + enc.lin.b.value)
            for a, b in zip(x1, x2)]
    np.testing.assert_allclose(z, np.max(rows, axis=0), rtol=1e-13)
    perm = rng.permutation(10)
    np.testing.assert_array_equal(global_descriptor(enc, x1[perm], x2[perm]), z)
    with pytest.raises(ValueError):
        global_descriptor(enc, x1, x2[:9])


def test_global_encoder_gradient():
    rng = Rng(17)
    enc = GlobalEncoder(5, 16, rng)
    x1, x2 = rng.normal(size=(2, 6, 2)), rng.normal(size=(2, 6, 3))
    w = rng.normal(size=(2, 16))
    f = lambda: float(np.sum(enc.forward(x1, x2) * w))
    sig = lambda: enc.argmax.tobytes() + enc.act._mask.tobytes()
    f()
    g1, g2 = enc.backward(w)
    assert gradient_check(f, x1, g1, signature=sig).max_rel_error < 1e-6
    assert gradient_check(f, x2, g2, signature=sig).max_rel_error < 1e-6


def test_head_examples():
    head = ClassifierHead(8, (4, 3, 2), None)
    head.mlp.layers[-1].b.value[:] = [0.3, -0.7]
    np.testing.assert_array_equal(head_forward(head, np.ones(8)), [0.3, -0.7])
    head = ClassifierHead(4, (3, 2), Rng(18))
    # make the two output columns identical; symmetric input -> equal logits
    last = head.mlp.layers[-1]
    last.W.value[:, 1] = last.W.value[:, 0]
    z = head_forward(head, np.ones(4))
    assert z[0] == z[1]
    with pytest.raises(ValueError):
        head_forward(head, np.ones(5))


def test_head_matches_layer_by_layer():
    rng = Rng(19)
    head = ClassifierHead(6, (5, 4, 2), rng)
    z = rng.normal(size=6)
    lins = [l for l in head.mlp.layers if not isinstance(l, LeakyReLU)]
    h = z
    for i, L in enumerate(lins):
        h = h @ L.W.value + L.b.value
        if i < len(lins) - 1:
            h = np.maximum(h, 0.0)
    np.testing.assert_allclose(head_forward(head, z), h, rtol=1e-14)
