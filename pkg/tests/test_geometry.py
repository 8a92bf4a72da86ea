import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamfilter.geometry import (
    Tractogram,
    arc_length,
    as_streamline,
    flip,
    mean_curvature,
    menger_curvatures,
    resample,
    total_turning_angle,
)
from streamfilter.rng import Rng

from conftest import random_rotation, random_streamline


def circumradius(a, b, c):
    """Radius of the circle through three points, by solving for its center."""
    # center o in the plane of a, b, c with |o-a| = |o-b| = |o-c|
    ab, ac = b - a, c - a
    n = np.cross(ab, ac)
    m = np.array([ab, ac, n])
    rhs = np.array([ab @ (a + b) / 2, ac @ (a + c) / 2, n @ a])
    o = np.linalg.solve(m, rhs)
    return np.linalg.norm(o - a)


def test_arc_length_unit_segment():
    assert arc_length([[0, 0, 0], [1, 0, 0]]) == 1.0


def test_arc_length_collinear():
    assert arc_length([[0, 0, 0], [2, 0, 0], [4, 0, 0]]) == 4.0


def test_arc_length_open_16gon():
    r = 10.0
    th = 2 * np.pi * np.arange(16) / 16
    pts = np.stack([r * np.cos(th), r * np.sin(th), np.zeros(16)], axis=1)
    assert arc_length(pts) == pytest.approx(15 * 2 * r * math.sin(math.pi / 16), rel=1e-12)


def test_resample_identity_when_uniform():
    s = np.stack([np.arange(6.0), np.zeros(6), np.zeros(6)], axis=1)
    np.testing.assert_allclose(resample(s, 6), s, atol=1e-9)


def test_resample_midpoint():
    out = resample([[0, 0, 0], [2, 4, 6]], 3)
    np.testing.assert_allclose(out[1], [1, 2, 3])


def test_resample_uneven_middle_point():
    s = np.array([[0, 0, 0], [1, 0, 0], [1, 5, 0], [3, 5, 0], [3, 5, 0.5]], dtype=float)
    half = arc_length(s) / 2
    # walk the polyline by hand
    acc = 0.0
    for a, b in zip(s[:-1], s[1:]):
        seg = np.linalg.norm(b - a)
        if acc + seg >= half:
            expect = a + (half - acc) / seg * (b - a)
            break
        acc += seg
    np.testing.assert_allclose(resample(s, 3)[1], expect, atol=1e-12)


def test_resample_endpoints_exact_and_rejects_small_m():
    s = random_streamline(Rng(3), 11)
    out = resample(s, 16)
    assert np.array_equal(out[0], s[0]) and np.array_equal(out[-1], s[-1])
    with pytest.raises(ValueError):
        resample(s, 1)


def test_resample_preserves_length_on_smooth_curve():
    t = np.linspace(0, np.pi, 200)
    s = np.stack([40 * np.cos(t), 40 * np.sin(t), 5 * t], axis=1)
    for m in (16, 32):
        assert arc_length(resample(s, m)) == pytest.approx(arc_length(s), rel=0.01)


def test_curvature_collinear_zero():
    s = np.stack([np.arange(5.0), 2 * np.arange(5.0), np.zeros(5)], axis=1)
    assert mean_curvature(s) == 0.0


def test_curvature_circle():
    th = np.linspace(0, 1.5 * np.pi, 23)
    s = np.stack([20 * np.cos(th), 20 * np.sin(th), np.zeros_like(th)], axis=1)
    assert abs(mean_curvature(s) - 0.05) < 1e-9


def test_curvature_corner_matches_circumcircle():
    s = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [2, 1, 0], [2, 2, 0]], dtype=float)
    k = menger_curvatures(s)
    expect = [0.0, 1 / circumradius(s[1], s[2], s[3]), 0.0]
    np.testing.assert_allclose(k, expect, atol=1e-12)
    assert mean_curvature(s) == pytest.approx(sum(expect) / 3, rel=1e-12)


def test_curvature_random_triples_match_circumcircle():
    rng = Rng(5)
    for _ in range(50):
        a, b, c = rng.normal(0, 10, size=(3, 3))
        assert menger_curvatures(np.array([a, b, c]))[0] == pytest.approx(
            1 / circumradius(a, b, c), rel=1e-8)


def test_curvature_short_is_zero():
    assert mean_curvature([[0, 0, 0], [1, 1, 1]]) == 0.0


def test_flip_examples():
    s = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0]], dtype=float)
    np.testing.assert_array_equal(flip(s), s[::-1])
    pal = np.array([[0, 0, 0], [1, 1, 0], [0, 0, 0.5], [1, 1, 0], [0, 0, 0]], dtype=float)
    np.testing.assert_array_equal(flip(pal), pal)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(3, 40))
def test_flip_invariants_exact(seed, n):
    s = random_streamline(Rng(seed), n)
    assert np.array_equal(flip(flip(s)), s)
    assert arc_length(flip(s)) == arc_length(s)
    assert mean_curvature(flip(s)) == mean_curvature(s)
    assert total_turning_angle(flip(s)) == total_turning_angle(s)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_rigid_invariance(seed):
    rng = Rng(seed)
    s = random_streamline(rng, 20)
    moved = s @ random_rotation(rng).T + rng.uniform(-50, 50, size=3)
    assert arc_length(moved) == pytest.approx(arc_length(s), rel=1e-6)
    assert mean_curvature(moved) == pytest.approx(mean_curvature(s), rel=1e-6)


def test_turning_angle_examples():
    assert total_turning_angle([[0, 0, 0], [1, 0, 0], [2, 0, 0], [5, 0, 0]]) == 0.0
    th = np.linspace(0, 2 * np.pi, 65)
    circle = np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], axis=1)
    # 63 interior turns of 2*pi/64 each
    assert total_turning_angle(circle) == pytest.approx(63 * 2 * np.pi / 64, rel=1e-12)
    square = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0.5, 0]], dtype=float)
    assert total_turning_angle(square) == pytest.approx(3 * np.pi / 2, rel=1e-12)
    assert total_turning_angle([[0, 0, 0], [1, 0, 0]]) == 0.0


def test_streamline_validation():
    with pytest.raises(ValueError):
        as_streamline([[0, 0, 0]])
    with pytest.raises(ValueError):
        as_streamline([[0, 0, 0], [0, 0, 0]])
    with pytest.raises(ValueError):
        as_streamline([[0, 0, 0], [np.nan, 0, 0]])


def test_tractogram_count_checks():
    s = [np.zeros((2, 3)) + [[0, 0, 0], [1, 0, 0]]] * 3
    with pytest.raises(ValueError):
        Tractogram(s, labels=[1, 0])
    with pytest.raises(ValueError):
        Tractogram(s, class_ids=[1, 2])
    t = Tractogram(s, labels=[1, 0, 1], class_ids=[3, 0, 2])
    sub = t.subset([2, 0])
    assert list(sub.labels) == [1, 1] and list(sub.class_ids) == [2, 3]
    assert len(Tractogram.concat([t, sub])) == 5
