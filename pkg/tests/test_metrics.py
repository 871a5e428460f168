import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cylocc.head import OccGrid
from cylocc.metrics import confusion, geometric_iou, iou, iou_from_counts, metrics_json, miou

from oracles import brute_confusion


def grid(labels, k=4):
    return OccGrid(np.asarray(labels), k)


def test_hand_count_example():
    s = confusion(grid([[[1]], [[1]]], 2), grid([[[1]], [[2]]], 2))
    assert (s.tp[1], s.fp[1], s.fn[1]) == (1, 1, 0)
    assert (s.tp[2], s.fp[2], s.fn[2]) == (0, 0, 1)
    assert iou(s, 1) == 0.5
    assert iou(s, 2) == 0.0


def test_iou_arithmetic_and_mean():
    assert iou_from_counts(3, 1, 2) == 0.5
    assert iou_from_counts(0, 0, 0) == 0.0
    s = confusion(grid([[[1, 2, 0, 0]]], 3), grid([[[1, 1, 2, 2]]], 3))
    vals = [iou(s, c) for c in (1, 2, 3)]
    assert miou(s) == pytest.approx(np.mean(vals))


def test_perfect_prediction():
    g = grid(np.random.default_rng(0).integers(0, 3, (4, 4, 2)))
    s = confusion(g, g)
    assert not s.fp.any() and not s.fn.any()
    assert geometric_iou(s) == 1.0
    assert miou(s, present_only=True) == 1.0


def test_empty_scene_geometric_zero():
    z = grid(np.zeros((2, 2, 2)))
    assert geometric_iou(confusion(z, z)) == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        confusion(grid(np.zeros((2, 2, 2))), grid(np.zeros((2, 2, 3))))


@pytest.mark.parametrize("seed", range(20))
def test_vs_triple_loop(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.integers(0, 5, (10, 10, 4)), rng.integers(0, 5, (10, 10, 4))
    s = confusion(grid(p), grid(g))
    tp, fp, fn, geo = brute_confusion(p, g, 4)
    np.testing.assert_array_equal(s.tp, tp)
    np.testing.assert_array_equal(s.fp, fp)
    np.testing.assert_array_equal(s.fn, fn)
    assert [s.geo_tp, s.geo_fp, s.geo_fn] == geo
    np.testing.assert_array_equal(s.tp + s.fn, np.bincount(g.ravel(), minlength=5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_bounds_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.integers(0, 5, (4, 3, 2)), rng.integers(0, 5, (4, 3, 2))
    s = confusion(grid(p), grid(g))
    vals = [iou(s, c) for c in range(1, 5)]
    assert all(0 <= v <= 1 for v in vals)
    assert miou(s) <= max(vals) + 1e-15
    perm = rng.permutation(p.size)
    s2 = confusion(grid(p.ravel()[perm].reshape(p.shape)), grid(g.ravel()[perm].reshape(g.shape)))
    np.testing.assert_array_equal(s.tp, s2.tp)
    assert geometric_iou(s) == geometric_iou(s2)


def test_report_json_shape():
    g = grid(np.random.default_rng(0).integers(0, 5, (4, 4, 2)))
    rep = json.loads(metrics_json(confusion(g, g), ["ground", "vehicle", "pole", "building"]))
    assert set(rep) >= {"iou_geometric", "miou", "per_class"}
    assert set(rep["per_class"]) == {"ground", "vehicle", "pole", "building"}
