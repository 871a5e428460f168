import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import cylocc.autodiff as ad
from cylocc.autodiff import Tensor, gradcheck
from cylocc.camera import DepthTargets
from cylocc.losses import (
    EmptyDepthMaskWarning,
    LossReport,
    assemble_total,
    depth_bce,
    downsample_labels,
    focal_loss,
    label_pyramid,
    lovasz_softmax,
    scal_loss,
    total_loss,
)

from oracles import lovasz_reference, set_jaccard

SEEDS = range(5)


def softmax_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- focal


def test_focal_gamma0_is_cross_entropy():
    rng = np.random.default_rng(0)
    logits, labels = rng.normal(size=(6, 4)), rng.integers(0, 4, 6)
    ce = -np.mean(np.log(softmax_np(logits)[np.arange(6), labels]))
    assert abs(focal_loss(Tensor(logits), labels, gamma=0).item() - ce) < 1e-12


def test_focal_direct_formula():
    rng = np.random.default_rng(1)
    logits, labels = rng.normal(size=(6, 3)), rng.integers(0, 3, 6)
    pt = softmax_np(logits)[np.arange(6), labels]
    ref = np.mean(-((1 - pt) ** 2) * np.log(pt))
    assert abs(focal_loss(Tensor(logits), labels).item() - ref) < 1e-12


def test_focal_perfect_prediction():
    logits = np.full((3, 3), -30.0)
    logits[np.arange(3), [0, 1, 2]] = 30.0
    assert focal_loss(Tensor(logits), np.array([0, 1, 2])).item() < 1e-20


def test_focal_label_range_error():
    with pytest.raises(ValueError, match="labels"):
        focal_loss(Tensor(np.zeros((2, 3))), np.array([0, 3]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_focal_below_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    logits, labels = rng.normal(size=(5, 3)) * 4, rng.integers(0, 3, 5)
    assert focal_loss(Tensor(logits), labels).item() <= focal_loss(Tensor(logits), labels, gamma=0).item() + 1e-15


# ---------------------------------------------------------------- lovasz


def test_lovasz_zero_at_truth():
    labels = np.array([0, 1, 2, 1])
    assert lovasz_softmax(Tensor(np.eye(3)[labels]), labels).item() == 0.0


def test_lovasz_binary_one_wrong():
    labels = np.array([1, 1, 1, 0])
    pred = np.array([1, 1, 0, 0])
    probs = np.eye(2)[pred]
    got = lovasz_softmax(probs=Tensor(probs), labels=labels).item()
    per = []
    for c in (0, 1):
        per.append(1 - set_jaccard(set(np.nonzero(pred == c)[0]), set(np.nonzero(labels == c)[0])))
    assert abs(got - np.mean(per)) < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_lovasz_vertices_vs_set_oracle(seed):
    rng = np.random.default_rng(seed)
    labels, pred = rng.integers(0, 4, 12), rng.integers(0, 4, 12)
    got = lovasz_softmax(Tensor(np.eye(4)[pred]), labels).item()
    present = np.unique(labels)
    ref = np.mean([1 - set_jaccard(set(np.nonzero(pred == c)[0]), set(np.nonzero(labels == c)[0])) for c in present])
    assert abs(got - ref) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_lovasz_soft_vs_reference(seed):
    rng = np.random.default_rng(seed)
    probs = softmax_np(rng.normal(size=(9, 3)) * 2)
    labels = rng.integers(0, 3, 9)
    assert abs(lovasz_softmax(Tensor(probs), labels).item() - lovasz_reference(probs, labels)) < 1e-9


# ---------------------------------------------------------------- scal


def test_scal_perfect_is_zero():
    labels = np.array([0, 1, 2, 1, 0])
    probs = Tensor(np.eye(3)[labels])
    assert abs(scal_loss(probs, labels, "sem").item()) < 1e-12
    assert abs(scal_loss(probs, labels, "geo").item()) < 1e-12


def test_scal_uniform_two_classes_closed_form():
    labels = np.array([0, 0, 1, 1])
    probs = Tensor(np.full((4, 2), 0.5))
    # per class: P = 1/2, R = 1/2, S = 1/2
    assert abs(scal_loss(probs, labels, "sem").item() - np.log(2)) < 1e-12
    # occupied prob 0.5 everywhere: same three ratios
    assert abs(scal_loss(probs, labels, "geo").item() - np.log(2)) < 1e-12


def test_scal_mode_error_and_empty_geo():
    with pytest.raises(ValueError, match="mode"):
        scal_loss(Tensor(np.full((2, 2), 0.5)), np.array([0, 1]), "bad")
    assert scal_loss(Tensor(np.full((2, 2), 0.5)), np.array([0, 0]), "geo").item() == 0.0


# ---------------------------------------------------------------- depth bce


def test_depth_bce_closed_forms():
    t = np.zeros((1, 2, 1, 1))
    t[0, 0] = 1
    tg = DepthTargets(t, np.ones((1, 1, 1), dtype=bool))
    assert abs(depth_bce(Tensor(np.full((1, 2, 1, 1), 0.5)), tg).item() - np.log(2)) < 1e-12
    assert depth_bce(Tensor(t), tg).item() < 1e-10


def test_depth_bce_direct_formula():
    rng = np.random.default_rng(0)
    p = softmax_np(rng.normal(size=(6, 4))).reshape(2, 3, 4).transpose(0, 2, 1)[..., None]  # (2, 4, 3, 1)
    p = np.ascontiguousarray(p)
    bins = rng.integers(0, 4, (2, 3, 1))
    onehot = np.moveaxis(np.eye(4)[bins], -1, 1)
    mask = rng.random((2, 3, 1)) < 0.7
    mask[0, 0, 0] = True
    got = depth_bce(Tensor(p), DepthTargets(onehot, mask)).item()
    terms = []
    for n, h, w in itertools.product(range(2), range(3), range(1)):
        if mask[n, h, w]:
            for k in range(4):
                t, q = onehot[n, k, h, w], p[n, k, h, w]
                terms.append(-(t * np.log(q) + (1 - t) * np.log(1 - q)))
    assert abs(got - np.mean(terms)) < 1e-12


def test_depth_bce_empty_mask_warns():
    tg = DepthTargets(np.zeros((1, 2, 1, 1)), np.zeros((1, 1, 1), dtype=bool))
    with pytest.warns(EmptyDepthMaskWarning):
        assert depth_bce(Tensor(np.full((1, 2, 1, 1), 0.5)), tg).item() == 0.0


# ---------------------------------------------------------------- properties


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1e-15, 1e-6, 0.5]))
def test_losses_nonnegative_and_finite(seed, sharp):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 6)
    probs = np.full((6, 3), sharp / 2)
    probs[np.arange(6), rng.integers(0, 3, 6)] = 1 - sharp
    logits = np.log(probs)
    vals = [
        focal_loss(Tensor(logits), labels).item(),
        lovasz_softmax(Tensor(probs), labels).item(),
        scal_loss(Tensor(probs), labels, "sem").item(),
        scal_loss(Tensor(probs), labels, "geo").item(),
    ]
    t = np.zeros((1, 3, 2, 1))
    t[0, 1] = 1
    depth = probs[:2].T.reshape(1, 3, 2, 1)  # bins along axis 1, one pixel per row
    vals.append(depth_bce(Tensor(depth), DepthTargets(t, np.ones((1, 2, 1), dtype=bool))).item())
    for v in vals:
        assert np.isfinite(v) and v >= -1e-12


def _lossfns():
    labels = np.array([0, 1, 2, 1])
    return {
        "focal": lambda x: focal_loss(x, labels),
        "lovasz": lambda x: lovasz_softmax(ad.softmax(x, axis=1), labels),
        "scal_sem": lambda x: scal_loss(ad.softmax(x, axis=1), labels, "sem"),
        "scal_geo": lambda x: scal_loss(ad.softmax(x, axis=1), labels, "geo"),
    }


@pytest.mark.parametrize("name", ["focal", "lovasz", "scal_sem", "scal_geo"])
@pytest.mark.parametrize("seed", SEEDS)
def test_loss_gradcheck(name, seed):
    rng = np.random.default_rng(seed)
    rep = gradcheck(_lossfns()[name], [rng.normal(size=(4, 3))])
    assert rep.passed, rep


@pytest.mark.parametrize("seed", SEEDS)
def test_depth_bce_gradcheck(seed):
    rng = np.random.default_rng(seed)
    onehot = np.moveaxis(np.eye(3)[rng.integers(0, 3, (1, 2, 2))], -1, 1)
    mask = np.array([[[True, False], [True, True]]])
    rep = gradcheck(lambda x: depth_bce(ad.softmax(x, axis=1), DepthTargets(onehot, mask)), [rng.normal(size=(1, 3, 2, 2))])
    assert rep.passed, rep


# ---------------------------------------------------------------- assembly


def test_total_all_ones():
    one = Tensor(1.0)
    assert assemble_total([[one] * 4] * 4, one).item() == 10.5
    assert assemble_total([[one] * 4] * 4, one, lam=0.0).item() == 7.5


def test_total_random_components():
    rng = np.random.default_rng(0)
    comps = rng.random((4, 4))
    dep = rng.random()
    got = assemble_total([[Tensor(v) for v in row] for row in comps], Tensor(dep)).item()
    ref = sum(comps[l].sum() / 2**l for l in range(4)) + 3 * dep
    assert abs(got - ref) < 1e-12


@pytest.mark.parametrize("seed", SEEDS)
def test_total_assembly_gradcheck(seed):
    rng = np.random.default_rng(seed)

    def fn(c, d):
        return assemble_total([[c[l, k] for k in range(4)] for l in range(4)], ad.sum_reduce(d))

    assert gradcheck(fn, [rng.random((4, 4)), rng.random(1)]).passed


def _pyramid_inputs(seed, shape=(8, 8, 8), k=3):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k + 1, shape)
    pyr = label_pyramid(labels, k)
    logits = [Tensor(rng.normal(size=g.shape + (k + 1,))) for g in pyr]
    t = np.moveaxis(np.eye(3)[rng.integers(0, 3, (1, 2, 2))], -1, 1)
    depth = ad.softmax(Tensor(rng.normal(size=(1, 3, 2, 2))), axis=1)
    return logits, pyr, depth, DepthTargets(t, np.ones((1, 2, 2), dtype=bool))


def test_total_loss_report_consistency():
    logits, pyr, depth, tg = _pyramid_inputs(0)
    total, rep = total_loss(logits, pyr, depth, tg)
    assert total.item() == rep.total
    ref = 0.0
    for l, w in enumerate((1, 0.5, 0.25, 0.125)):
        ref += w * (rep.focal[l] + rep.lovasz[l] + rep.scal_geo[l] + rep.scal_sem[l])
    assert abs(ref + 3 * rep.depth_bce - rep.total) < 1e-12
    rec = rep.record(5)
    assert list(rec) == (
        ["step"] + [f"{k}_{l}" for k in ("focal", "lovasz", "scal_geo", "scal_sem") for l in range(4)] + ["depth_bce", "total"]
    )


def test_total_loss_scale_count_error():
    logits, pyr, depth, tg = _pyramid_inputs(0)
    with pytest.raises(ValueError, match="scales"):
        total_loss(logits[:3], pyr[:3], depth, tg)


def test_total_loss_lambda_zero_drops_depth():
    logits, pyr, depth, tg = _pyramid_inputs(1)
    a = total_loss(logits, pyr, depth, tg, lam=0.0)[1]
    b = total_loss(logits, pyr, depth, None, lam=0.0)[1]
    assert a.total == b.total


def test_report_json_roundtrip():
    import json

    rep = LossReport([1.0] * 4, [2.0] * 4, [3.0] * 4, [4.0] * 4, 0.5, 12.0)
    assert json.loads(rep.to_json_line(3))["scal_sem_2"] == 4.0


# ---------------------------------------------------------------- gt pyramid


def test_downsample_mode_and_ties():
    block = np.zeros((2, 2, 2), dtype=np.uint8)
    assert downsample_labels(block, 4)[0, 0, 0] == 0
    block.flat[:3] = [2, 3, 3]
    assert downsample_labels(block, 4)[0, 0, 0] == 3
    block.flat[:4] = [2, 2, 3, 3]
    assert downsample_labels(block, 4)[0, 0, 0] == 2
    block[:] = 0
    block.flat[7] = 4
    assert downsample_labels(block, 4)[0, 0, 0] == 4


def test_downsample_shape_error():
    with pytest.raises(ValueError):
        downsample_labels(np.zeros((3, 2, 2), dtype=np.uint8), 4)


def test_warning_not_emitted_on_supervised():
    t = np.zeros((1, 2, 1, 1))
    t[0, 0] = 1
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        depth_bce(Tensor(np.full((1, 2, 1, 1), 0.5)), DepthTargets(t, np.ones((1, 1, 1), dtype=bool)))
