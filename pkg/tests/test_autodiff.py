import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import cylocc.autodiff as ad
from cylocc.autodiff import Tensor, backward, gradcheck

SEEDS = range(10)


def leaf(x):
    return Tensor(x, requires_grad=True)


# ---------------------------------------------------------------- forward examples


def test_softmax_uniform():
    y = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(y.data, [1 / 3, 1 / 3, 1 / 3])


def test_conv2d_shape():
    x = Tensor(np.zeros((1, 4, 8, 8)))
    w = Tensor(np.zeros((3, 4, 3, 3)))
    assert ad.conv2d(x, w, stride=1, padding=1).shape == (1, 3, 8, 8)
    assert ad.conv2d(x, w, stride=2, padding=1).shape == (1, 3, 4, 4)


def test_matmul_identity_rows():
    a = Tensor([[1, 0, 0], [0, 1, 0]])
    b = Tensor([[1, 2], [3, 4], [5, 6]])
    np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])
    with pytest.raises(ad.ShapeError, match="matmul"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_softmax_empty_axis_errors():
    with pytest.raises(ValueError, match="softmax"):
        ad.softmax(Tensor(np.zeros((3, 0))), axis=1)


def test_log_clamps_domain():
    y = ad.log(Tensor([0.0, -1.0, 1.0]))
    assert np.all(np.isfinite(y.data))
    assert y.data[0] == np.log(1e-12)


# ---------------------------------------------------------------- backward examples


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    backward(ad.sum_reduce(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_softmax_cross_entropy_grad():
    logits = leaf([0.0, 0.0])
    p = ad.softmax(logits)
    loss = -ad.log(p)[0]
    backward(loss)
    np.testing.assert_allclose(logits.grad, [-0.5, 0.5], atol=1e-15)


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        backward(x * x)


def test_backward_twice_errors():
    x = leaf([1.0, 2.0])
    loss = ad.sum_reduce(x * x)
    backward(loss)
    with pytest.raises(RuntimeError):
        backward(loss)


def test_graph_visits_nodes_in_append_order():
    x = leaf([1.0, 2.0])
    y = ad.relu(x * 2.0)
    z = ad.sum_reduce(y * y)
    g = ad.Graph.trace(z)
    ids = [n.id for n in g.nodes]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)
    assert [n.op for n in g.nodes] == ["scale", "relu", "multiply", "sum_reduce"]


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = x * 3.0
    assert y.node is None and not y.requires_grad


def test_shared_input_accumulates():
    x = leaf([3.0])
    backward(ad.sum_reduce(x * x + x))
    np.testing.assert_array_equal(x.grad, [7.0])


# ---------------------------------------------------------------- gradcheck harness


def test_gradcheck_constant_passes():
    rep = gradcheck(lambda x: Tensor(5.0), [np.ones(3)])
    assert rep.passed and rep.max_rel_errors == [0.0]


def test_gradcheck_rejects_vector_output():
    with pytest.raises(ValueError, match="scalar"):
        gradcheck(lambda x: x * 2.0, [np.ones(3)])


def test_gradcheck_catches_wrong_backward():
    def bad_square(x):
        # d(x^2)/dx reported as x instead of 2x
        return ad.record(x.data**2, "bad_square", (x,), lambda g: (g * x.data,))

    rep = gradcheck(lambda x: ad.sum_reduce(bad_square(x)), [np.array([1.0, -2.0, 0.5])])
    assert not rep.passed


# ---------------------------------------------------------------- per-op gradchecks


def _rng(seed):
    return np.random.default_rng(seed)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-300) * margin, x)


OPS = {
    "add": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))], lambda a, b: a + b),
    "subtract": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))], lambda a, b: a - b),
    "multiply": (lambda r: [r.standard_normal((4, 4)), r.standard_normal((4, 4))], lambda a, b: a * b),
    "scale": (lambda r: [r.standard_normal((2, 3))], lambda a: ad.scale(a, -1.7)),
    "scalar_add": (lambda r: [r.standard_normal((2, 3))], lambda a: 2.5 - a),
    "matmul": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))], lambda a, b: a @ b),
    "linear": (
        lambda r: [r.standard_normal((4, 3)), r.standard_normal((3, 2)), r.standard_normal(2)],
        ad.linear,
    ),
    "conv2d_s1_zero": (
        lambda r: [r.standard_normal((1, 2, 4, 4)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)],
        lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1),
    ),
    "conv2d_s2_mixed": (
        lambda r: [r.standard_normal((1, 2, 4, 4)), r.standard_normal((2, 2, 3, 3)), r.standard_normal(2)],
        lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1, pad_mode=("zero", "circular")),
    ),
    "conv2d_s1_circular": (
        lambda r: [r.standard_normal((2, 1, 3, 4)), r.standard_normal((2, 1, 3, 3))],
        lambda x, w: ad.conv2d(x, w, stride=1, padding=1, pad_mode=("circular", "circular")),
    ),
    "relu": (lambda r: [_away_from_zero(r, (4, 4))], ad.relu),
    "softplus": (lambda r: [r.standard_normal((4, 4)) * 3], ad.softplus),
    "sigmoid": (lambda r: [r.standard_normal((4, 4)) * 3], ad.sigmoid),
    "softmax": (lambda r: [r.standard_normal((3, 4))], lambda x: ad.softmax(x, axis=1)),
    "softmax_axis0": (lambda r: [r.standard_normal((3, 4))], lambda x: ad.softmax(x, axis=0)),
    "log": (lambda r: [r.uniform(0.2, 3.0, (4, 4))], ad.log),
    "exp": (lambda r: [r.standard_normal((4, 4))], ad.exp),
    "max_reduce": (lambda r: [r.standard_normal((4, 3, 2))], lambda x: ad.max_reduce(x, axis=1)),
    "mean_reduce": (lambda r: [r.standard_normal((4, 3))], lambda x: ad.mean_reduce(x, axis=0)),
    "sum_reduce": (lambda r: [r.standard_normal((2, 3, 2))], lambda x: ad.sum_reduce(x, axis=(0, 2))),
    "concat": (
        lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 1))],
        lambda a, b: ad.concat([a, b], axis=1),
    ),
    "slice": (lambda r: [r.standard_normal((4, 4))], lambda x: x[1:3, ::2]),
    "reshape": (lambda r: [r.standard_normal((2, 6))], lambda x: ad.reshape(x, (3, 4))),
    "transpose": (lambda r: [r.standard_normal((2, 3, 4))], lambda x: ad.transpose(x, (2, 0, 1))),
    "gather": (
        lambda r: [r.standard_normal((4, 3))],
        lambda x: ad.gather(x, np.array([3, 0, 3, 1, 1]), axis=0),
    ),
    "gather_axis1": (
        lambda r: [r.standard_normal((2, 4))],
        lambda x: ad.gather(x, np.array([2, 2, 0]), axis=1),
    ),
    "broadcast": (lambda r: [r.standard_normal((3, 1))], lambda x: ad.broadcast_to(x, (2, 3, 4))),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradcheck(name, seed):
    make, op = OPS[name]
    rng = _rng(seed)
    inputs = make(rng)
    out_shape = op(*[Tensor(x) for x in inputs]).shape
    weights = Tensor(rng.standard_normal(out_shape))
    rep = gradcheck(lambda *xs: ad.sum_reduce(op(*xs) * weights), inputs)
    assert rep.passed, f"{name}: {rep}"


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("modes", [("clamp", "clamp"), ("clamp", "wrap"), ("wrap", "wrap")])
def test_bilinear_sample_gradcheck(seed, modes):
    rng = _rng(seed)
    plane = rng.standard_normal((3, 4, 2))
    coords = np.stack([rng.uniform(-1, 4, 7), rng.uniform(-1.5, 5.5, 7)], axis=1)
    weights = Tensor(rng.standard_normal((7, 2)))
    rep = gradcheck(lambda p: ad.sum_reduce(ad.bilinear_sample(p, coords, modes) * weights), [plane])
    assert rep.passed, str(rep)


# ---------------------------------------------------------------- invariants


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-700, 700)))
def test_softmax_sums_to_one(x):
    y = ad.softmax(Tensor(x), axis=1).data
    assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(y >= 0)


def test_max_reduce_routes_to_argmax_lowest_index():
    x = leaf([[1.0, 5.0, 5.0], [7.0, 2.0, 7.0]])
    y = ad.max_reduce(x, axis=1)
    assert y.node.saved["argmax"].tolist() == [1, 0]
    backward(ad.sum_reduce(y * Tensor([2.0, 3.0])))
    np.testing.assert_array_equal(x.grad, [[0, 2, 0], [3, 0, 0]])
    assert x.grad.sum() == 5.0


def test_conv2d_center_kernel_identity():
    rng = _rng(0)
    x = rng.standard_normal((1, 3, 5, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    y = ad.conv2d(Tensor(x), Tensor(w), stride=1, padding=1)
    np.testing.assert_array_equal(y.data, x)


def test_conv2d_circular_padding_wraps():
    x = np.arange(4.0).reshape(1, 1, 1, 4)
    w = np.zeros((1, 1, 1, 3))
    w[0, 0, 0, 0] = 1.0  # picks the left neighbour
    y = ad.conv2d(Tensor(x), Tensor(w[:, :, :, :]), padding=(0, 1), pad_mode=("zero", "circular"))
    np.testing.assert_array_equal(y.data.ravel(), [3.0, 0.0, 1.0, 2.0])


def test_forward_bit_reproducible():
    rng = _rng(3)
    x = rng.standard_normal((1, 4, 8, 8))
    w = rng.standard_normal((4, 4, 3, 3))
    a = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1, pad_mode=("zero", "circular")).data
    b = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1, pad_mode=("zero", "circular")).data
    assert a.tobytes() == b.tobytes()


def test_bilinear_exact_at_nodes_and_wraps():
    plane = np.arange(12.0).reshape(3, 4, 1)
    t = Tensor(plane)
    out = ad.bilinear_sample(t, np.array([[1.0, 2.0], [2.0, 3.0]]), ("clamp", "wrap")).data
    np.testing.assert_array_equal(out.ravel(), [6.0, 11.0])
    # halfway between the last and first column
    mid = ad.bilinear_sample(t, np.array([[0.0, 3.5]]), ("clamp", "wrap")).data
    assert mid.item() == pytest.approx(0.5 * (plane[0, 3, 0] + plane[0, 0, 0]))
    # clamp never extrapolates
    edge = ad.bilinear_sample(t, np.array([[-5.0, 0.0], [9.0, 0.0]]), ("clamp", "wrap")).data
    np.testing.assert_array_equal(edge.ravel(), [0.0, 8.0])


def test_tensors_are_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0
