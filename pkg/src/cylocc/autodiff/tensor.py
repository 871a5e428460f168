"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records a :class:`Node` holding its inputs and a
closure that maps the output gradient to input gradients.  Node ids come from
a global counter, so creation order is a valid topological order and
:func:`backward` simply replays the reachable nodes newest-first.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()
_grad_enabled = True

LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("id", "op", "inputs", "backward_fn", "saved", "released")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable, saved: dict | None):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.saved = saved or {}
        self.released = False

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.op})"


class Tensor:
    """A float64 array that can take part in the gradient tape."""

    __array_priority__ = 1000
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; all of it routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_reduce(self, axis)

    def mean(self, axis=None):
        return mean_reduce(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(
    data: np.ndarray,
    op: str,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    saved: dict | None = None,
) -> Tensor:
    """Wrap ``data`` as an op result, attaching a tape node when needed.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per input, in order.  This is also the extension point used by
    ops defined outside this module (e.g. voxel scatter-max).
    """
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    data.flags.writeable = False
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    inputs = tuple(inputs)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn, saved)
    return out


class Graph:
    """The recorded nodes reachable from one output, in append order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen: dict[int, Node] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or n.id in seen:
                continue
            seen[n.id] = n
            stack.extend(inp for inp in n.inputs if inp.node is not None)
        return cls([seen[k] for k in sorted(seen)])

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf needing it.

    Saved activations are freed afterwards; a second call on the same graph
    raises until the forward pass is re-run.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones(()) if loss.grad is None else loss.grad + 1.0
        return
    if loss.node.released:
        raise RuntimeError("backward: graph already consumed; re-run the forward pass")
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {loss.node.id: np.ones(())}
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is not None:
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is not None:
                    prev = grads.get(inp.node.id)
                    grads[inp.node.id] = gi if prev is None else prev + gi
                else:
                    inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi
        node.released = True
        node.backward_fn = None
        node.saved = {}


# ---------------------------------------------------------------- helpers


def _scatter_rows(n_rows: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum ``values[i]`` into row ``index[i]`` of a zero (n_rows, ...) array.

    Uses bincount per trailing column, which sums in index order and is
    therefore bit-reproducible.
    """
    index = np.asarray(index).ravel()
    tail = values.shape[1:]
    flat = values.reshape(len(index), -1)
    out = np.empty((n_rows, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(index, weights=flat[:, c], minlength=n_rows)
    return out.reshape((n_rows,) + tail)


def _scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if _scalar(b):
        a = as_tensor(a)
        return record(a.data + b, "add", (a,), lambda g: (g,))
    if _scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    return record(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _scalar(b):
        return add(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("subtract", a.shape, b.shape)
    return record(a.data - b.data, "subtract", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _scalar(b):
        return scale(a, b)
    if _scalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("multiply", a.shape, b.shape)
    ad, bd = a.data, b.data
    return record(ad * bd, "multiply", (a, b), lambda g: (g * bd, g * ad))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return record(a.data * s, "scale", (a,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return record(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data)
    s = _sigmoid(x.data)
    return record(y, "softplus", (x,), lambda g: (g * s,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return record(y, "exp", (x,), lambda g: (g * y,))


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log with the input clamped below at ``eps``."""
    xd = x.data
    live = xd > eps
    safe = np.where(live, xd, eps)
    return record(np.log(safe), "log", (x,), lambda g: (np.where(live, g / safe, 0.0),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ValueError(f"softmax: empty axis {axis} for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, "softmax", (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return record(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``x`` (N, in), ``w`` (in, out), ``b`` (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise _shape_error("linear", x.shape, w.shape)
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return record(out, "linear", (x, w), lambda g: (g @ wd.T, xd.T @ g))
    if b.shape != (w.shape[1],):
        raise _shape_error("linear bias", b.shape, (w.shape[1],))
    return record(out + b.data, "linear", (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


PAD_MODES = ("zero", "circular")


def _pad_axis(x: np.ndarray, axis: int, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    if mode == "zero":
        widths = [(0, 0)] * x.ndim
        widths[axis] = (p, p)
        return np.pad(x, widths)
    n = x.shape[axis]
    return np.take(x, np.arange(-p, n + p) % n, axis=axis)


def _unpad_axis(g: np.ndarray, axis: int, p: int, mode: str, n: int) -> np.ndarray:
    if p == 0:
        return g
    if mode == "zero":
        return np.take(g, np.arange(p, p + n), axis=axis)
    idx = np.arange(-p, n + p) % n
    moved = np.moveaxis(g, axis, 0)
    return np.moveaxis(_scatter_rows(n, idx, moved), 0, axis)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int | tuple[int, int] = 0,
    pad_mode: str | tuple[str, str] = "zero",
) -> Tensor:
    """2D cross-correlation on NCHW input with per-axis padding mode.

    ``pad_mode`` is ``"zero"`` or ``"circular"``, or a pair giving the mode for
    the H and W axes separately.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    mh, mw = (pad_mode, pad_mode) if isinstance(pad_mode, str) else pad_mode
    for m in (mh, mw):
        if m not in PAD_MODES:
            raise ValueError(f"conv2d: unknown pad mode {m!r}")
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = _pad_axis(_pad_axis(x.data, 2, ph, mh), 3, pw, mw)
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise _shape_error("conv2d", x.shape, w.shape)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = cols[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    wdata = w.data
    out = np.tensordot(cols, wdata, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        if b.shape != (co,):
            raise _shape_error("conv2d bias", b.shape, (co,))
        out = out + b.data[None, :, None, None]

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, wdata, axes=([1], [0]))  # N,Ho,Wo,Ci,kh,kw
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = _unpad_axis(_unpad_axis(gxp, 3, pw, mw, wd), 2, ph, mh, h)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return record(np.ascontiguousarray(out), "conv2d", inputs, bw)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def max_reduce(x: Tensor, axis: int) -> Tensor:
    """Max over ``axis``; ties go to the lowest index (saved as ``argmax``)."""
    axis = _norm_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise ValueError(f"max_reduce: empty axis {axis} for shape {x.shape}")
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return record(out, "max_reduce", (x,), bw, saved={"argmax": arg.squeeze(axis)})


def sum_reduce(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return record(out, "sum_reduce", (x,), bw)


def mean_reduce(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ValueError(f"mean_reduce: empty reduction for shape {x.shape}")
    return scale(sum_reduce(x, axis), 1.0 / n)


# ---------------------------------------------------------------- structure


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: no inputs")
    ref = tensors[0]
    axis = _norm_axis(axis, ref.ndim)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for k, (s, r) in enumerate(zip(t.shape, ref.shape)) if k != axis
        ):
            raise _shape_error("concat", ref.shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return record(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def slice_(x: Tensor, index) -> Tensor:
    """Basic indexing (ints and slices only)."""
    if not isinstance(index, tuple):
        index = (index,)
    for k in index:
        if not isinstance(k, (int, slice, np.integer)) and k is not Ellipsis:
            raise TypeError(f"slice: only ints and slices are supported, got {type(k).__name__}")
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[index] = g
        return (gx,)

    return record(x.data[index].copy(), "slice", (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise _shape_error("reshape", old, shape) from None
    return record(out, "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: bad axes {axes} for shape {x.shape}")
    inv = np.argsort([a % x.ndim for a in axes])
    out = np.ascontiguousarray(x.data.transpose(axes))
    return record(out, "transpose", (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise _shape_error("broadcast", old, shape) from None
    lead = len(shape) - len(old)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(old) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(old),)

    return record(out, "broadcast", (x,), bw)


def gather(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries of ``x`` along ``axis`` by integer ``index`` (1D)."""
    index = np.asarray(index)
    if index.ndim != 1 or (index.size and not np.issubdtype(index.dtype, np.integer)):
        raise ValueError("gather: index must be a 1D integer array")
    axis = _norm_axis(axis, x.ndim)
    n = x.shape[axis]
    if index.size and (index.min() < -n or index.max() >= n):
        raise IndexError(f"gather: index out of range for axis of length {n}")
    index = index % n if n else index
    out = np.take(x.data, index, axis=axis)

    def bw(g):
        moved = np.moveaxis(g, axis, 0)
        return (np.moveaxis(_scatter_rows(n, index, moved), 0, axis),)

    return record(out, "gather", (x,), bw)


SAMPLE_MODES = ("clamp", "wrap")


def _axis_corners(u: np.ndarray, n: int, mode: str):
    if mode == "clamp":
        u = np.clip(u, 0.0, n - 1)
        i0 = np.minimum(np.floor(u).astype(np.int64), n - 1)
        frac = u - i0
        i1 = np.minimum(i0 + 1, n - 1)
    elif mode == "wrap":
        fl = np.floor(u)
        frac = u - fl
        i0 = fl.astype(np.int64) % n
        i1 = (i0 + 1) % n
    else:
        raise ValueError(f"bilinear_sample: unknown mode {mode!r}")
    return i0, i1, frac


def bilinear_weights(coords: np.ndarray, hw: tuple[int, int], modes: tuple[str, str]):
    """Corner indices (flat, into an H*W grid) and weights for ``coords``.

    ``coords`` is (N, 2) of continuous (row, col) positions where integer
    values sit exactly on grid nodes.
    """
    h, w = hw
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    r0, r1, fr = _axis_corners(coords[:, 0], h, modes[0])
    c0, c1, fc = _axis_corners(coords[:, 1], w, modes[1])
    idx = np.stack([r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1])
    wts = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
    return idx, wts


def bilinear_sample(
    plane: Tensor,
    coords: np.ndarray,
    modes: tuple[str, str] = ("clamp", "clamp"),
) -> Tensor:
    """Sample an (H, W, C) plane at continuous (row, col) positions.

    Each axis either clamps to its edge nodes or wraps periodically.
    Gradients flow to the plane only; coordinates are constants.
    """
    if plane.ndim != 3:
        raise ValueError(f"bilinear_sample: plane must be (H, W, C), got {plane.shape}")
    h, w, c = plane.shape
    idx, wts = bilinear_weights(coords, (h, w), modes)
    flat = plane.data.reshape(h * w, c)
    out = np.zeros((idx.shape[1], c))
    for k in range(4):
        out += wts[k][:, None] * flat[idx[k]]

    def bw(g):
        vals = (wts[:, :, None] * g[None]).reshape(-1, c)
        return (_scatter_rows(h * w, idx.ravel(), vals).reshape(h, w, c),)

    return record(out, "bilinear_sample", (plane,), bw)
