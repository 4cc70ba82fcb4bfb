"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable primitive records an :class:`Op` when one of its
operands requires a gradient. Ops carry a monotonically increasing sequence
number, so the ops reachable from a loss can be replayed in exact reverse
execution order (see :class:`GradTape`).

Arrays default to 32-bit floats; wrap gradient checks in
``with precision(np.float64):``.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Op",
    "GradTape",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "precision",
    "get_dtype",
    "forward_primitive",
    "backward",
    "grad",
    "finite_diff_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op_kind: str):
        super().__init__(f"non-finite value produced by {op_kind}")
        self.op_kind = op_kind


class GraphError(RuntimeError):
    pass


_state = threading.local()
_seq = itertools.count()


def _get(name, default):
    return getattr(_state, name, default)


def get_dtype():
    return _get("dtype", np.float32)


def _grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    prev = get_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Op:
    """One executed primitive: operands, result and the vector-Jacobian rule."""

    __slots__ = ("kind", "inputs", "vjp", "seq")

    def __init__(self, kind: str, inputs: tuple, vjp: Callable):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp
        self.seq = next(_seq)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_retain", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: Op | None = None
        self._retain = False

    # basic info
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_dtype()), requires_grad)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.op is not None


def _emit(kind: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(kind)
    res = Tensor(out, dtype=out.dtype)
    if _grad_enabled() and any(_needs_grad(t) for t in inputs):
        res.op = Op(kind, tuple(inputs), vjp)
    return res


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = a.data.dtype.type(c)
    return _emit("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a padded NCHW array as rows ordered (kh, kw, C)."""
    n, c = xp.shape[:2]
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xt[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _conv_raw(xp: np.ndarray, w: np.ndarray, stride: int):
    n = xp.shape[0]
    o, c, kh, kw = w.shape
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols, wmat


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    o, c, kh, kw = w.shape
    xp = _pad_hw(x.data, pad)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    out, cols, wmat = _conv_raw(xp, w.data, stride)
    n, _, ho, wo = out.shape
    xshape = xp.shape
    wd = w.data

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if stride == 1:
            # gradient wrt the padded input is a full correlation of g with the
            # flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wf = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            dx = _conv_raw(gp, wf, 1)[0]
        else:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            dxt = np.zeros((n, xshape[2], xshape[3], c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxt[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            dx = dxt.transpose(0, 3, 1, 2)
        if pad:
            dx = dx[:, :, pad:-pad, pad:-pad]
        return np.ascontiguousarray(dx), np.ascontiguousarray(gw)

    return _emit("conv2d", out, (x, w), vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))


def silu(x) -> Tensor:
    x = _as_tensor(x)
    s = expit(x.data)
    xd = x.data
    return _emit("silu", xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),))


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial size {(h, w)} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    scale = x.data.dtype.type(1.0 / (k * k))

    def vjp(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) * scale,)

    return _emit("avg_pool2d", out, (x,), vjp)


def upsample_nearest(x, k: int = 2) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest expects a 4-d tensor")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)
    return _emit("upsample_nearest", out, (x,),
                 lambda g: (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    old = x.shape
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit("concat", out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def index(x, idx) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("index", np.array(x.data[idx]), (x,), vjp)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), vjp)


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _emit("log", out, (x,), lambda g: (g / xd,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _emit("log_softmax", out, (x,),
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def square(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _emit("square", xd * xd, (x,), lambda g: (2 * g * xd,))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _emit("sqrt", out, (x,), lambda g: (g / (2 * out),))


def clamp(x, lo=None, hi=None) -> Tensor:
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _emit("clamp", out, (x,), lambda g: (g * inside,))


_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar_mul": scalar_mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "silu": silu,
    "avg_pool2d": avg_pool2d,
    "upsample_nearest": upsample_nearest,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "index": index,
    "sum": sum_,
    "mean": mean,
    "log": log,
    "exp": exp,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "square": square,
    "sqrt": sqrt,
    "clamp": clamp,
}


def forward_primitive(op_kind: str, *operands, **params) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_primitive("conv2d", x, w, pad=1)``."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown op_kind {op_kind!r}") from None
    return fn(*operands, **params)


# ---------------------------------------------------------------- backward


class GradTape:
    """Ops reachable from ``root``, in execution order.

    ``reverse()`` replays them last-executed first; since an op's sequence
    number is drawn when it runs, the order is a valid reverse topological
    order and the tape is acyclic by construction.
    """

    def __init__(self, root: Tensor):
        self.nodes: list[Tensor] = []
        self.result_of: dict[int, int] = {}
        ops: dict[int, Op] = {}
        stack, seen = [root], set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            self.nodes.append(t)
            if t.op is not None:
                ops[t.op.seq] = t.op
                self.result_of[t.op.seq] = id(t)
                stack.extend(t.op.inputs)
        self.ops = [ops[k] for k in sorted(ops)]

    def __len__(self) -> int:
        return len(self.ops)

    def reverse(self) -> Iterable[Op]:
        return reversed(self.ops)


def _run_backward(loss: Tensor) -> tuple[GradTape, dict[int, np.ndarray]]:
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.op is None and not loss.requires_grad:
        raise GraphError("loss is detached: no recorded operation requires a gradient")
    tape = GradTape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in tape.reverse():
        g = grads.get(tape.result_of[op.seq])
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.vjp(g)):
            if gi is None or not _needs_grad(t):
                continue
            k = id(t)
            grads[k] = grads[k] + gi if k in grads else gi
    return tape, grads


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every reachable leaf that
    requires a gradient (and of intermediates marked with ``retain_grad``).
    The recorded graph is released afterwards."""
    tape, grads = _run_backward(loss)
    for t in tape.nodes:
        if (t.requires_grad and t.op is None) or t._retain:
            g = grads.get(id(t))
            if g is None:
                continue
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g
    for t in tape.nodes:
        t.op = None


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``inputs`` (any tensors
    on the graph). Leaves ``.grad`` untouched and keeps the graph."""
    _, grads = _run_backward(loss)
    return [np.asarray(grads.get(id(t), np.zeros_like(t.data)), dtype=t.data.dtype)
            for t in inputs]


def finite_diff_check(fn: Callable[[Tensor], Tensor], x, h: float = 1e-4,
                      eps_denom: float = 1e-6) -> float:
    """Max relative error between the tape gradient of ``fn`` at ``x`` and a
    central difference with step ``h``."""
    if h <= 0:
        raise ValueError("step size must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=get_dtype())
    xt = Tensor(x0.copy(), requires_grad=True)
    out = fn(xt)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("finite_diff_check")
    (analytic,) = grad(out, [xt])
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            fp = fn(Tensor(xp.reshape(x0.shape))).data
            fm = fn(Tensor(xm.reshape(x0.shape))).data
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("finite_diff_check")
            flat[i] = (float(fp) - float(fm)) / (2 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + eps_denom)
    return float(err.max())


# public alias; the builtin is not used in this module
sum = sum_  # noqa: A001
