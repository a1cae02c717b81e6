"""Dense tensors with a define-by-run reverse-mode tape.

Every differentiable operation appends one node to the active :class:`Tape`.
Operations executed without an active tape (evaluation, planning rollouts)
are plain numpy calls wrapped in :class:`Tensor` and record nothing.

Tensors are at most 2-D in practice (``batch x features``); broadcasting is
limited to adding a bias row to a matrix.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "dense",
    "concat",
    "take_cols",
    "take_rows",
    "where",
    "tanh",
    "sigmoid",
    "retanh",
    "heaviside_ste",
    "sum",
    "mean",
    "absolute",
    "square",
    "mse",
    "gaussian_noise",
    "set_dtype",
    "get_dtype",
    "check_finite",
]

_DTYPE = np.float64
_CHECK_FINITE = False
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_dtype(dtype) -> None:
    """Switch the float type of newly created tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}; use float64 or float32")
    _DTYPE = dtype.type


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Raise ``FloatingPointError`` as soon as any op produces NaN/Inf."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = previous


class Tensor:
    """A dense array plus a flag telling the tape whether to track it."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype == _DTYPE:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, name: str | None = None) -> Tensor:
    """A constant (non-differentiable) tensor."""
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor whose gradient is collected by :meth:`Tape.gradient`."""
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _IndexedGrad:
    """Gradient that is non-zero only on ``index`` of an array of ``shape``."""

    __slots__ = ("index", "value", "shape")

    def __init__(self, index, value, shape):
        self.index = index
        self.value = value
        self.shape = shape


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Use as a context manager; operations on tensors with ``requires_grad``
    performed inside the block are recorded in execution order, which is
    already a topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Backpropagate from scalar ``loss``; return one gradient per param.

        Parameters the loss does not depend on receive exact zeros. Each
        parameter's ``grad`` attribute is set as well.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owned: set[int] = set()
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                _accumulate(grads, owned, inp, ig)
        result = []
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            elif isinstance(g, _IndexedGrad):
                g = _densify(g)
            p.grad = g
            result.append(g)
        return result


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Functional alias of :meth:`Tape.gradient`."""
    return tape.gradient(loss, params)


def _densify(g: _IndexedGrad) -> np.ndarray:
    buf = np.zeros(g.shape, dtype=g.value.dtype)
    buf[g.index] = g.value
    return buf


def _accumulate(grads: dict, owned: set, inp: Tensor, g) -> None:
    key = id(inp)
    cur = grads.get(key)
    if cur is None:
        if isinstance(g, _IndexedGrad):
            grads[key] = _densify(g)
            owned.add(key)
        else:
            grads[key] = g
        return
    if isinstance(cur, np.ndarray) and key not in owned:
        cur = cur.copy()
        grads[key] = cur
        owned.add(key)
    if isinstance(g, _IndexedGrad):
        cur[g.index] += g.value
    else:
        cur += g


def _record(out_data: np.ndarray, inputs: tuple, fn: Callable, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(out_data)
    if _TAPES:
        for inp in inputs:
            if inp.requires_grad:
                out.requires_grad = True
                _TAPES[-1].nodes.append((out, inputs, fn))
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def fn(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), fn, "matmul")


_ACTIVATIONS = ("linear", "tanh", "sigmoid")


def dense(x: Tensor, weight: Tensor, bias: Tensor, activation: str = "linear") -> Tensor:
    """Fused ``act(x @ weight + bias)`` for a batch of row vectors."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0] or bias.data.shape != (wd.shape[1],):
        raise ShapeError(
            f"dense: incompatible shapes {x.shape} @ {weight.shape} + {bias.shape}"
        )
    z = xd @ wd
    z += bias.data
    if activation == "linear":
        y = z

        def fn(g):
            return g @ wd.T, xd.T @ g, g.sum(axis=0)

    elif activation == "tanh":
        y = np.tanh(z, out=z)

        def fn(g):
            gz = g * (1.0 - y * y)
            return gz @ wd.T, xd.T @ gz, gz.sum(axis=0)

    elif activation == "sigmoid":
        y = _sigmoid(z)

        def fn(g):
            gz = g * y * (1.0 - y)
            return gz @ wd.T, xd.T @ gz, gz.sum(axis=0)

    else:
        raise ValueError(f"unknown activation {activation!r}; expected one of {_ACTIVATIONS}")
    return _record(y, (x, weight, bias), fn, f"dense[{activation}]")


# -- structural --------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(out, tensors, fn, "concat")


def take_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-D tensor (or elements of a 1-D one)."""
    shape = x.shape
    index = (Ellipsis, slice(start, stop))
    return _record(
        x.data[index], (x,), lambda g: (_IndexedGrad(index, g, shape),), "take_cols"
    )


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape
    index = slice(start, stop)
    return _record(
        x.data[index], (x,), lambda g: (_IndexedGrad(index, g, shape),), "take_rows"
    )


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select: ``a`` where ``cond`` is true, else ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("where", a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def fn(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), sa),
            _unbroadcast(np.where(cond, 0.0, g), sb),
        )

    return _record(np.where(cond, a.data, b.data), (a, b), fn, "where")


# -- nonlinearities ----------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def retanh(s: Tensor) -> Tensor:
    """Rectified tanh ``max(0, tanh(s))``; derivative exactly 0 for s <= 0."""
    sd = s.data
    y = np.maximum(np.tanh(sd), 0.0)
    positive = sd > 0

    def fn(g):
        return (np.where(positive, g * (1.0 - y * y), 0.0),)

    return _record(y, (s,), fn, "retanh")


def heaviside_ste(v: Tensor) -> Tensor:
    """Step function forward, identity backward (straight-through)."""
    y = (v.data > 0).astype(_DTYPE)
    return _record(y, (v,), lambda g: (g,), "heaviside_ste")


# -- reductions --------------------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _record(
        np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),), "sum"
    )


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def fn(g):
        return (np.broadcast_to(g / n, shape),)

    return _record(np.asarray(x.data.mean()), (x,), fn, "mean")


def mse(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared error."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: incompatible shapes {pred.shape} and {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def fn(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _record(np.asarray(np.mean(diff * diff)), (pred, target), fn, "mse")


# -- noise -------------------------------------------------------------------


def gaussian_noise(mean: Tensor, variance: float, rng) -> Tensor:
    """``mean + eps`` with ``eps ~ N(0, variance I)``; gradient flows to mean only."""
    if variance < 0:
        raise ValueError(f"noise variance must be >= 0, got {variance}")
    if variance == 0:
        return mean
    eps = rng.normal(0.0, np.sqrt(variance), mean.shape)
    return add(mean, Tensor(eps))
