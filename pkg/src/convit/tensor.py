"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a contiguous row-major ``numpy.ndarray``. Every
differentiable operation records its parents and a backward rule on the
output tensor; :func:`backward` linearises that graph into a tape in
topological order and replays the rules in reverse.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an API precondition is violated (e.g. non-scalar loss)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "retains_grad")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.retains_grad = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.retains_grad = False
        return t

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def retain_grad(self) -> "Tensor":
        self.retains_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor_create(shape: Sequence[int], data: Sequence[float], requires_grad: bool = False,
                  dtype=np.float64) -> Tensor:
    """Build a tensor from a flat row-major value list.

    Raises:
        ShapeError: if ``prod(shape) != len(data)`` or a dimension is < 1.
    """
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {list(shape)}")
    values = np.asarray(data, dtype=dtype).reshape(-1)
    if math.prod(shape) != values.size:
        raise ShapeError(f"shape {list(shape)} needs {math.prod(shape)} values, got {values.size}")
    return Tensor(values.reshape(shape), requires_grad=requires_grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return Tensor._wrap(arr.reshape(1) if arr.ndim == 0 else arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {list(a)} with {list(b)}") from exc


# -- elementwise ---------------------------------------------------------------

def _scalar_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=ref.dtype).reshape(np.shape(x) or (1,)))


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _scalar_like(b, a)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _scalar_like(a, b)
    b = _scalar_like(b, a)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    a = _scalar_like(a, b) if not isinstance(a, Tensor) else a
    b = _scalar_like(b, a)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    cdf = cdf.astype(xd.dtype)

    def back(g):
        pdf = (np.exp(-0.5 * xd * xd) * _INV_SQRT2PI).astype(xd.dtype)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


def elementwise(op: str, *inputs, c: float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu, gelu, exp."""
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu, "gelu": gelu, "exp": exp}
    if op == "scale":
        return scale(inputs[0], c if c is not None else inputs[1])
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*inputs)


# -- linear algebra and shape ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, numpy-broadcast over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {list(a.shape)} @ {list(b.shape)}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), back)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    picked = x.data[idx]
    picked_shape = np.shape(picked)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g.reshape(picked_shape))
        return (full,)

    return _make(np.ascontiguousarray(picked), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(x.shape[a] for a in axes)
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back)


# -- backward --------------------------------------------------------------------

def _tape(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below ``root`` (inputs precede outputs)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def _run_backward(root: Tensor, seed: np.ndarray, targets: dict[int, Tensor] | None):
    grads: dict[int, np.ndarray] = {id(root): seed}
    collected: dict[int, np.ndarray] = {}
    for node in reversed(_tape(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if targets is not None:
            if id(node) in targets:
                collected[id(node)] = g
        elif node.is_leaf or node.retains_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return collected


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Raises:
        ContractError: if ``loss`` has more than one element.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a single-element loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    _run_backward(loss, np.ones_like(loss.data), None)


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output: np.ndarray | None = None
         ) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching any ``.grad``."""
    if grad_output is None:
        if output.size != 1:
            raise ContractError("grad of a non-scalar output needs grad_output")
        grad_output = np.ones_like(output.data)
    targets = {id(t): t for t in inputs}
    got = _run_backward(output, np.asarray(grad_output, dtype=output.dtype), targets) \
        if output.requires_grad else {}
    return [got.get(id(t), np.zeros_like(t.data)) for t in inputs]


# -- finite differences --------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
                      kinks: Iterable[float] = ()) -> float:
    """Max relative error between autodiff and central differences of scalar ``f``.

    Elements of ``x`` lying within ``eps`` of any value in ``kinks`` are
    skipped, since the derivative is undefined there.
    """
    x0 = np.array(x.data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractError("finite_diff_check needs a scalar-valued function")
    (analytic,) = grad(out, [leaf])
    kinks = tuple(kinks)
    worst = 0.0
    flat = x0.reshape(-1)
    a_flat = analytic.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            if any(abs(flat[i] - k) < eps for k in kinks):
                continue
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor._wrap(x0)).item()
            flat[i] = orig - eps
            fm = f(Tensor._wrap(x0)).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(a_flat[i] - numeric) / (abs(a_flat[i]) + 1e-8)
            worst = max(worst, err)
    return worst
