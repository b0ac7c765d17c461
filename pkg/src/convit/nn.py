"""Layer operations with fused backward rules, plus a small module system.

Feature maps are channel-last ``[B, H, W, C]`` throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, _make, tsum

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-6


class DegenerateBatchError(ValueError):
    """Batch-norm train mode was asked to normalise a single value per channel."""


# -- functional ops ------------------------------------------------------------


def _out_dim(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    """Yield ``(i, j, view)`` where view is the strided slice for kernel tap (i, j)."""
    for i in range(kh):
        for j in range(kw):
            yield i, j, xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation. ``weight`` is ``[kh, kw, c_in, c_out]``."""
    b, h, w, c = x.shape
    kh, kw, cin, cout = weight.shape
    if c != cin:
        raise ShapeError(f"conv2d expects {cin} input channels, got {c}")
    ho, wo = _out_dim(h, kh, stride, padding), _out_dim(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be {ho}x{wo}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    if kh == kw == 1:
        cols = np.ascontiguousarray(xp[:, ::stride, ::stride, :][:, :ho, :wo, :])
    else:
        cols = np.empty((b, ho, wo, kh, kw, cin), dtype=xd.dtype)
        for i, j, view in _windows(xp, kh, kw, stride, ho, wo):
            cols[:, :, :, i, j, :] = view
    k = kh * kw * cin
    cols2 = cols.reshape(-1, k)
    w2 = weight.data.reshape(k, cout)
    out = cols2 @ w2
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(b, ho, wo, kh, kw, cin)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i, j, view in _windows(gxp, kh, kw, stride, ho, wo):
                view += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, back)


def pool2d(x: Tensor, kind: str, k: int, stride: int | None = None) -> Tensor:
    """Max or average pooling over ``k x k`` windows (no padding)."""
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ValueError("pool window and stride must be >= 1")
    b, h, w, c = x.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} larger than input {h}x{w}")
    ho, wo = _out_dim(h, k, stride, 0), _out_dim(w, k, stride, 0)
    xd = x.data
    if kind == "avg":
        out = np.zeros((b, ho, wo, c), dtype=xd.dtype)
        for _, _, view in _windows(xd, k, k, stride, ho, wo):
            out += view
        out /= k * k

        def back(g):
            gx = np.zeros_like(xd)
            gk = g / (k * k)
            for _, _, view in _windows(gx, k, k, stride, ho, wo):
                view += gk
            return (gx,)

        return _make(out, (x,), back)
    if kind == "max":
        out = np.full((b, ho, wo, c), -np.inf, dtype=xd.dtype)
        arg = np.zeros((b, ho, wo, c), dtype=np.int64)
        for t, (_, _, view) in enumerate(_windows(xd, k, k, stride, ho, wo)):
            better = view > out
            out = np.where(better, view, out)
            arg[better] = t

        def back(g):
            gx = np.zeros_like(xd)
            for t, (_, _, view) in enumerate(_windows(gx, k, k, stride, ho, wo)):
                view += np.where(arg == t, g, 0)
            return (gx,)

        return _make(out, (x,), back)
    raise ValueError(f"unknown pool kind {kind!r}")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gamma``/``beta``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out.astype(xd.dtype), (x, gamma, beta), back)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over ``B, H, W``.

    In training mode the batch statistics normalise the input and the
    running buffers are updated in place as ``(1 - m) * old + m * batch``
    (``batch`` is the biased variance used for normalisation).
    """
    xd = x.data
    axes = (0, 1, 2)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean) * inv
        out = (xhat * gamma.data + beta.data).astype(xd.dtype)

        def back_eval(g):
            gx = g * (gamma.data * inv) if x.requires_grad else None
            gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gb = g.sum(axis=axes) if beta.requires_grad else None
            return gx, gg, gb

        return _make(out, (x, gamma, beta), back_eval)

    n = xd.shape[0] * xd.shape[1] * xd.shape[2]
    if n == 1:
        raise DegenerateBatchError("batch-norm train mode needs more than one value per channel")
    mu = xd.mean(axis=axes)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).astype(xd.dtype)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var

    def back(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / n * (n * gh - gh.sum(axis=axes) - xhat * (gh * xhat).sum(axis=axes))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the last axis; ``weight`` is ``[d_in, d_out]``."""
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear expects trailing dim {din}, got {x.shape[-1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out = x2 @ weight.data
    if bias is not None:
        if bias.shape != (dout,):
            raise ShapeError(f"bias shape {list(bias.shape)} != [{dout}]")
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ weight.data.T).reshape(*lead, din) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out.reshape(*lead, dout), parents, back)


def global_avg_pool(x: Tensor) -> Tensor:
    """``[B, H, W, C] -> [B, C]`` spatial mean."""
    _, h, w, _ = x.shape
    return tsum(x, axis=(1, 2)) * (1.0 / (h * w))


# -- modules -------------------------------------------------------------------


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


class Module:
    """Minimal container: parameters, buffers and child modules found by attribute walk."""

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{name}", buf
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: shape {list(arr.shape)} != {list(p.shape)}")
            p.data = arr.astype(p.dtype).copy()
        for name, buf in bufs.items():
            buf[...] = np.asarray(state[name]).reshape(buf.shape)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name, buf in getattr(m, "_buffers", {}).items():
                m._buffers[name] = buf.astype(dtype)
        return self


@dataclass
class ConvParams:
    kernel: int
    c_in: int
    c_out: int
    stride: int = 1
    padding: int = 0


class Conv2d(Module):
    def __init__(self, p: ConvParams, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        if p.kernel < 1 or p.stride < 1 or p.padding < 0:
            raise ValueError(f"invalid conv params {p}")
        fan_in = p.kernel * p.kernel * p.c_in
        std = np.sqrt(2.0 / fan_in)
        self.cfg = p
        self.weight = Parameter(rng.normal(0.0, std, (p.kernel, p.kernel, p.c_in, p.c_out)), dtype=dtype)
        self.bias = Parameter(np.zeros(p.c_out), dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.cfg.stride, self.cfg.padding)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        c = self.cfg
        return _out_dim(h, c.kernel, c.stride, c.padding), _out_dim(w, c.kernel, c.stride, c.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.gamma = Parameter(np.ones(channels), dtype=dtype)
        self.beta = Parameter(np.zeros(channels), dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._buffers = {"running_mean": np.zeros(channels, dtype=dtype),
                         "running_var": np.ones(channels, dtype=dtype)}

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm2d(x, self.gamma, self.beta, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = LN_EPS):
        self.gamma = Parameter(np.ones(dim), dtype=dtype)
        self.beta = Parameter(np.zeros(dim), dtype=dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 std: float | None = None):
        if std is None:
            bound = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-bound, bound, (d_in, d_out))
        else:
            w = rng.normal(0.0, std, (d_in, d_out))
        self.weight = Parameter(w, dtype=dtype)
        self.bias = Parameter(np.zeros(d_out), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
