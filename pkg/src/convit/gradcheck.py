"""Finite-difference verification of every differentiable operation.

Each op is wrapped as ``x -> sum(op(x, fixed...) * R)`` with a fixed random
weighting ``R`` and checked one argument at a time in float64.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .branch import BoundingBox, BranchConfig, HumanBranch, roi_pool
from .model import BackboneConfig, ConViT, ModelConfig
from .tensor import Tensor, finite_diff_check, grad, no_grad
from .train import sigmoid_binary_cross_entropy, softmax_cross_entropy
from .vit import EncoderBlock, ModifiedViT, MultiHeadSelfAttention, ViTConfig

OP_TOL = 1e-4
E2E_TOL = 1e-3
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float
    metric: str = "max_rel_err"

    @property
    def passed(self) -> bool:
        return self.error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} {self.metric} {self.error:.3e} tol {self.tol:.0e}"


def _weighted(fn: Callable[[Tensor], Tensor], weight: np.ndarray) -> Callable[[Tensor], Tensor]:
    w = Tensor._wrap(weight)
    return lambda x: (fn(x) * w).sum()


def check_function(fn, x: np.ndarray, rng: np.random.Generator, eps: float = EPS, kinks=()) -> float:
    with no_grad():
        out_shape = fn(Tensor._wrap(x)).shape
    return finite_diff_check(_weighted(fn, rng.normal(size=out_shape)), Tensor._wrap(x), eps, kinks)


def _min_gap_ok(x: np.ndarray, eps: float) -> bool:
    """True when no two entries are within 10*eps (keeps max/argmax selections stable)."""
    v = np.sort(x.reshape(-1))
    return v.size < 2 or np.min(np.diff(v)) > 10 * eps


def _sample(shape, rng, accept=lambda a: True, tries: int = 100) -> np.ndarray:
    for _ in range(tries):
        x = rng.normal(size=shape)
        if accept(x):
            return x
    raise RuntimeError("could not draw a kink-free input")


OpCase = tuple[str, Callable[[np.random.Generator], list[tuple[Callable, np.ndarray]]]]


def _op_cases() -> list[OpCase]:
    """Each case builds, per trial, a list of (single-argument function, input) pairs."""
    far_from_zero = lambda a: np.all(np.abs(a) > 10 * EPS)  # noqa: E731

    def binary(op, sa, sb):
        def build(rng):
            a, b = rng.normal(size=sa), rng.normal(size=sb)
            return [(lambda x: op(x, Tensor._wrap(b)), a), (lambda x: op(Tensor._wrap(a), x), b)]
        return build

    def unary(op, shape, accept=lambda a: True):
        return lambda rng: [(op, _sample(shape, rng, accept))]

    def matmul_case(sa, sb):
        return binary(T.matmul, sa, sb)

    def div_case(rng):
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
        return [(lambda x: T.div(x, Tensor._wrap(b)), a), (lambda x: T.div(Tensor._wrap(a), x), b)]

    def conv_case(stride, pad, k):
        def build(rng):
            x = rng.normal(size=(2, 5, 5, 3))
            w = rng.normal(size=(k, k, 3, 4))
            b = rng.normal(size=4)
            X, W, B = Tensor._wrap(x), Tensor._wrap(w), Tensor._wrap(b)
            return [(lambda t: nn.conv2d(t, W, B, stride, pad), x),
                    (lambda t: nn.conv2d(X, t, B, stride, pad), w),
                    (lambda t: nn.conv2d(X, W, t, stride, pad), b)]
        return build

    def ln_case(rng):
        x, g, b = rng.normal(size=(2, 3, 8)), rng.normal(size=8), rng.normal(size=8)
        X, G, B = Tensor._wrap(x), Tensor._wrap(g), Tensor._wrap(b)
        return [(lambda t: nn.layer_norm(t, G, B), x), (lambda t: nn.layer_norm(X, t, B), g),
                (lambda t: nn.layer_norm(X, G, t), b)]

    def bn_case(training):
        def build(rng):
            x, g, b = rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4), rng.normal(size=4)
            rm, rv = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)
            X, G, B = Tensor._wrap(x), Tensor._wrap(g), Tensor._wrap(b)

            def f(t, g_=G, b_=B, x_=None):
                return nn.batch_norm2d(t if x_ is None else x_, g_, b_, rm.copy(), rv.copy(), training)
            return [(lambda t: f(t), x), (lambda t: f(X, g_=t), g), (lambda t: f(X, b_=t), b)]
        return build

    def linear_case(rng):
        x, w, b = rng.normal(size=(2, 3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)
        X, W, B = Tensor._wrap(x), Tensor._wrap(w), Tensor._wrap(b)
        return [(lambda t: nn.linear(t, W, B), x), (lambda t: nn.linear(X, t, B), w),
                (lambda t: nn.linear(X, W, t), b)]

    def roi_case(rng):
        x = _sample((8, 8, 3), rng, lambda a: _min_gap_ok(a, EPS))
        x0, y0 = rng.uniform(0, 60, size=2)
        box = BoundingBox(x0, y0, x0 + rng.uniform(20, 68), y0 + rng.uniform(20, 68))
        return [(lambda t: roi_pool(t, box, (3, 2), 16), x)]

    def loss_case(kind):
        def build(rng):
            logits = rng.normal(size=(4, 5))
            if kind == "ce":
                t = rng.dirichlet(np.ones(5), size=4)
                return [(lambda z: softmax_cross_entropy(z, t), logits)]
            t = rng.uniform(0, 1, size=(4, 5))
            return [(lambda z: sigmoid_binary_cross_entropy(z, t), logits)]
        return build

    def module_case(make: Callable[[np.random.Generator], nn.Module], shape):
        def build(rng):
            mod = make(rng).astype(np.float64)
            x = rng.normal(size=shape)
            X = Tensor._wrap(x)
            pairs = [(lambda t: mod(t), x)]
            # key biases shift every score in a row equally, so their gradient is
            # identically zero; see run_zero_grad_checks
            params = [p for n, p in mod.named_parameters() if not n.endswith("k.bias")]
            for p in [params[i] for i in rng.choice(len(params), size=min(4, len(params)), replace=False)]:
                pairs.append((lambda t, p=p: _with_param(mod, p, t, X), p.data.copy()))
            return pairs
        return build

    return [
        ("add", binary(T.add, (3, 4), (3, 4))),
        ("add_broadcast", binary(T.add, (2, 3, 4), (4,))),
        ("sub", binary(T.sub, (3, 4), (1, 4))),
        ("mul", binary(T.mul, (3, 4), (3, 4))),
        ("mul_broadcast", binary(T.mul, (2, 3, 4), (3, 1))),
        ("div", div_case),
        ("scale", unary(lambda x: T.scale(x, -2.5), (3, 4))),
        ("relu", unary(T.relu, (4, 5), far_from_zero)),
        ("gelu", unary(T.gelu, (4, 5))),
        ("exp", unary(T.exp, (4, 5))),
        ("log", lambda rng: [(T.log, rng.uniform(0.5, 3.0, size=(4, 5)))]),
        ("sigmoid", unary(T.sigmoid, (4, 5))),
        ("matmul", matmul_case((3, 4), (4, 2))),
        ("matmul_batched", matmul_case((2, 3, 3, 4), (2, 3, 4, 5))),
        ("matmul_broadcast", matmul_case((2, 3, 4), (4, 5))),
        ("reshape", unary(lambda x: T.reshape(x, (6, 4)), (2, 3, 4))),
        ("transpose", unary(lambda x: T.transpose(x, (2, 0, 1)), (2, 3, 4))),
        ("getitem", unary(lambda x: x[1:, ::2], (3, 4))),
        ("concat", binary(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2))),
        ("stack", binary(lambda a, b: T.stack([a, b], axis=0), (2, 3), (2, 3))),
        ("sum", unary(lambda x: T.tsum(x, axis=1), (3, 4, 2))),
        ("mean", unary(lambda x: T.mean(x, axis=(0, 2)), (3, 4, 2))),
        ("softmax", unary(lambda x: T.softmax(x, axis=-1), (3, 5))),
        ("log_softmax", unary(lambda x: T.log_softmax(x, axis=-1), (3, 5))),
        ("conv2d_3x3_s1_p1", conv_case(1, 1, 3)),
        ("conv2d_3x3_s2_p1", conv_case(2, 1, 3)),
        ("conv2d_1x1_s2", conv_case(2, 0, 1)),
        ("avg_pool2d", unary(lambda x: nn.pool2d(x, "avg", 2, 2), (2, 6, 6, 3))),
        ("max_pool2d", unary(lambda x: nn.pool2d(x, "max", 2, 2), (2, 6, 6, 3),
                             lambda a: _min_gap_ok(a, EPS))),
        ("layer_norm", ln_case),
        ("batch_norm2d_train", bn_case(True)),
        ("batch_norm2d_eval", bn_case(False)),
        ("linear", linear_case),
        ("global_avg_pool", unary(nn.global_avg_pool, (2, 3, 4, 5))),
        ("roi_pool", roi_case),
        ("softmax_cross_entropy", loss_case("ce")),
        ("sigmoid_bce", loss_case("bce")),
        ("multi_head_self_attention",
         module_case(lambda rng: MultiHeadSelfAttention(8, 2, rng), (2, 5, 8))),
        ("encoder_block_x2",
         module_case(lambda rng: _Stack([EncoderBlock(8, 2, 2.0, rng), EncoderBlock(8, 2, 2.0, rng)]),
                     (2, 4, 8))),
        ("vit_forward", module_case(lambda rng: ModifiedViT(ViTConfig(2, 2, 8, 2.0, 3, 2), rng), (2, 3, 2, 8))),
    ]


class _Stack(nn.Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def _with_param(mod: nn.Module, p: nn.Parameter, t: Tensor, x: Tensor) -> Tensor:
    """Run ``mod(x)`` with leaf ``t`` standing in for parameter ``p``."""
    holder, attr = _find_owner(mod, p)
    setattr(holder, attr, t)
    try:
        return mod(x)
    finally:
        setattr(holder, attr, p)


def _find_owner(mod: nn.Module, p: nn.Parameter):
    for m in mod.modules():
        for name, value in vars(m).items():
            if value is p:
                return m, name
    raise KeyError("parameter not owned by module")


def run_zero_grad_checks(seed: int = 0, trials: int = 10) -> list[CheckResult]:
    """Absolute-error check for attention key biases, whose true gradient is zero."""
    rng = np.random.default_rng([seed, 91])
    start = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        mod = MultiHeadSelfAttention(8, 2, rng).astype(np.float64)
        X = Tensor._wrap(rng.normal(size=(2, 5, 8)))
        w = Tensor._wrap(rng.normal(size=(2, 5, 8)))
        f = lambda: (mod(X) * w).sum()  # noqa: E731
        (g,) = grad(f(), [mod.k.bias])
        with no_grad():
            for i in range(mod.k.bias.size):
                orig = mod.k.bias.data[i]
                mod.k.bias.data[i] = orig + EPS
                fp = f().item()
                mod.k.bias.data[i] = orig - EPS
                fm = f().item()
                mod.k.bias.data[i] = orig
                worst = max(worst, abs(g[i] - (fp - fm) / (2 * EPS)), abs(g[i]))
    return [CheckResult("attention_key_bias", worst, OP_TOL, time.perf_counter() - start, "max_abs_err")]


def run_op_suite(seed: int = 0, trials: int = 10) -> list[CheckResult]:
    results = []
    for name, build in _op_cases():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        start = time.perf_counter()
        worst = 0.0
        for _ in range(trials):
            for fn, x in build(rng):
                worst = max(worst, check_function(fn, x, rng))
        results.append(CheckResult(name, worst, OP_TOL, time.perf_counter() - start))
    return results


def _spot_check(forward: Callable[[], Tensor], params: list[nn.Parameter], rng: np.random.Generator,
                count: int, eps: float = EPS) -> float:
    """Compare autodiff and central differences on ``count`` random scalar parameters."""
    out = forward()
    picks = []
    for _ in range(count):
        p = params[int(rng.integers(len(params)))]
        picks.append((p, int(rng.integers(p.size))))
    grads = grad(out, [p for p, _ in picks])
    worst = 0.0
    with no_grad():
        for (p, i), g in zip(picks, grads):
            flat = p.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            fp = forward().item()
            flat[i] = orig - eps
            fm = forward().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = g.reshape(-1)[i]
            worst = max(worst, abs(a - num) / (abs(a) + 1e-8))
    return worst


def tiny_model_config(vit_enabled: bool = True) -> ModelConfig:
    from .vit import ViTConfig as V
    return ModelConfig(input_hw=(32, 32), backbone=BackboneConfig(stem_channels=4, stages=[(1, 4), (1, 8)]),
                       vit_a=V(2, 4, 8, 2.0, 4, 4), vit_b=V(2, 4, 8, 2.0, 2, 2), num_classes=3,
                       vit_enabled=vit_enabled)


def run_end_to_end(seed: int = 0, toy_cfg: ModelConfig | None = None) -> list[CheckResult]:
    """Spot checks of 5 random parameters on the full ConViT and on the person branch."""
    from .config import toy_preset

    results = []
    rng = np.random.default_rng([seed, 77])
    run = toy_preset()
    cfg = toy_cfg or run.model
    start = time.perf_counter()
    model = ConViT(cfg, seed=seed).astype(np.float64).train()
    image = Tensor._wrap(rng.normal(size=(2, *cfg.input_hw, 3)))
    w = rng.normal(size=(2, cfg.num_classes))
    fwd = lambda: (model(image) * Tensor._wrap(w)).sum()  # noqa: E731
    results.append(CheckResult("convit_end_to_end", _spot_check(fwd, model.parameters(), rng, 5),
                               E2E_TOL, time.perf_counter() - start))

    start = time.perf_counter()
    bcfg: BranchConfig = run.branch
    branch = HumanBranch(bcfg, seed=seed).astype(np.float64)
    gh, gw = cfg.feature_grid
    fm = Tensor._wrap(rng.normal(size=(2, gh, gw, bcfg.vit_r1.embed_dim)))
    stride = cfg.backbone.total_stride
    boxes = [BoundingBox(10.0, 5.0, 70.0, 120.0), BoundingBox(40.0, 30.0, 100.0, 90.0)]
    wb = rng.normal(size=(2, bcfg.num_classes))
    fwd_b = lambda: (branch(fm, boxes, stride) * Tensor._wrap(wb)).sum()  # noqa: E731
    results.append(CheckResult("human_branch_end_to_end", _spot_check(fwd_b, branch.parameters(), rng, 5),
                               E2E_TOL, time.perf_counter() - start))
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    return run_op_suite(seed) + run_zero_grad_checks(seed) + run_end_to_end(seed)
