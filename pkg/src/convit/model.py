"""ConViT: residual CNN backbone -> ViT (full grid) -> 2x2 avg pool -> ViT (half grid) -> GAP -> fc.

Also hosts the Grad-CAM and channel-mean heatmap introspection helpers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import BatchNorm2d, Conv2d, ConvParams, Linear, Module, global_avg_pool, pool2d
from .tensor import ShapeError, Tensor, grad, no_grad, relu
from .vit import ConfigError, ModifiedViT, ViTConfig


@dataclass
class BackboneConfig:
    in_channels: int = 3
    stem_channels: int = 16
    stem_stride: int = 2
    # (block_count, channels); each stage opens with a stride-2 block
    stages: list[tuple[int, int]] = field(default_factory=lambda: [(1, 16), (1, 32), (1, 64)])

    def __post_init__(self):
        self.stages = [tuple(int(v) for v in s) for s in self.stages]
        if not self.stages or any(n < 1 or c < 1 for n, c in self.stages):
            raise ConfigError("backbone stages need block_count >= 1 and channels >= 1")

    @property
    def out_channels(self) -> int:
        return self.stages[-1][1]

    @property
    def total_stride(self) -> int:
        return self.stem_stride * 2 ** len(self.stages)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        # 3x3 / pad 1 convs: out = (n - 1) // stride + 1
        h, w = (h - 1) // self.stem_stride + 1, (w - 1) // self.stem_stride + 1
        for _ in self.stages:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w


@dataclass
class ModelConfig:
    input_hw: tuple[int, int] = (128, 128)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    vit_a: ViTConfig = field(default_factory=lambda: ViTConfig(seq_h=8, seq_w=8))
    vit_b: ViTConfig = field(default_factory=lambda: ViTConfig(seq_h=4, seq_w=4))
    num_classes: int = 4
    vit_enabled: bool = True
    pixel_mean: tuple[float, float, float] = (127.5, 127.5, 127.5)
    pixel_std: tuple[float, float, float] = (64.0, 64.0, 64.0)

    def __post_init__(self):
        self.input_hw = tuple(self.input_hw)
        self.pixel_mean = tuple(self.pixel_mean)
        self.pixel_std = tuple(self.pixel_std)
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        self.check_geometry()

    def check_geometry(self) -> list[tuple[str, tuple[int, ...]]]:
        """Validate the stage-by-stage shape chain and return it (batch dim omitted)."""
        gh, gw = self.backbone.output_hw(*self.input_hw)
        c = self.backbone.out_channels
        if gh * self.backbone.total_stride != self.input_hw[0] or gw * self.backbone.total_stride != self.input_hw[1]:
            raise ConfigError(f"input {self.input_hw} is not a multiple of backbone stride {self.backbone.total_stride}")
        chain: list[tuple[str, tuple[int, ...]]] = [("image", (*self.input_hw, self.backbone.in_channels)),
                                                    ("backbone", (gh, gw, c))]
        if self.vit_enabled:
            a, b = self.vit_a, self.vit_b
            if (a.seq_h, a.seq_w) != (gh, gw) or a.embed_dim != c:
                raise ConfigError(f"vit_a grid {a.seq_h}x{a.seq_w}x{a.embed_dim} != backbone {gh}x{gw}x{c}")
            if gh % 2 or gw % 2:
                raise ConfigError("backbone grid must be even to halve between the ViTs")
            if (b.seq_h, b.seq_w) != (gh // 2, gw // 2) or b.embed_dim != c:
                raise ConfigError(f"vit_b grid {b.seq_h}x{b.seq_w} != half grid {gh // 2}x{gw // 2}")
            chain += [("vit_a", (gh, gw, c)), ("pool", (gh // 2, gw // 2, c)), ("vit_b", (gh // 2, gw // 2, c))]
        chain += [("gap", (c,)), ("logits", (self.num_classes,))]
        return chain

    @property
    def feature_grid(self) -> tuple[int, int]:
        return self.backbone.output_hw(*self.input_hw)


class ResidualBlock(Module):
    """Two 3x3 conv-BN layers with an identity or 1x1 projection skip."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng, dtype=np.float32):
        self.conv1 = Conv2d(ConvParams(3, c_in, c_out, stride, 1), rng, dtype, bias=False)
        self.bn1 = BatchNorm2d(c_out, dtype)
        self.conv2 = Conv2d(ConvParams(3, c_out, c_out, 1, 1), rng, dtype, bias=False)
        self.bn2 = BatchNorm2d(c_out, dtype)
        if stride != 1 or c_in != c_out:
            self.skip = Conv2d(ConvParams(1, c_in, c_out, stride, 0), rng, dtype, bias=False)
            self.skip_bn = BatchNorm2d(c_out, dtype)
        else:
            self.skip = None
            self.skip_bn = None

    def forward(self, x: Tensor) -> Tensor:
        out = relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        short = x if self.skip is None else self.skip_bn(self.skip(x))
        return relu(out + short)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.stem = Conv2d(ConvParams(3, cfg.in_channels, cfg.stem_channels, cfg.stem_stride, 1),
                           rng, dtype, bias=False)
        self.stem_bn = BatchNorm2d(cfg.stem_channels, dtype)
        blocks = []
        c_prev = cfg.stem_channels
        for count, channels in cfg.stages:
            for i in range(count):
                blocks.append(ResidualBlock(c_prev, channels, 2 if i == 0 else 1, rng, dtype))
                c_prev = channels
        self.blocks = blocks

    def forward(self, image: Tensor) -> Tensor:
        x = relu(self.stem_bn(self.stem(image)))
        for blk in self.blocks:
            x = blk(x)
        return x


class ConViT(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone, rng, dtype)
        if cfg.vit_enabled:
            self.vit_a = ModifiedViT(cfg.vit_a, rng, dtype)
            self.vit_b = ModifiedViT(cfg.vit_b, rng, dtype)
        else:
            self.vit_a = self.vit_b = None
        self.head = Linear(cfg.backbone.out_channels, cfg.num_classes, rng, dtype, std=0.01)
        self._last_shapes: list[tuple[str, tuple[int, ...]]] = []

    @property
    def last_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return list(self._last_shapes)

    def backbone_forward(self, image: Tensor) -> Tensor:
        h, w = image.shape[1:3]
        if (h, w) != self.cfg.input_hw or image.shape[3] != self.cfg.backbone.in_channels:
            raise ShapeError(f"model expects {self.cfg.input_hw} x {self.cfg.backbone.in_channels}, "
                             f"got {list(image.shape[1:])}")
        return self.backbone(image)

    def target_features(self, image: Tensor) -> Tensor:
        """The final feature map: ViT-B output, or the backbone map when the ViTs are ablated."""
        shapes = [("image", image.shape[1:])]
        x = self.backbone_forward(image)
        shapes.append(("backbone", x.shape[1:]))
        if self.cfg.vit_enabled:
            x = self.vit_a(x)
            shapes.append(("vit_a", x.shape[1:]))
            x = pool2d(x, "avg", 2, 2)
            shapes.append(("pool", x.shape[1:]))
            x = self.vit_b(x)
            shapes.append(("vit_b", x.shape[1:]))
        self._last_shapes = shapes
        return x

    def classify(self, target: Tensor) -> Tensor:
        pooled = global_avg_pool(target)
        logits = self.head(pooled)
        self._last_shapes += [("gap", pooled.shape[1:]), ("logits", logits.shape[1:])]
        return logits

    def forward(self, image: Tensor) -> Tensor:
        return self.classify(self.target_features(image))

    def preprocess(self, images: np.ndarray) -> Tensor:
        """uint8 ``[B, H, W, 3]`` -> normalised float tensor in the model's dtype."""
        dtype = self.head.weight.dtype
        mean = np.asarray(self.cfg.pixel_mean, dtype=dtype)
        std = np.asarray(self.cfg.pixel_std, dtype=dtype)
        return Tensor._wrap((np.asarray(images, dtype=dtype) - mean) / std)


def convit_forward(image: Tensor, model: ConViT) -> Tensor:
    return model(image)


@dataclass
class Heatmap:
    values: np.ndarray
    source: str
    layer: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def grad_cam(model, image: Tensor, class_index: int) -> Heatmap:
    """Gradient-weighted class activation map over the model's final feature map.

    ``model`` must provide ``target_features(image)`` and ``classify(target)``;
    channel weights are the spatial mean of d(logit)/d(map), and the map is
    ``relu(sum_k w_k * A_k)``. Only the first image of the batch is used.
    """
    cfg = getattr(model, "cfg", None)
    num_classes = getattr(cfg, "num_classes", None)
    if class_index < 0 or (num_classes is not None and class_index >= num_classes):
        raise IndexError(f"class index {class_index} out of range")
    with no_grad():
        target = model.target_features(image[0:1] if image.shape[0] > 1 else image)
    leaf = Tensor._wrap(target.data)
    leaf.requires_grad = True
    logits = model.classify(leaf)
    if class_index >= logits.shape[1]:
        raise IndexError(f"class index {class_index} out of range")
    (g,) = grad(logits[0, class_index], [leaf])
    weights = g[0].mean(axis=(0, 1))
    cam = np.maximum((target.data[0] * weights).sum(axis=-1), 0.0)
    return Heatmap(cam, "grad_cam", "vit_b" if getattr(cfg, "vit_enabled", False) else "final")


def channel_mean_heatmap(fm: Tensor | np.ndarray) -> Heatmap:
    """Per-pixel mean over channels of a ``[H, W, C]`` (or ``[1, H, W, C]``) map; not clamped."""
    arr = fm.data if isinstance(fm, Tensor) else np.asarray(fm)
    if arr.ndim == 4:
        arr = arr[0]
    return Heatmap(arr.mean(axis=-1), "channel_mean")
