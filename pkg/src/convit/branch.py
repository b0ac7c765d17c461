"""Person-region classification branch and score fusion.

The branch RoI-pools the target person's box out of the frozen backbone map,
runs two grid-bound ViTs over it, and classifies the result. Its class
probabilities are blended with the image-level ConViT probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Linear, Module, global_avg_pool, pool2d
from .tensor import ShapeError, Tensor, _make, stack
from .vit import ConfigError, ModifiedViT, ViTConfig


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def intersection_area(self, other: "BoundingBox") -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        return max(w, 0.0) * max(h, 0.0)

    def intersects(self, width: float, height: float) -> bool:
        return self.x_min < width and self.y_min < height and self.x_max > 0 and self.y_max > 0


@dataclass(frozen=True)
class FusionWeights:
    w_convit: float
    w_human: float

    def __post_init__(self):
        if self.w_convit < 0 or self.w_human < 0 or abs(self.w_convit + self.w_human - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must be nonnegative and sum to 1, got {self}")


@dataclass
class BranchConfig:
    roi_out: tuple[int, int] = (6, 4)
    vit_r1: ViTConfig = field(default_factory=lambda: ViTConfig(seq_h=6, seq_w=4))
    vit_r2: ViTConfig = field(default_factory=lambda: ViTConfig(seq_h=3, seq_w=2))
    num_classes: int = 4

    def __post_init__(self):
        self.roi_out = tuple(self.roi_out)
        self.check_geometry()

    def check_geometry(self) -> list[tuple[str, tuple[int, ...]]]:
        h, w = self.roi_out
        if h % 2 or w % 2:
            raise ConfigError(f"roi_out {h}x{w} must be even in both dims")
        r1, r2 = self.vit_r1, self.vit_r2
        if (r1.seq_h, r1.seq_w) != (h, w):
            raise ConfigError(f"vit_r1 grid {r1.seq_h}x{r1.seq_w} != roi_out {h}x{w}")
        if (r2.seq_h, r2.seq_w) != (h // 2, w // 2) or r2.embed_dim != r1.embed_dim:
            raise ConfigError(f"vit_r2 grid {r2.seq_h}x{r2.seq_w} != {h // 2}x{w // 2}")
        c = r1.embed_dim
        return [("roi", (h, w, c)), ("vit_r1", (h, w, c)), ("pool", (h // 2, w // 2, c)),
                ("vit_r2", (h // 2, w // 2, c)), ("gap", (c,)), ("logits", (self.num_classes,))]


# -- RoI pooling ---------------------------------------------------------------


def roi_cells(box: BoundingBox, grid_hw: tuple[int, int], stride: int) -> tuple[int, int, int, int]:
    """Map an image-space box to feature cells ``[y0, y1) x [x0, x1)``."""
    gh, gw = grid_hw
    x0 = min(max(math.floor(box.x_min / stride), 0), gw)
    y0 = min(max(math.floor(box.y_min / stride), 0), gh)
    x1 = min(max(math.ceil(box.x_max / stride), 0), gw)
    y1 = min(max(math.ceil(box.y_max / stride), 0), gh)
    if x0 >= gw or y0 >= gh or x1 <= 0 or y1 <= 0:
        raise DegenerateBoxError(f"box {box.as_tuple()} misses the {gh}x{gw} feature grid")
    x1 = max(x1, x0 + 1)
    y1 = max(y1, y0 + 1)
    return y0, y1, x0, x1


def _bin_ranges(lo: int, hi: int, bins: int) -> list[tuple[int, int]]:
    """Cells whose centres fall in each of ``bins`` equal slices of ``[lo, hi)``.

    A slice containing no centre snaps to the cell under its midpoint.
    """
    size = (hi - lo) / bins
    out = []
    for j in range(bins):
        a, b = lo + j * size, lo + (j + 1) * size
        start, stop = math.ceil(a - 0.5), math.ceil(b - 0.5)
        if stop <= start:
            start = min(int(math.floor((a + b) / 2)), hi - 1)
            stop = start + 1
        out.append((start, stop))
    return out


def roi_pool(fm: Tensor, box: BoundingBox, out_hw: tuple[int, int], stride: int) -> Tensor:
    """Max-pool a box region of a ``[H, W, C]`` map into ``[out_h, out_w, C]``."""
    if fm.ndim != 3:
        raise ShapeError(f"roi_pool expects [H,W,C], got {list(fm.shape)}")
    h, w, c = fm.shape
    y0, y1, x0, x1 = roi_cells(box, (h, w), stride)
    oh, ow = out_hw
    rows, cols = _bin_ranges(y0, y1, oh), _bin_ranges(x0, x1, ow)
    data = fm.data
    out = np.empty((oh, ow, c), dtype=data.dtype)
    src = np.empty((oh, ow, c), dtype=np.int64)
    chan = np.arange(c)
    for i, (ra, rb) in enumerate(rows):
        for j, (ca, cb) in enumerate(cols):
            region = data[ra:rb, ca:cb, :].reshape(-1, c)
            k = region.argmax(axis=0)
            out[i, j] = region[k, chan]
            bw = cb - ca
            src[i, j] = (ra + k // bw) * w + (ca + k % bw)

    def back(g):
        gx = np.zeros((h * w, c), dtype=data.dtype)
        np.add.at(gx, (src.reshape(-1), np.tile(chan, oh * ow)), g.reshape(-1))
        return (gx.reshape(h, w, c),)

    return _make(out, (fm,), back)


def roi_pool_batch(fm: Tensor, boxes: list[BoundingBox], out_hw: tuple[int, int], stride: int) -> Tensor:
    """Pool one box per batch element of ``[B, H, W, C]``."""
    if fm.shape[0] != len(boxes):
        raise ShapeError(f"{fm.shape[0]} maps but {len(boxes)} boxes")
    return stack([roi_pool(fm[i], box, out_hw, stride) for i, box in enumerate(boxes)], axis=0)


class HumanBranch(Module):
    def __init__(self, cfg: BranchConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vit_r1 = ModifiedViT(cfg.vit_r1, rng, dtype)
        self.vit_r2 = ModifiedViT(cfg.vit_r2, rng, dtype)
        self.head = Linear(cfg.vit_r1.embed_dim, cfg.num_classes, rng, dtype, std=0.01)
        self._last_shapes: list[tuple[str, tuple[int, ...]]] = []

    @property
    def last_shapes(self):
        return list(self._last_shapes)

    def pool(self, fm: Tensor, boxes: list[BoundingBox], stride: int) -> Tensor:
        return roi_pool_batch(fm, boxes, self.cfg.roi_out, stride)

    def classify_region(self, region: Tensor) -> Tensor:
        shapes = [("roi", region.shape[1:])]
        x = self.vit_r1(region)
        shapes.append(("vit_r1", x.shape[1:]))
        x = pool2d(x, "avg", 2, 2)
        shapes.append(("pool", x.shape[1:]))
        x = self.vit_r2(x)
        shapes.append(("vit_r2", x.shape[1:]))
        pooled = global_avg_pool(x)
        logits = self.head(pooled)
        shapes += [("gap", pooled.shape[1:]), ("logits", logits.shape[1:])]
        self._last_shapes = shapes
        return logits

    def forward(self, fm: Tensor, boxes: list[BoundingBox], stride: int) -> Tensor:
        return self.classify_region(self.pool(fm, boxes, stride))


def human_branch_forward(fm: Tensor, boxes: list[BoundingBox], branch: HumanBranch, stride: int) -> Tensor:
    return branch(fm, boxes, stride)


# -- fusion --------------------------------------------------------------------


def fuse_predictions(p_convit, p_human, w: FusionWeights) -> np.ndarray:
    """``w_convit * p_convit + w_human * p_human`` elementwise."""
    a = np.asarray(p_convit, dtype=np.float64)
    b = np.asarray(p_human, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"score shapes differ: {a.shape} vs {b.shape}")
    if w.w_human == 0.0:
        return a.copy()
    if w.w_convit == 0.0:
        return b.copy()
    return w.w_convit * a + w.w_human * b


_PROB_FLOOR = 1e-12


def probability_loss(probs: np.ndarray, targets: np.ndarray, kind: str) -> float:
    """Mean loss of probability predictions (cross-entropy or binary cross-entropy)."""
    p = np.clip(np.asarray(probs, dtype=np.float64), _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    t = np.asarray(targets, dtype=np.float64)
    if kind == "softmax_ce":
        return float(-(t * np.log(p)).sum(axis=-1).mean())
    if kind == "sigmoid_bce":
        return float(-(t * np.log(p) + (1 - t) * np.log(1 - p)).mean())
    raise ValueError(f"unknown loss kind {kind!r}")


def fusion_grid(step: float) -> list[float]:
    n = int(math.floor(1.0 / step + 1e-9))
    grid = [round(i * step, 12) for i in range(n + 1)]
    if grid[-1] < 1.0:
        grid.append(1.0)
    return grid


def search_fusion_weights(preds_convit, preds_human, targets, step: float = 0.01,
                          kind: str = "softmax_ce") -> FusionWeights:
    """Exhaustive scan of ``w_convit`` over ``{0, step, ..., 1}`` minimising the mean loss.

    Ties go to the larger ``w_convit``.
    """
    a = np.asarray(preds_convit, dtype=np.float64)
    b = np.asarray(preds_human, dtype=np.float64)
    if a.size == 0 or len(a) == 0:
        raise ValueError("empty prediction set")
    if not 0 < step <= 0.5:
        raise ValueError("step must lie in (0, 0.5]")
    best_w, best_loss = None, math.inf
    for wc in reversed(fusion_grid(step)):
        w = FusionWeights(wc, 1.0 - wc)
        loss = probability_loss(fuse_predictions(a, b, w), targets, kind)
        if loss < best_loss:
            best_w, best_loss = w, loss
    return best_w
