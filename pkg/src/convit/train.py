"""Optimisation, augmentation, losses and the two-stage training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .branch import BoundingBox, HumanBranch
from .data import Dataset, target_vector
from .model import ConViT
from .nn import Parameter
from .tensor import Tensor, _make, _stable_sigmoid, backward, log_softmax, no_grad, softmax
from .vit import ConfigError

logger = logging.getLogger(__name__)

LOSS_KINDS = ("softmax_ce", "sigmoid_bce")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-5
    batch_size: int = 16
    epochs: int = 30
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    mixup_alpha: float = 0.4
    crop_keep_fraction: float = 0.7
    seed: int = 0
    loss_kind: str = "softmax_ce"
    use_mixup: bool = True
    use_crop: bool = True
    flip_prob: float = 0.5
    # label permutation applied on horizontal flip (None: labels are flip-invariant)
    flip_class_map: list[int] | None = None
    # crop window (h, w) before resizing back to the model input; None = 90% of the image side
    crop_hw: tuple[int, int] | None = None

    def __post_init__(self):
        for name in ("base_lr", "momentum", "lr_decay_factor", "mixup_alpha"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0 or self.lr_decay_every < 1:
            raise ConfigError("epochs must be >= 0 and lr_decay_every >= 1")
        if not 0 < self.crop_keep_fraction <= 1:
            raise ConfigError("crop_keep_fraction must lie in (0, 1]")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.crop_hw is not None:
            self.crop_hw = tuple(self.crop_hw)


# -- optimiser -----------------------------------------------------------------


def sgd_step(w: np.ndarray, g: np.ndarray, v: np.ndarray, lr: float, momentum: float,
             weight_decay: float) -> tuple[np.ndarray, np.ndarray]:
    """One momentum-SGD update with L2 weight decay folded into the gradient."""
    g = g + weight_decay * w
    v = momentum * v + g
    return w - lr * v, v


class SGD:
    def __init__(self, params: list[Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            w, v = sgd_step(p.data, g, self.velocity[i], lr, self.momentum, self.weight_decay)
            p.data = w.astype(p.dtype, copy=False)
            self.velocity[i] = v.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.base_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


# -- augmentation --------------------------------------------------------------


def mixup(x1, y1, x2, y2, alpha: float, rng: np.random.Generator, lam: float | None = None):
    """Blend two samples and their targets with ``lam ~ Beta(alpha, alpha)``."""
    if alpha <= 0:
        raise ConfigError("mixup alpha must be > 0")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    x1, x2 = np.asarray(x1), np.asarray(x2)
    y1, y2 = np.asarray(y1), np.asarray(y2)
    if x1.shape != x2.shape or y1.shape != y2.shape:
        raise ValueError("mixup pairs must share shapes")
    if lam == 1.0:
        return x1.copy(), y1.copy(), lam
    return lam * x1 + (1 - lam) * x2, lam * y1 + (1 - lam) * y2, lam


def _crop_ratio(box: BoundingBox, x: float, y: float, w: int, h: int) -> float:
    return box.intersection_area(BoundingBox(x, y, x + w, y + h)) / box.area


def random_crop_keep_box(image: np.ndarray, box: BoundingBox, out_hw: tuple[int, int],
                         keep_fraction: float, rng: np.random.Generator, max_attempts: int = 1000,
                         return_info: bool = False):
    """Random ``out_hw`` crop keeping at least ``keep_fraction`` of ``box``'s area.

    Origins are drawn uniformly and rejected until the criterion holds; after
    ``max_attempts`` rejections the centre crop is used instead. The returned box
    is the visible part of ``box`` in crop coordinates (None if nothing is visible).
    With ``return_info`` the crop origin ``(x, y)`` and an accepted flag are
    appended to the result.
    """
    h, w = image.shape[:2]
    oh, ow = out_hw
    if oh > h or ow > w or oh < 1 or ow < 1:
        raise ValueError(f"crop {out_hw} does not fit image {h}x{w}")
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    accepted = False
    x0 = y0 = 0
    if (oh, ow) == (h, w):
        accepted = True
    else:
        for _ in range(max_attempts):
            y0 = int(rng.integers(0, h - oh + 1))
            x0 = int(rng.integers(0, w - ow + 1))
            if _crop_ratio(box, x0, y0, ow, oh) >= keep_fraction:
                accepted = True
                break
        if not accepted:
            y0, x0 = (h - oh) // 2, (w - ow) // 2
    crop = image[y0:y0 + oh, x0:x0 + ow].copy()
    ix0, iy0 = max(box.x_min, x0), max(box.y_min, y0)
    ix1, iy1 = min(box.x_max, x0 + ow), min(box.y_max, y0 + oh)
    new_box = BoundingBox(ix0 - x0, iy0 - y0, ix1 - x0, iy1 - y0) if ix1 > ix0 and iy1 > iy0 else None
    if return_info:
        return crop, new_box, (x0, y0), accepted
    return crop, new_box


def horizontal_flip(image: np.ndarray, box: BoundingBox | None, rng: np.random.Generator | None,
                    p: float = 0.5, force: bool | None = None):
    """Mirror columns with probability ``p``; returns ``(image, box, flipped)``."""
    flipped = force if force is not None else bool(rng.random() < p)
    if not flipped:
        return image, box, False
    w = image.shape[1]
    out = np.ascontiguousarray(image[:, ::-1])
    if box is not None:
        box = BoundingBox(w - box.x_max, box.y_min, w - box.x_min, box.y_max)
    return out, box, True


def resize_nearest(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    h, w = image.shape[:2]
    oh, ow = out_hw
    rows = (np.arange(oh) * h) // oh
    cols = (np.arange(ow) * w) // ow
    return image[rows][:, cols]


def scale_box(box: BoundingBox, sx: float, sy: float) -> BoundingBox:
    return BoundingBox(box.x_min * sx, box.y_min * sy, box.x_max * sx, box.y_max * sy)


# -- losses --------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    t = Tensor._wrap(np.asarray(targets, dtype=logits.dtype))
    return -(log_softmax(logits, axis=-1) * t).sum(axis=-1).mean()


def sigmoid_binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE in the stable ``max(z,0) - z*t + log1p(exp(-|z|))`` form."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    return _make(np.array([per.mean()], dtype=z.dtype), (logits,),
                 lambda g: (g.reshape(()) * (_stable_sigmoid(z) - t) / n,))


def loss(logits: Tensor, targets: np.ndarray, kind: str) -> Tensor:
    if kind == "softmax_ce":
        return softmax_cross_entropy(logits, targets)
    if kind == "sigmoid_bce":
        return sigmoid_binary_cross_entropy(logits, targets)
    raise ValueError(f"unknown loss kind {kind!r}")


def scores_from_logits(logits: np.ndarray, kind: str) -> np.ndarray:
    if kind == "softmax_ce":
        return softmax(Tensor._wrap(np.asarray(logits, dtype=np.float64)), axis=-1).data
    return _stable_sigmoid(np.asarray(logits, dtype=np.float64))


# -- training loops ------------------------------------------------------------


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [format_log_line(e, lr, l) for e, lr, l in zip(self.epochs, self.lrs, self.losses)]


def format_log_line(epoch: int, lr: float, value: float) -> str:
    return f"epoch {epoch} lr {lr!r} loss {value!r}"


def _augment(sample_image: np.ndarray, box: BoundingBox | None, labels, cfg: TrainConfig,
             input_hw: tuple[int, int], rng: np.random.Generator):
    """Crop (box-preserving) then flip a single image; returns ``(image, box, labels)``."""
    image = sample_image
    h, w = image.shape[:2]
    if cfg.use_crop and box is not None:
        ch, cw = cfg.crop_hw or (max(1, int(round(0.9 * h))), max(1, int(round(0.9 * w))))
        image, box = random_crop_keep_box(image, box, (ch, cw), cfg.crop_keep_fraction, rng)
        if (ch, cw) != tuple(input_hw):
            image = resize_nearest(image, input_hw)
            if box is not None:
                box = scale_box(box, input_hw[1] / cw, input_hw[0] / ch)
    elif image.shape[:2] != tuple(input_hw):
        image = resize_nearest(image, input_hw)
        if box is not None:
            box = scale_box(box, input_hw[1] / w, input_hw[0] / h)
    if cfg.flip_prob > 0:
        image, box, flipped = horizontal_flip(image, box, rng, cfg.flip_prob)
        if flipped and cfg.flip_class_map is not None:
            labels = tuple(cfg.flip_class_map[lab] for lab in labels)
    return image, box, labels


def _batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _emit(log: TrainLog, epoch: int, lr: float, value: float, sink: TextIO | None,
          on_epoch: Callable | None) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"loss became non-finite at epoch {epoch}")
    log.epochs.append(epoch)
    log.lrs.append(lr)
    log.losses.append(value)
    line = format_log_line(epoch, lr, value)
    logger.debug(line)
    if sink is not None:
        sink.write(line + "\n")
        sink.flush()
    if on_epoch is not None:
        on_epoch(epoch, value)


def train(model: ConViT, dataset: Dataset, cfg: TrainConfig, sink: TextIO | None = None,
          on_epoch: Callable | None = None) -> TrainLog:
    """Stage 1: train the whole ConViT on image-level labels."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    k = model.cfg.num_classes
    input_hw = model.cfg.input_hw
    opt = SGD([p for p in model.parameters() if p.requires_grad], cfg.momentum, cfg.weight_decay)
    log = TrainLog()
    model.train()
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(n)
        total, count = 0.0, 0
        for bi, idx in enumerate(_batches(n, cfg.batch_size, order)):
            images, targets = [], []
            for i in idx:
                s = dataset.samples[i]
                rng = np.random.default_rng([cfg.seed, epoch, 1, int(i)])
                box = s.persons[0][0] if s.persons else None
                img, _, labels = _augment(s.image, box, s.labels, cfg, input_hw, rng)
                images.append(img)
                targets.append(target_vector(labels, k, cfg.loss_kind))
            x = model.preprocess(np.stack(images)).data
            y = np.stack(targets)
            if cfg.use_mixup:
                mrng = np.random.default_rng([cfg.seed, epoch, 2, bi])
                perm = mrng.permutation(len(idx))
                x, y, _ = mixup(x, y, x[perm], y[perm], cfg.mixup_alpha, mrng)
            out = model(Tensor._wrap(x.astype(model.head.weight.dtype)))
            value = loss(out, y, cfg.loss_kind)
            opt.zero_grad()
            backward(value)
            opt.step(lr)
            total += value.item() * len(idx)
            count += len(idx)
        _emit(log, epoch, lr, total / count, sink, on_epoch)
    model.eval()
    return log


def person_items(dataset: Dataset) -> list[tuple[int, BoundingBox, int]]:
    """Flatten to ``(sample_index, box, label)`` per listed person."""
    return [(i, box, lab) for i, s in enumerate(dataset.samples) for box, lab in s.persons]


def train_branch(model: ConViT, branch: HumanBranch, dataset: Dataset, cfg: TrainConfig,
                 sink: TextIO | None = None, on_epoch: Callable | None = None) -> TrainLog:
    """Stage 2: freeze ConViT, train the person branch on RoI-pooled backbone features.

    Mixup, when enabled, blends pooled region features rather than images,
    since two images' person boxes do not align.
    """
    items = person_items(dataset)
    if not items:
        raise ValueError("dataset lists no persons for branch training")
    k = branch.cfg.num_classes
    input_hw = model.cfg.input_hw
    stride = model.cfg.backbone.total_stride
    flags = [p.requires_grad for p in model.parameters()]
    model.eval()
    model.requires_grad_(False)
    model.zero_grad()
    opt = SGD(branch.parameters(), cfg.momentum, cfg.weight_decay)
    log = TrainLog()
    branch.train()
    n = len(items)
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(epoch, cfg)
            order = np.random.default_rng([cfg.seed, epoch, 3]).permutation(n)
            total, count = 0.0, 0
            for bi, idx in enumerate(_batches(n, cfg.batch_size, order)):
                images, boxes, targets = [], [], []
                for j in idx:
                    si, box, lab = items[j]
                    rng = np.random.default_rng([cfg.seed, epoch, 4, int(j)])
                    img, new_box, labels = _augment(dataset.samples[si].image, box, (lab,), cfg,
                                                    input_hw, rng)
                    images.append(img)
                    boxes.append(new_box if new_box is not None else box)
                    targets.append(target_vector(labels, k, cfg.loss_kind))
                with no_grad():
                    fm = model.backbone_forward(model.preprocess(np.stack(images)))
                    region = branch.pool(fm, boxes, stride).data
                y = np.stack(targets)
                if cfg.use_mixup:
                    mrng = np.random.default_rng([cfg.seed, epoch, 5, bi])
                    perm = mrng.permutation(len(idx))
                    region, y, _ = mixup(region, y, region[perm], y[perm], cfg.mixup_alpha, mrng)
                out = branch.classify_region(Tensor._wrap(region.astype(branch.head.weight.dtype)))
                value = loss(out, y, cfg.loss_kind)
                opt.zero_grad()
                backward(value)
                opt.step(lr)
                total += value.item() * len(idx)
                count += len(idx)
            _emit(log, epoch, lr, total / count, sink, on_epoch)
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad = flag
        branch.eval()
    return log


# -- inference helpers ---------------------------------------------------------


def predict_logits(model: ConViT, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(model.preprocess(images[i:i + batch_size])).data)
    return np.concatenate(out).astype(np.float64)


def predict_branch_logits(model: ConViT, branch: HumanBranch, dataset: Dataset,
                          batch_size: int = 32) -> tuple[np.ndarray, list[tuple[int, BoundingBox, int]]]:
    """Per-person branch logits, in ``person_items`` order."""
    items = person_items(dataset)
    model.eval()
    branch.eval()
    stride = model.cfg.backbone.total_stride
    out = []
    with no_grad():
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            imgs = np.stack([dataset.samples[si].image for si, _, _ in chunk])
            fm = model.backbone_forward(model.preprocess(imgs))
            out.append(branch(fm, [b for _, b, _ in chunk], stride).data)
    if not out:
        return np.zeros((0, branch.cfg.num_classes)), items
    return np.concatenate(out).astype(np.float64), items


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((np.argmax(logits, axis=1) == np.asarray(labels)).mean())
