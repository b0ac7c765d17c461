"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .branch import BoundingBox, FusionWeights, HumanBranch, fuse_predictions, probability_loss, \
    search_fusion_weights
from .config import RunConfig, toy_preset
from .data import Dataset, SceneGeometry, SyntheticSpec, synthesize, target_vector
from .model import ConViT, grad_cam
from .train import TrainLog, accuracy, predict_branch_logits, predict_logits, scores_from_logits, train, \
    train_branch


@dataclass
class RunResult:
    model: ConViT
    log: TrainLog
    train_accuracy: float
    test_accuracy: float | None
    seconds: float


def train_and_score(run: RunConfig, train_set: Dataset, test_set: Dataset | None = None, seed: int = 0,
                    vit_enabled: bool = True, epochs: int | None = None, verbose: bool = False) -> RunResult:
    mcfg = dataclasses.replace(run.model, vit_enabled=vit_enabled)
    tcfg = run.train if epochs is None else dataclasses.replace(run.train, epochs=epochs)
    model = ConViT(mcfg, seed=seed)
    cb = (lambda e, v: print(f"  epoch {e} loss {v:.4f}", flush=True)) if verbose else None
    start = time.perf_counter()
    log = train(model, train_set, tcfg, on_epoch=cb)
    seconds = time.perf_counter() - start
    tr = accuracy(predict_logits(model, train_set.images()), train_set.label_array())
    te = None
    if test_set is not None:
        te = accuracy(predict_logits(model, test_set.images()), test_set.label_array())
    return RunResult(model, log, tr, te, seconds)


def relational_splits(n_train: int, n_test: int, seed: int = 0,
                      image_size: int = 128) -> tuple[Dataset, Dataset, list[SceneGeometry]]:
    """Independent train/test scenes (different generator seeds); returns test geometry too."""
    tr, _ = synthesize(SyntheticSpec.for_size(image_size, seed=2 * seed + 1), n_train)
    te, geos = synthesize(SyntheticSpec.for_size(image_size, seed=2 * seed + 2), n_test)
    return tr, te, geos


def cell_box(row: int, col: int, stride: int) -> BoundingBox:
    return BoundingBox(col * stride, row * stride, (col + 1) * stride, (row + 1) * stride)


@dataclass
class LocalizationResult:
    hits: int
    evaluated: int
    cells: list[tuple[int, int]] = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.hits / self.evaluated if self.evaluated else 0.0


def gradcam_localization(model: ConViT, dataset: Dataset, geos: list[SceneGeometry]) -> LocalizationResult:
    """Share of correctly classified images whose Grad-CAM argmax cell overlaps the actor or object box."""
    model.eval()
    logits = predict_logits(model, dataset.images())
    preds = np.argmax(logits, axis=1)
    gh = model.cfg.vit_b.seq_h if model.cfg.vit_enabled else model.cfg.feature_grid[0]
    stride = model.cfg.input_hw[0] // gh
    hits = evaluated = 0
    cells = []
    for i, (s, g) in enumerate(zip(dataset.samples, geos)):
        if preds[i] != s.label:
            continue
        heat = grad_cam(model, model.preprocess(s.image[None]), int(preds[i]))
        r, c = np.unravel_index(int(np.argmax(heat.values)), heat.values.shape)
        cell = cell_box(int(r), int(c), stride)
        evaluated += 1
        cells.append((int(r), int(c)))
        if cell.intersection_area(g.actor) > 0 or cell.intersection_area(g.obj) > 0:
            hits += 1
    return LocalizationResult(hits, evaluated, cells)


@dataclass
class FusionResult:
    weights: FusionWeights
    loss_convit: float
    loss_human: float
    loss_fused: float
    branch: HumanBranch
    log: TrainLog


def stage_two(model: ConViT, run: RunConfig, train_set: Dataset, seed: int = 0) -> FusionResult:
    """Train the person branch on a frozen model, then grid-search fusion weights on the training set."""
    branch = HumanBranch(run.branch, seed=seed)
    log = train_branch(model, branch, train_set, run.branch_train)
    kind = run.train.loss_kind
    img_scores = scores_from_logits(predict_logits(model, train_set.images()), kind)
    logits, items = predict_branch_logits(model, branch, train_set)
    p_human = scores_from_logits(logits, kind)
    p_convit = img_scores[[si for si, _, _ in items]]
    k = run.model.num_classes
    targets = np.stack([target_vector((lab,), k, kind) for _, _, lab in items])
    w = search_fusion_weights(p_convit, p_human, targets, 0.01, kind)
    return FusionResult(w, probability_loss(p_convit, targets, kind), probability_loss(p_human, targets, kind),
                        probability_loss(fuse_predictions(p_convit, p_human, w), targets, kind), branch, log)


def default_run() -> RunConfig:
    return toy_preset()
