"""Run configuration: presets and a strict JSON schema.

A config file is a JSON object with optional keys ``preset`` (``"toy"`` or
``"paper-geometry"``, default ``"toy"``), ``model``, ``branch``, ``train`` and
``branch_train``. Each section overrides fields of the preset's section;
unknown keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .branch import BranchConfig
from .data import RELATION_FLIP_MAP
from .model import BackboneConfig, ModelConfig
from .train import TrainConfig
from .vit import ConfigError, ViTConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    branch: BranchConfig = field(default_factory=BranchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    branch_train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = "toy"


def toy_preset() -> RunConfig:
    """128x128 input, 8x8 -> 4x4 ViT grids, 64 channels; 6x4 -> 3x2 person branch."""
    model = ModelConfig(
        input_hw=(128, 128),
        backbone=BackboneConfig(stem_channels=16, stem_stride=2, stages=[(1, 16), (1, 32), (1, 64)]),
        vit_a=ViTConfig(depth=2, heads=4, embed_dim=64, seq_h=8, seq_w=8),
        vit_b=ViTConfig(depth=2, heads=4, embed_dim=64, seq_h=4, seq_w=4),
        num_classes=4,
    )
    branch = BranchConfig(roi_out=(6, 4), vit_r1=ViTConfig(depth=2, heads=4, embed_dim=64, seq_h=6, seq_w=4),
                          vit_r2=ViTConfig(depth=2, heads=4, embed_dim=64, seq_h=3, seq_w=2), num_classes=4)
    # from-scratch training on relational data: larger lr, flips swap left/right,
    # crops could cut the object out of the scene so they stay off
    train = TrainConfig(base_lr=0.02, epochs=40, lr_decay_every=30, use_mixup=False, use_crop=False,
                        flip_prob=0.5, flip_class_map=list(RELATION_FLIP_MAP))
    branch_train = TrainConfig(base_lr=0.02, epochs=20, lr_decay_every=15, use_mixup=False, use_crop=False,
                               flip_prob=0.5, flip_class_map=list(RELATION_FLIP_MAP))
    return RunConfig(model, branch, train, branch_train, "toy")


def paper_geometry_preset() -> RunConfig:
    """448x448 input, 14x14x2048 -> 7x7 grids, 10x6 -> 5x3 person branch, published optimiser settings.

    Far too large to train here; used for shape checking.
    """
    model = ModelConfig(
        input_hw=(448, 448),
        backbone=BackboneConfig(stem_channels=64, stem_stride=2,
                                stages=[(1, 256), (1, 512), (1, 1024), (1, 2048)]),
        vit_a=ViTConfig(depth=2, heads=4, embed_dim=2048, seq_h=14, seq_w=14),
        vit_b=ViTConfig(depth=2, heads=4, embed_dim=2048, seq_h=7, seq_w=7),
        num_classes=40,
    )
    branch = BranchConfig(roi_out=(10, 6), vit_r1=ViTConfig(depth=2, heads=4, embed_dim=2048, seq_h=10, seq_w=6),
                          vit_r2=ViTConfig(depth=2, heads=4, embed_dim=2048, seq_h=5, seq_w=3), num_classes=40)
    train = TrainConfig(base_lr=0.001, momentum=0.9, weight_decay=3e-5, batch_size=16, epochs=30,
                        lr_decay_factor=0.1, lr_decay_every=10, mixup_alpha=0.4, crop_keep_fraction=0.7)
    return RunConfig(model, branch, train, dataclasses.replace(train), "paper-geometry")


PRESETS = {"toy": toy_preset, "paper-geometry": paper_geometry_preset}


def _merge(obj, overrides: dict, where: str):
    """Return a copy of dataclass ``obj`` with ``overrides`` applied recursively."""
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(obj)}
    unknown = sorted(set(overrides) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in overrides.items():
        current = getattr(obj, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _merge(current, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return dataclasses.replace(obj, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    preset = d.get("preset", "toy")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]()
    sections = {k: v for k, v in d.items() if k != "preset"}
    unknown = sorted(set(sections) - {"model", "branch", "train", "branch_train"})
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    out = base
    for key, value in sections.items():
        out = dataclasses.replace(out, **{key: _merge(getattr(out, key), value, key)})
    out.model.check_geometry()
    out.branch.check_geometry()
    if out.branch.vit_r1.embed_dim != out.model.backbone.out_channels:
        raise ConfigError("branch embed_dim must equal backbone channels")
    return out


def config_to_dict(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(spec: str | Path | None) -> RunConfig:
    """``spec`` is a preset name, a JSON file path, or None for the toy preset."""
    if spec is None:
        return toy_preset()
    if str(spec) in PRESETS:
        return PRESETS[str(spec)]()
    p = Path(spec)
    if not p.is_file():
        raise ConfigError(f"config {spec!r} is neither a preset nor a file")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return config_from_dict(data)
