"""Command-line entry point: ``convit <subcommand> ...``.

Failures print one line ``error: <kind>: <message>`` to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .branch import FusionWeights, HumanBranch, fuse_predictions, probability_loss, search_fusion_weights
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import SyntheticSpec, emit_heatmap, generate_synthetic, load_manifest, read_ppm, target_vector
from .metrics import confusion_matrix, format_report, per_class_ap
from .model import ConViT, grad_cam
from .train import (predict_branch_logits, predict_logits, scores_from_logits, train, train_branch)


def _pair(text: str, cast=float) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _run_config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed),
                                  branch_train=dataclasses.replace(cfg.branch_train, seed=args.seed))
    if getattr(args, "epochs", None) is not None:
        key = "branch_train" if args.command == "train-branch" else "train"
        cfg = dataclasses.replace(cfg, **{key: dataclasses.replace(getattr(cfg, key), epochs=args.epochs)})
    return cfg


def _load_model(cfg, path) -> ConViT:
    model = ConViT(cfg.model)
    load_checkpoint(path, model)
    return model.eval()


def cmd_gen(args) -> None:
    spec = SyntheticSpec.for_size(args.image_size, num_classes=args.classes, seed=args.seed)
    manifest = generate_synthetic(spec, args.n, args.out)
    print(f"manifest {manifest}")


def _log_sink(path):
    return open(path, "a", encoding="utf-8") if path else None


def cmd_train(args) -> None:
    cfg = _run_config(args)
    dataset = load_manifest(args.manifest)
    model = ConViT(cfg.model, seed=cfg.train.seed)
    sink = _log_sink(args.log)
    try:
        log = train(model, dataset, cfg.train, sink=sink if sink else sys.stdout)
    finally:
        if sink:
            sink.close()
    save_checkpoint(model, args.out)
    print(f"checkpoint {args.out} final_loss {log.losses[-1]!r}" if log.losses else f"checkpoint {args.out}")


def cmd_train_branch(args) -> None:
    cfg = _run_config(args)
    dataset = load_manifest(args.manifest)
    model = _load_model(cfg, args.checkpoint)
    branch = HumanBranch(cfg.branch, seed=cfg.branch_train.seed)
    sink = _log_sink(args.log)
    try:
        log = train_branch(model, branch, dataset, cfg.branch_train, sink=sink if sink else sys.stdout)
    finally:
        if sink:
            sink.close()
    save_checkpoint(branch, args.out)
    print(f"checkpoint {args.out} final_loss {log.losses[-1]!r}" if log.losses else f"checkpoint {args.out}")


def _person_scores(model, branch, dataset, kind):
    """Per-person (ConViT image score broadcast, branch score, label set)."""
    img_scores = scores_from_logits(predict_logits(model, dataset.images()), kind)
    logits, items = predict_branch_logits(model, branch, dataset)
    p_human = scores_from_logits(logits, kind)
    p_convit = img_scores[[si for si, _, _ in items]]
    labels = [(lab,) for _, _, lab in items]
    return p_convit, p_human, labels


def cmd_eval(args) -> None:
    cfg = _run_config(args)
    kind = cfg.train.loss_kind
    dataset = load_manifest(args.manifest)
    model = _load_model(cfg, args.checkpoint)
    k = cfg.model.num_classes
    if args.branch_checkpoint is None:
        if args.fuse_weights or args.fuse_search:
            raise ValueError("fusion needs --branch-checkpoint")
        scores = scores_from_logits(predict_logits(model, dataset.images()), kind)
        label_sets = [s.labels for s in dataset.samples]
    else:
        branch = HumanBranch(cfg.branch)
        load_checkpoint(args.branch_checkpoint, branch)
        p_convit, p_human, label_sets = _person_scores(model, branch, dataset, kind)
        if args.fuse_search:
            search_set = load_manifest(args.search_manifest) if args.search_manifest else dataset
            sc, sh, sl = _person_scores(model, branch, search_set, kind) if args.search_manifest \
                else (p_convit, p_human, label_sets)
            targets = np.stack([target_vector(ls, k, kind) for ls in sl])
            w = search_fusion_weights(sc, sh, targets, args.step, kind)
            print(f"fusion w_convit {w.w_convit!r} w_human {w.w_human!r} "
                  f"search_loss {probability_loss(fuse_predictions(sc, sh, w), targets, kind)!r}")
        elif args.fuse_weights:
            w = FusionWeights(*args.fuse_weights)
        else:
            w = FusionWeights(0.0, 1.0)
        scores = fuse_predictions(p_convit, p_human, w)
    aps = per_class_ap(scores, label_sets)
    preds = np.argmax(scores, axis=1)
    truths = np.array([ls[0] for ls in label_sets])
    acc = float((preds == truths).mean())
    report = format_report(aps, dataset.class_names, acc, confusion_matrix(preds, truths, k))
    print(report)
    if args.report:
        Path(args.report).write_text(report + "\n", encoding="utf-8")


def cmd_gradcheck(args) -> None:
    from .gradcheck import run_all

    results = run_all(args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise RuntimeError(f"gradient check failed for {','.join(failed)}")


def cmd_gradcam(args) -> None:
    cfg = _run_config(args)
    model = _load_model(cfg, args.checkpoint)
    image = read_ppm(args.image)
    if image.shape[:2] != cfg.model.input_hw:
        raise ValueError(f"image is {image.shape[1]}x{image.shape[0]}, model expects "
                         f"{cfg.model.input_hw[1]}x{cfg.model.input_hw[0]}")
    heat = grad_cam(model, model.preprocess(image[None]), args.class_index)
    size = args.size or cfg.model.input_hw
    emit_heatmap(heat, args.out, size)
    cell = np.unravel_index(int(np.argmax(heat.values)), heat.values.shape)
    print(f"heatmap {args.out} grid {heat.values.shape[0]}x{heat.values.shape[1]} argmax {cell[0]},{cell[1]}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic relational dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    def common(p, ckpt: bool):
        p.add_argument("--config", default="toy", help="preset name or JSON config file")
        p.add_argument("--manifest", required=True)
        if ckpt:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("train", help="stage 1: train ConViT")
    common(p, False)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="append per-epoch loss lines here (default stdout)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-branch", help="stage 2: train the person branch on a frozen ConViT")
    common(p, True)
    p.add_argument("--out", required=True, help="branch checkpoint path")
    p.add_argument("--log")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_branch)

    p = sub.add_parser("eval", help="AP / mAP / accuracy / confusion report")
    common(p, True)
    p.add_argument("--branch-checkpoint")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--fuse-weights", type=_pair, help="w_convit,w_human")
    g.add_argument("--fuse-search", action="store_true", help="grid-search fusion weights")
    p.add_argument("--search-manifest", help="data for --fuse-search (default: the eval manifest)")
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--report", help="also write the report to this file")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gradcam", help="write a Grad-CAM heatmap as PGM")
    p.add_argument("image")
    p.add_argument("class_index", type=int, metavar="class")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default="toy")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=lambda s: _pair(s, int), help="output H,W (default: model input)")
    p.set_defaults(func=cmd_gradcam)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # one-line machine-parseable failure
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
