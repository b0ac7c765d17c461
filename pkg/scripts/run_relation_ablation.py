"""Held-out accuracy of ConViT versus the same backbone with the ViTs removed."""

import argparse

from convit.checkpoint import save_checkpoint
from convit.experiments import default_run, relational_splits, train_and_score


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train", type=int, default=256)
    ap.add_argument("--test", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--save", help="write the ConViT checkpoint here")
    args = ap.parse_args()

    run = default_run()
    tr, te, _ = relational_splits(args.train, args.test, seed=args.seed)
    rows = []
    for name, vit in [("convit", True), ("cnn+gap", False)]:
        res = train_and_score(run, tr, te, seed=args.seed, vit_enabled=vit)
        rows.append((name, res))
        if vit and args.save:
            save_checkpoint(res.model, args.save)
    for name, res in rows:
        print(f"{name:8s} train {res.train_accuracy:.3f} test {res.test_accuracy:.3f} ({res.seconds:.0f}s)")


if __name__ == "__main__":
    main()
