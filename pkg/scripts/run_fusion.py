"""Stage two: freeze a trained ConViT, fit the person branch and search the fusion weights."""

import argparse

from convit.experiments import default_run, relational_splits, stage_two, train_and_score


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    run = default_run()
    tr, _, _ = relational_splits(args.train, 1, seed=args.seed)
    res = train_and_score(run, tr, seed=args.seed)
    fused = stage_two(res.model, run, tr, seed=args.seed)
    w = fused.weights
    print(f"branch loss {fused.log.losses[0]:.4f} -> {fused.log.losses[-1]:.4f}")
    print(f"train loss convit {fused.loss_convit:.4f} human {fused.loss_human:.4f} fused {fused.loss_fused:.4f}")
    print(f"weights w_convit {w.w_convit:.2f} w_human {w.w_human:.2f}")


if __name__ == "__main__":
    main()
