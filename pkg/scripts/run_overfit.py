"""Fit 64 synthetic scenes and report training accuracy and the loss drop."""

import argparse

from convit.data import SyntheticSpec, synthesize
from convit.experiments import default_run, train_and_score


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data, _ = synthesize(SyntheticSpec(seed=7), args.n)
    res = train_and_score(default_run(), data, seed=args.seed, epochs=args.epochs, verbose=True)
    first, last = res.log.losses[0], res.log.losses[-1]
    print(f"train accuracy {res.train_accuracy:.3f}")
    print(f"loss {first:.4f} -> {last:.4f} (ratio {last / first:.4f}) in {res.seconds:.0f}s")


if __name__ == "__main__":
    main()
