"""Train on relational scenes, then score and dump Grad-CAM heatmaps for a few test images."""

import argparse
from pathlib import Path

import numpy as np

from convit.data import emit_heatmap
from convit.experiments import default_run, gradcam_localization, relational_splits, train_and_score
from convit.model import grad_cam


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train", type=int, default=256)
    ap.add_argument("--test", type=int, default=200)
    ap.add_argument("--out", default="gradcam_out")
    ap.add_argument("--dump", type=int, default=8, help="heatmaps to write")
    args = ap.parse_args()

    tr, te, geos = relational_splits(args.train, args.test)
    res = train_and_score(default_run(), tr, te)
    model = res.model
    loc = gradcam_localization(model, te, geos)
    print(f"test accuracy {res.test_accuracy:.3f}")
    print(f"argmax cell on actor or object: {loc.hits}/{loc.evaluated} = {loc.rate:.3f}")
    counts = np.zeros((model.cfg.vit_b.seq_h, model.cfg.vit_b.seq_w), int)
    for r, c in loc.cells:
        counts[r, c] += 1
    print("argmax cell histogram:\n" + "\n".join(" ".join(f"{v:3d}" for v in row) for row in counts))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(te.samples[:args.dump]):
        heat = grad_cam(model, model.preprocess(s.image[None]), s.label)
        emit_heatmap(heat, out / f"{i:03d}_class{s.label}.pgm", model.cfg.input_hw)
    print(f"wrote {min(args.dump, len(te.samples))} heatmaps to {out}")


if __name__ == "__main__":
    main()
