"""End-to-end acceptance checks; each test prints one ``PASS``/``FAIL`` line.

Training-based checks share session fixtures, so the whole module takes a few minutes on one core.
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from convit import nn
from convit.branch import BoundingBox, FusionWeights, fuse_predictions, roi_pool
from convit.checkpoint import load_checkpoint, save_checkpoint
from convit.cli import main
from convit.config import paper_geometry_preset, toy_preset
from convit.data import SyntheticSpec, generate_synthetic, synthesize
from convit.experiments import gradcam_localization, relational_splits, stage_two, train_and_score
from convit.gradcheck import run_all
from convit.metrics import average_precision
from convit.model import ConViT, grad_cam
from convit.tensor import Tensor, mean, stack
from convit.train import mixup, random_crop_keep_box
from convit.vit import ModifiedViT, ViTConfig, vit_forward

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number} {title}: {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="session")
def relation_runs():
    run = toy_preset()
    tr, te, geos = relational_splits(256, 200, seed=0)
    convit = train_and_score(run, tr, te, seed=0, vit_enabled=True)
    cnn = train_and_score(run, tr, te, seed=0, vit_enabled=False)
    return dict(run=run, train=tr, test=te, geos=geos, convit=convit, cnn=cnn)


def test_c1_gradient_suite(verdict):
    start = time.perf_counter()
    results = run_all(seed=0)
    elapsed = time.perf_counter() - start
    failed = [r.line() for r in results if not r.passed]
    worst_op = max(r.error for r in results if r.tol == 1e-4 and r.metric == "max_rel_err")
    worst_e2e = max(r.error for r in results if r.tol == 1e-3)
    ok = not failed and elapsed < 120 and len(results) >= 30
    verdict(1, "gradient suite", ok,
            f"{len(results)} checks, worst op rel err {worst_op:.2e}, worst end-to-end {worst_e2e:.2e}, "
            f"{elapsed:.1f}s" + (f"; failed {failed}" if failed else ""))


def test_c2_architecture_contracts(verdict):
    rng = np.random.default_rng(0)
    problems = []
    for h, w in [(8, 8), (4, 4), (6, 4), (3, 2)]:
        vit = ModifiedViT(ViTConfig(2, 4, 16, 4.0, h, w), rng, np.float64)
        out = vit_forward(Tensor(rng.normal(size=(2, h, w, 16))), vit)
        if out.shape != (2, h, w, 16):
            problems.append(f"{h}x{w} -> {out.shape}")
        if vit.seq_lengths != [h * w] * 3:
            problems.append(f"token counts {vit.seq_lengths} for {h}x{w}")
        for att in vit.attention_maps:
            err = float(np.abs(att.sum(axis=-1) - 1).max())
            if err >= 1e-6:
                problems.append(f"attention row sum err {err}")
    paper = paper_geometry_preset()
    chain = dict(paper.model.check_geometry())
    if (chain["vit_a"], chain["vit_b"]) != ((14, 14, 2048), (7, 7, 2048)):
        problems.append(f"paper model chain {chain}")
    bchain = dict(paper.branch.check_geometry())
    if (bchain["vit_r1"], bchain["vit_r2"]) != ((10, 6, 2048), (5, 3, 2048)):
        problems.append(f"paper branch chain {bchain}")
    verdict(2, "architecture contracts", not problems, "; ".join(problems) or
            "grids 8x8/4x4/6x4/3x2 preserved, no class token, rows sum to 1, 14x14->7x7 and 10x6->5x3 chains")


def _conv_oracle(x, w, b, stride, pad):
    _, H, W, _ = x.shape
    kh, kw, _, co = w.shape
    ho, wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((x.shape[0], ho, wo, co))
    for n, i, j, o in itertools.product(range(x.shape[0]), range(ho), range(wo), range(co)):
        acc = b[o]
        for di, dj in itertools.product(range(kh), range(kw)):
            y, xx = i * stride + di - pad, j * stride + dj - pad
            if 0 <= y < H and 0 <= xx < W:
                acc += sum(x[n, y, xx, c] * w[di, dj, c, o] for c in range(x.shape[3]))
        out[n, i, j, o] = acc
    return out


def _pool_oracle(x, kind, k, s):
    _, H, W, C = x.shape
    ho, wo = (H - k) // s + 1, (W - k) // s + 1
    out = np.zeros((x.shape[0], ho, wo, C))
    for n, i, j, c in itertools.product(range(x.shape[0]), range(ho), range(wo), range(C)):
        vals = [x[n, i * s + a, j * s + bb, c] for a in range(k) for bb in range(k)]
        out[n, i, j, c] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def _roi_oracle(fm, box, out_hw, stride):
    h, w, c = fm.shape
    x0 = min(max(math.floor(box.x_min / stride), 0), w)
    y0 = min(max(math.floor(box.y_min / stride), 0), h)
    x1 = max(min(math.ceil(box.x_max / stride), w), x0 + 1)
    y1 = max(min(math.ceil(box.y_max / stride), h), y0 + 1)
    oh, ow = out_hw
    out = np.zeros((oh, ow, c))
    for i, j in itertools.product(range(oh), range(ow)):
        ay, by = y0 + i * (y1 - y0) / oh, y0 + (i + 1) * (y1 - y0) / oh
        ax, bx = x0 + j * (x1 - x0) / ow, x0 + (j + 1) * (x1 - x0) / ow
        rows = [r for r in range(y0, y1) if ay <= r + 0.5 < by] or [min(int((ay + by) // 2), y1 - 1)]
        cols = [q for q in range(x0, x1) if ax <= q + 0.5 < bx] or [min(int((ax + bx) // 2), x1 - 1)]
        for ch in range(c):
            out[i, j, ch] = max(fm[r, q, ch] for r in rows for q in cols)
    return out


def _ap_oracle(scores, rel):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, Fraction(0)
    for k, i in enumerate(order, start=1):
        if rel[i]:
            hits += 1
            total += Fraction(hits, k)
    return float(total / sum(rel))


def test_c3_oracle_equivalence(verdict):
    rng = np.random.default_rng(3)
    worst = {"conv2d": 0.0, "pool2d": 0.0, "roi_pool": 0.0}
    cases = 0
    for h, w in [(1, 1), (3, 5), (8, 8)]:
        for k, stride, pad in [(1, 1, 0), (3, 1, 1), (3, 2, 1)]:
            x = rng.normal(size=(1, h, w, 2)).astype(np.float32)
            wt = rng.normal(size=(k, k, 2, 3)).astype(np.float32)
            b = rng.normal(size=3).astype(np.float32)
            got = nn.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad).data
            ref = _conv_oracle(x.astype(np.float64), wt.astype(np.float64), b.astype(np.float64), stride, pad)
            worst["conv2d"] = max(worst["conv2d"], float(np.abs(got - ref).max()))
            cases += 1
        for kind, k, s in [("max", 2, 2), ("avg", 2, 2), ("max", 1, 1)]:
            if k > min(h, w):
                continue
            x = rng.normal(size=(1, h, w, 2)).astype(np.float32)
            got = nn.pool2d(Tensor(x), kind, k, s).data
            worst["pool2d"] = max(worst["pool2d"], float(np.abs(got - _pool_oracle(x.astype(np.float64), kind, k, s)).max()))
            cases += 1
    for h, w in [(4, 4), (8, 8)]:
        fm = rng.normal(size=(h, w, 2)).astype(np.float32)
        for y0, y1, x0, x1 in itertools.product(range(h), range(1, h + 1), range(w), range(1, w + 1)):
            if y1 <= y0 or x1 <= x0:
                continue
            box = BoundingBox(4 * x0, 4 * y0, 4 * x1, 4 * y1)
            for out_hw in [(1, 1), (2, 2), (6, 4)]:
                got = roi_pool(Tensor(fm), box, out_hw, 4).data
                worst["roi_pool"] = max(worst["roi_pool"], float(np.abs(got - _roi_oracle(fm, box, out_hw, 4)).max()))
                cases += 1
    ap_mismatch = 0
    for n in range(1, 9):
        perms = itertools.permutations(range(n)) if n <= 5 else (rng.permutation(n) for _ in range(120))
        for perm in perms:
            scores = [float(p) for p in perm]
            for rel in itertools.product([0, 1], repeat=n):
                if any(rel):
                    cases += 1
                    ap_mismatch += average_precision(scores, rel) != _ap_oracle(scores, rel)
    ok = all(v <= 1e-5 for v in worst.values()) and ap_mismatch == 0
    verdict(3, "oracle equivalence", ok,
            f"{cases} cases; max abs err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
            + f"; AP mismatches {ap_mismatch}")


def test_c4_overfit(verdict):
    run = toy_preset()
    tr, _ = synthesize(SyntheticSpec(seed=7), 64)
    res = train_and_score(run, tr, epochs=60, seed=0)
    ratio = res.log.losses[-1] / res.log.losses[0]
    ok = res.train_accuracy >= 0.95 and ratio < 0.1 and res.seconds < 600 and len(res.log.losses) <= 200
    verdict(4, "overfit 64 images", ok,
            f"train acc {res.train_accuracy:.3f} after {len(res.log.losses)} epochs, loss {res.log.losses[0]:.4f}"
            f" -> {res.log.losses[-1]:.4f} (ratio {ratio:.4f}), {res.seconds:.0f}s")


def test_c5_relation_advantage(verdict, relation_runs):
    a, b = relation_runs["convit"].test_accuracy, relation_runs["cnn"].test_accuracy
    ok = a >= 0.85 and a >= b
    verdict(5, "relation advantage", ok, f"held-out accuracy ConViT {a:.3f} vs CNN+GAP {b:.3f} (200 images)")


def test_c6_stage_two(verdict, relation_runs):
    model = relation_runs["convit"].model
    before = {k: v.tobytes() for k, v in model.state_dict().items()}
    fused = stage_two(model, relation_runs["run"], relation_runs["train"], seed=0)
    unchanged = all(before[k] == v.tobytes() for k, v in model.state_dict().items())
    best_single = min(fused.loss_convit, fused.loss_human)
    ok = unchanged and fused.loss_fused <= best_single
    verdict(6, "stage-2 protocol", ok,
            f"ConViT params bit-unchanged={unchanged}; train loss ConViT {fused.loss_convit:.4f}, branch "
            f"{fused.loss_human:.4f}, fused {fused.loss_fused:.4f} at w=({fused.weights.w_convit}, "
            f"{fused.weights.w_human})")


def test_c7_fusion_arithmetic(verdict):
    a = fuse_predictions([1.0, 0.0], [0.0, 1.0], FusionWeights(0.83, 0.17)).tolist()
    b = fuse_predictions([0.5, 0.5], [0.5, 0.5], FusionWeights(0.3, 0.7)).tolist()
    ok = a == [0.83, 0.17] and b == [0.5, 0.5]
    verdict(7, "fusion arithmetic", ok, f"(0.83,0.17) -> {a}; (0.3,0.7) -> {b}")


def test_c8_determinism(verdict, tmp_path):
    manifest = generate_synthetic(SyntheticSpec(seed=9), 16, tmp_path / "data")
    outs = []
    for tag in ("a", "b"):
        rc = main(["train", "--manifest", str(manifest), "--out", str(tmp_path / f"{tag}.cvit"),
                   "--log", str(tmp_path / f"{tag}.log"), "--seed", "3", "--epochs", "3"])
        assert rc == 0
        outs.append(((tmp_path / f"{tag}.log").read_bytes(), (tmp_path / f"{tag}.cvit").read_bytes()))
    same = outs[0] == outs[1]
    first = ConViT(toy_preset().model, seed=0)
    load_checkpoint(tmp_path / "a.cvit", first)
    save_checkpoint(first, tmp_path / "again.cvit")
    resaved = (tmp_path / "again.cvit").read_bytes() == outs[0][1]
    second = ConViT(toy_preset().model, seed=1)
    load_checkpoint(tmp_path / "again.cvit", second)
    pixels = np.random.default_rng(0).integers(0, 256, size=(2, 128, 128, 3), dtype=np.uint8)
    first.eval(), second.eval()
    x = first.preprocess(pixels)
    logits_equal = first(x).data.tobytes() == second(x).data.tobytes()
    ok = same and resaved and logits_equal
    verdict(8, "determinism", ok, f"identical logs+checkpoints={same}; re-save identical={resaved}; "
            f"round-trip logits bit-exact={logits_equal}")


class _Planted:
    def __init__(self, a):
        self.a = a

    def target_features(self, image):
        return Tensor(self.a[None])

    def classify(self, t):
        m0 = mean(t[:, :, :, 0:1], axis=(1, 2, 3))
        return stack([m0, m0 * 2.0], axis=1)


def test_c9_gradcam(verdict, relation_runs):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4, 6))
    planted = grad_cam(_Planted(a), Tensor(np.zeros((1, 1, 1, 1))), 1).values
    ref = np.maximum(a[:, :, 0], 0) * 2.0 / 16
    planted_err = float(np.abs(planted - ref).max())
    model = relation_runs["convit"].model
    te, geos = relation_runs["test"], relation_runs["geos"]
    heat = grad_cam(model, model.preprocess(te.samples[0].image[None]), 0)
    shape_ok = heat.shape == (4, 4) and bool(np.all(heat.values >= 0))
    loc = gradcam_localization(model, te, geos)
    ok = planted_err < 1e-6 and shape_ok and loc.rate >= 0.7
    verdict(9, "Grad-CAM", ok,
            f"planted err {planted_err:.1e}; 4x4 nonnegative={shape_ok}; argmax cell on actor/object in "
            f"{loc.hits}/{loc.evaluated} = {loc.rate:.3f} of correct test images (need >= 0.70)")


def test_c10_statistics(verdict):
    rng = np.random.default_rng(2024)
    lams = [mixup(np.zeros(1), np.zeros(1), np.ones(1), np.ones(1), 0.4, rng)[2] for _ in range(10_000)]
    lam_mean = float(np.mean(lams))
    img = np.zeros((128, 128, 3), np.uint8)
    accepted = violations = 0
    while accepted < 1000:
        x0, y0 = rng.uniform(0, 110, size=2)
        box = BoundingBox(x0, y0, min(x0 + rng.uniform(4, 60), 128), min(y0 + rng.uniform(4, 60), 128))
        _, _, (cx, cy), ok = random_crop_keep_box(img, box, (96, 96), 0.7, rng, return_info=True)
        if not ok:
            continue
        accepted += 1
        iw = max(0.0, min(box.x_max, cx + 96) - max(box.x_min, cx))
        ih = max(0.0, min(box.y_max, cy + 96) - max(box.y_min, cy))
        violations += iw * ih < 0.7 * (box.x_max - box.x_min) * (box.y_max - box.y_min)
    ok = abs(lam_mean - 0.5) <= 0.02 and violations == 0
    verdict(10, "statistical checks", ok,
            f"mean lambda {lam_mean:.4f} over 10000 draws; {violations} violations in {accepted} accepted crops")
