import itertools
import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from convit.branch import (BoundingBox, BranchConfig, DegenerateBoxError, FusionWeights, HumanBranch,
                           fuse_predictions, fusion_grid, probability_loss, roi_cells, roi_pool,
                           search_fusion_weights)
from convit.config import paper_geometry_preset, toy_preset
from convit.tensor import Tensor, backward
from convit.vit import ConfigError


def roi_oracle(fm, box, out_hw, stride):
    """Cell-by-cell membership test, written independently of the library's slice arithmetic."""
    h, w, c = fm.shape
    x0 = min(max(math.floor(box.x_min / stride), 0), w)
    y0 = min(max(math.floor(box.y_min / stride), 0), h)
    x1 = max(min(max(math.ceil(box.x_max / stride), 0), w), x0 + 1)
    y1 = max(min(max(math.ceil(box.y_max / stride), 0), h), y0 + 1)
    oh, ow = out_hw
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        a_y, b_y = y0 + i * (y1 - y0) / oh, y0 + (i + 1) * (y1 - y0) / oh
        rows = [r for r in range(y0, y1) if a_y <= r + 0.5 < b_y] or [min(int((a_y + b_y) // 2), y1 - 1)]
        for j in range(ow):
            a_x, b_x = x0 + j * (x1 - x0) / ow, x0 + (j + 1) * (x1 - x0) / ow
            cols = [q for q in range(x0, x1) if a_x <= q + 0.5 < b_x] or [min(int((a_x + b_x) // 2), x1 - 1)]
            for ch in range(c):
                out[i, j, ch] = max(fm[r, q, ch] for r in rows for q in cols)
    return out


class TestBoxes:
    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(5, 5, 5, 10)

    def test_box_off_grid(self):
        with pytest.raises(DegenerateBoxError):
            roi_cells(BoundingBox(200, 0, 210, 10), (8, 8), 16)

    def test_cells_floor_ceil_and_minimum(self):
        assert roi_cells(BoundingBox(17, 3, 40, 33), (8, 8), 16) == (0, 3, 1, 3)
        # a sliver inside one cell still gets one cell
        assert roi_cells(BoundingBox(20, 20, 21, 21), (8, 8), 16) == (1, 2, 1, 2)
        # clamped to the grid
        assert roi_cells(BoundingBox(-30, -1, 500, 129), (8, 8), 16) == (0, 8, 0, 8)


class TestRoiPool:
    def test_constant(self):
        fm = Tensor(np.full((8, 8, 3), -1.25))
        for box in [BoundingBox(0, 0, 128, 128), BoundingBox(10, 30, 40, 90), BoundingBox(1, 1, 2, 2)]:
            np.testing.assert_array_equal(roi_pool(fm, box, (6, 4), 16).data, -1.25)

    def test_quadrant_maxima(self):
        fm = np.array([[1, 5, 2, 0], [3, 4, 8, 1], [0, 0, 9, 9], [7, 1, 2, 3]], dtype=np.float64)[..., None]
        out = roi_pool(Tensor(fm), BoundingBox(0, 0, 4, 4), (2, 2), 1).data[..., 0]
        assert out.tolist() == [[5.0, 8.0], [7.0, 9.0]]

    @pytest.mark.parametrize("grid", [(4, 4), (5, 3), (8, 8)])
    @pytest.mark.parametrize("out_hw", [(1, 1), (2, 2), (3, 2), (6, 4)])
    def test_exhaustive_integer_boxes(self, grid, out_hw):
        h, w = grid
        stride = 4
        fm = np.random.default_rng(h * 10 + w).normal(size=(h, w, 2))
        t = Tensor(fm)
        spans_y = [(a, b) for a in range(h) for b in range(a + 1, h + 1)]
        spans_x = [(a, b) for a in range(w) for b in range(a + 1, w + 1)]
        for (y0, y1), (x0, x1) in itertools.product(spans_y, spans_x):
            box = BoundingBox(x0 * stride, y0 * stride, x1 * stride, y1 * stride)
            got = roi_pool(t, box, out_hw, stride).data
            np.testing.assert_array_equal(got, roi_oracle(fm, box, out_hw, stride))

    @settings(max_examples=60, deadline=None)
    @given(x0=st.floats(0, 120), y0=st.floats(0, 120), dw=st.floats(0.5, 128), dh=st.floats(0.5, 128),
           seed=st.integers(0, 100))
    def test_real_boxes_match_oracle(self, x0, y0, dw, dh, seed):
        fm = np.random.default_rng(seed).normal(size=(8, 8, 3))
        box = BoundingBox(x0, y0, min(x0 + dw, 128.0), min(y0 + dh, 128.0))
        np.testing.assert_array_equal(roi_pool(Tensor(fm), box, (6, 4), 16).data, roi_oracle(fm, box, (6, 4), 16))

    @settings(max_examples=60, deadline=None)
    @given(a=st.tuples(st.integers(0, 7), st.integers(0, 7)), da=st.tuples(st.integers(1, 8), st.integers(1, 8)),
           grow=st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 4), st.integers(0, 4)),
           seed=st.integers(0, 100))
    def test_monotone_containment(self, a, da, grow, seed):
        fm = Tensor(np.random.default_rng(seed).normal(size=(8, 8, 4)))
        x0, y0 = a
        small = BoundingBox(x0, y0, min(x0 + da[0], 8), min(y0 + da[1], 8))
        big = BoundingBox(max(small.x_min - grow[0], 0), max(small.y_min - grow[1], 0),
                          min(small.x_max + grow[2], 8), min(small.y_max + grow[3], 8))
        s = roi_pool(fm, small, (1, 1), 1).data
        b = roi_pool(fm, big, (1, 1), 1).data
        assert np.all(b >= s)

    def test_paper_shape(self):
        fm = Tensor(np.zeros((14, 14, 2048), np.float32))
        assert roi_pool(fm, BoundingBox(100, 40, 260, 400), (10, 6), 32).shape == (10, 6, 2048)

    def test_gradient_routes_to_argmax(self):
        fm = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
        t = Tensor(fm, requires_grad=True)
        backward(roi_pool(t, BoundingBox(0, 0, 4, 4), (2, 2), 1).sum())
        expected = np.zeros((4, 4))
        expected[1, 1] = expected[1, 3] = expected[3, 1] = expected[3, 3] = 1
        np.testing.assert_array_equal(t.grad[..., 0], expected)


class TestHumanBranch:
    def test_toy_chain(self):
        cfg = toy_preset().branch
        br = HumanBranch(cfg, seed=0).eval()
        fm = Tensor(np.random.default_rng(0).normal(size=(2, 8, 8, 64)).astype(np.float32))
        logits = br(fm, [BoundingBox(10, 10, 60, 100), BoundingBox(64, 0, 128, 128)], 16)
        assert logits.shape == (2, 4)
        assert br.last_shapes == cfg.check_geometry()
        assert [s for _, s in br.last_shapes][:4] == [(6, 4, 64), (6, 4, 64), (3, 2, 64), (3, 2, 64)]

    def test_determinism(self):
        br = HumanBranch(toy_preset().branch, seed=1).eval()
        fm = Tensor(np.random.default_rng(1).normal(size=(1, 8, 8, 64)).astype(np.float32))
        box = [BoundingBox(5, 5, 80, 120)]
        assert br(fm, box, 16).data.tobytes() == br(fm, box, 16).data.tobytes()

    def test_paper_branch_geometry(self):
        chain = dict(paper_geometry_preset().branch.check_geometry())
        assert chain["roi"] == (10, 6, 2048) and chain["vit_r2"] == (5, 3, 2048)

    def test_odd_roi_rejected(self):
        with pytest.raises(ConfigError):
            BranchConfig(roi_out=(5, 4))


class TestFusion:
    def test_identity_weights(self):
        p = np.array([[0.2, 0.8], [0.6, 0.4]])
        np.testing.assert_array_equal(fuse_predictions(p, 1 - p, FusionWeights(1.0, 0.0)), p)

    def test_weighted_example(self):
        out = fuse_predictions([1.0, 0.0], [0.0, 1.0], FusionWeights(0.83, 0.17))
        assert out.tolist() == [0.83, 0.17]

    def test_fixed_point(self):
        out = fuse_predictions([0.5, 0.5], [0.5, 0.5], FusionWeights(0.3, 0.7))
        assert out.tolist() == [0.5, 0.5]

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            FusionWeights(0.6, 0.6)
        with pytest.raises(ValueError):
            FusionWeights(-0.1, 1.1)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 1), st.integers(1, 6))
    def test_simplex_preserved(self, seed, wc, k):
        rng = np.random.default_rng(seed)
        a = rng.dirichlet(np.ones(k), size=5)
        b = rng.dirichlet(np.ones(k), size=5)
        out = fuse_predictions(a, b, FusionWeights(wc, 1 - wc))
        assert np.all(out >= 0) and np.all(out <= 1)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


class TestSearch:
    def test_grid(self):
        g = fusion_grid(0.01)
        assert len(g) == 101 and g[0] == 0.0 and g[-1] == 1.0 and g[83] == 0.83

    def test_dominant_branch(self):
        t = np.eye(3)[[0, 1, 2, 1]]
        w = search_fusion_weights(np.full((4, 3), 1 / 3), t.copy(), t)
        assert w.w_convit == 0.0 and w.w_human == 1.0

    def test_tie_prefers_convit(self):
        p = np.random.default_rng(0).dirichlet(np.ones(3), size=6)
        w = search_fusion_weights(p, p.copy(), np.eye(3)[[0, 1, 2, 0, 1, 2]])
        assert w.w_convit == 1.0

    def test_three_sample_oracle(self):
        pc = np.array([[0.7, 0.3], [0.4, 0.6], [0.9, 0.1]])
        ph = np.array([[0.2, 0.8], [0.1, 0.9], [0.6, 0.4]])
        t = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        best, best_loss = None, math.inf
        for i in range(100, -1, -1):  # descending so strict '<' keeps the larger weight on ties
            wc = i / 100
            fused = [[wc * pc[n][k] + (1 - wc) * ph[n][k] for k in range(2)] for n in range(3)]
            loss = -sum(sum(t[n][k] * math.log(fused[n][k]) for k in range(2)) for n in range(3)) / 3
            if loss < best_loss - 1e-15:
                best, best_loss = wc, loss
        w = search_fusion_weights(pc, ph, t)
        assert w.w_convit == pytest.approx(best, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["softmax_ce", "sigmoid_bce"]))
    def test_returned_weight_is_grid_minimum(self, seed, kind):
        rng = np.random.default_rng(seed)
        pc, ph = rng.dirichlet(np.ones(4), size=8), rng.dirichlet(np.ones(4), size=8)
        t = np.eye(4)[rng.integers(0, 4, size=8)]
        w = search_fusion_weights(pc, ph, t, 0.05, kind)
        best = probability_loss(fuse_predictions(pc, ph, w), t, kind)
        for wc in fusion_grid(0.05):
            assert best <= probability_loss(fuse_predictions(pc, ph, FusionWeights(wc, 1 - wc)), t, kind)
        assert best <= min(probability_loss(pc, t, kind), probability_loss(ph, t, kind))

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            search_fusion_weights(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))
        with pytest.raises(ValueError):
            search_fusion_weights(np.ones((1, 2)) / 2, np.ones((1, 2)) / 2, np.eye(2)[:1], step=0.0)
