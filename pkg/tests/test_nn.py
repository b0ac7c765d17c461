import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from convit import nn
from convit.nn import DegenerateBatchError
from convit.tensor import ShapeError, Tensor


def conv_oracle(x, w, b, stride, pad):
    """Direct summation, one output element at a time."""
    B, H, W, C = x.shape
    kh, kw, _, co = w.shape
    ho, wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, ho, wo, co))
    for n in range(B):
        for i in range(ho):
            for j in range(wo):
                for o in range(co):
                    acc = b[o]
                    for di in range(kh):
                        for dj in range(kw):
                            y, xx = i * stride + di - pad, j * stride + dj - pad
                            if 0 <= y < H and 0 <= xx < W:
                                acc += float(np.dot(x[n, y, xx, :], w[di, dj, :, o]))
                    out[n, i, j, o] = acc
    return out


def pool_oracle(x, kind, k, s):
    B, H, W, C = x.shape
    ho, wo = (H - k) // s + 1, (W - k) // s + 1
    out = np.zeros((B, ho, wo, C))
    for n in range(B):
        for i in range(ho):
            for j in range(wo):
                win = x[n, i * s:i * s + k, j * s:j * s + k, :].reshape(-1, C)
                out[n, i, j] = win.max(axis=0) if kind == "max" else win.sum(axis=0) / (k * k)
    return out


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


class TestConv2d:
    def test_identity_1x1(self):
        x = np.random.default_rng(0).normal(size=(2, 4, 5, 3))
        w = np.eye(3).reshape(1, 1, 3, 3)
        out = nn.conv2d(_t(x), _t(w), _t(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_matches_oracle_exactly(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        w = np.ones((3, 3, 1, 1))
        out = nn.conv2d(_t(x), _t(w), _t([0.0]), 1, 1)
        oracle = conv_oracle(x, w, [0.0], 1, 1)
        np.testing.assert_array_equal(out.data, oracle)
        # corner sums 0+1+4+5
        assert out.data[0, 0, 0, 0] == 10.0

    def test_zero(self):
        x = np.random.default_rng(1).normal(size=(1, 5, 5, 2))
        out = nn.conv2d(_t(x), _t(np.zeros((3, 3, 2, 4))), _t(np.zeros(4)), 2, 1)
        assert out.shape == (1, 3, 3, 4) and not out.data.any()

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            nn.conv2d(_t(np.zeros((1, 4, 4, 2))), _t(np.zeros((3, 3, 3, 1))))

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(1, 8), w=st.integers(1, 8), c=st.integers(1, 4), co=st.integers(1, 4),
           k=st.sampled_from([1, 3]), stride=st.integers(1, 2), pad=st.integers(0, 1),
           seed=st.integers(0, 10_000))
    def test_random_shapes_match_oracle(self, h, w, c, co, k, stride, pad, seed):
        if h + 2 * pad < k or w + 2 * pad < k:
            return
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, h, w, c)).astype(np.float32)
        wt = rng.normal(size=(k, k, c, co)).astype(np.float32)
        b = rng.normal(size=co).astype(np.float32)
        out = nn.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad)
        np.testing.assert_allclose(out.data, conv_oracle(x.astype(np.float64), wt, b, stride, pad),
                                   atol=1e-5, rtol=1e-5)


class TestPool:
    @pytest.mark.parametrize("kind", ["max", "avg"])
    def test_constant(self, kind):
        out = nn.pool2d(_t(np.full((1, 6, 6, 2), 1.75)), kind, 2, 2)
        np.testing.assert_array_equal(out.data, 1.75)

    def test_max_definition(self):
        out = nn.pool2d(_t(np.array([[1, 2], [3, 4]]).reshape(1, 2, 2, 1)), "max", 2, 2)
        assert out.data.reshape(-1).tolist() == [4.0]

    def test_avg_matches_window_oracle(self):
        x = np.random.default_rng(2).normal(size=(2, 8, 8, 3))
        out = nn.pool2d(_t(x), "avg", 2, 2)
        np.testing.assert_allclose(out.data, pool_oracle(x, "avg", 2, 2), rtol=0, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(2, 8), w=st.integers(2, 8), k=st.integers(1, 3), s=st.integers(1, 3),
           kind=st.sampled_from(["max", "avg"]), seed=st.integers(0, 10_000))
    def test_random_matches_oracle(self, h, w, k, s, kind, seed):
        if k > min(h, w):
            return
        x = np.random.default_rng(seed).normal(size=(1, h, w, 2)).astype(np.float32)
        out = nn.pool2d(Tensor(x), kind, k, s)
        np.testing.assert_allclose(out.data, pool_oracle(x.astype(np.float64), kind, k, s), atol=1e-5)

    def test_window_too_large(self):
        with pytest.raises(ShapeError):
            nn.pool2d(_t(np.zeros((1, 2, 2, 1))), "max", 3)

    def test_avg_then_replicate_preserves_constants(self):
        x = np.full((1, 4, 4, 3), -0.5)
        pooled = nn.pool2d(_t(x), "avg", 2, 2).data
        up = pooled.repeat(2, axis=1).repeat(2, axis=2)
        np.testing.assert_array_equal(up, x)


class TestLayerNorm:
    def test_fixed_point(self):
        v = np.array([-1.0, 1.0, -1.0, 1.0])  # mean 0, var 1
        out = nn.layer_norm(_t(v), _t(np.ones(4)), _t(np.zeros(4)))
        np.testing.assert_allclose(out.data, v, atol=1e-6)

    def test_constant_vector(self):
        out = nn.layer_norm(_t(np.full(5, 3.0)), _t(np.ones(5)), _t(np.zeros(5)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_moments(self):
        x = np.random.default_rng(4).normal(3.0, 5.0, size=(6, 16))
        out = nn.layer_norm(_t(x), _t(np.ones(16)), _t(np.zeros(16))).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-6
        assert np.abs(out.var(axis=-1) - 1).max() < 1e-4


class TestBatchNorm:
    def test_eval_identity_stats(self):
        x = np.random.default_rng(5).normal(size=(2, 3, 3, 4))
        out = nn.batch_norm2d(_t(x), _t(np.ones(4)), _t(np.zeros(4)), np.zeros(4), np.ones(4), False)
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + nn.BN_EPS), rtol=1e-12)
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_train_constant_batch_gives_beta(self):
        beta = np.array([0.5, -1.0])
        out = nn.batch_norm2d(_t(np.full((2, 3, 3, 2), 7.0)), _t(np.ones(2)), _t(beta),
                              np.zeros(2), np.ones(2), True)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, out.shape))

    def test_running_stat_update(self):
        x = np.random.default_rng(6).normal(2.0, 3.0, size=(4, 2, 2, 3))
        rm, rv = np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0])
        old_m, old_v = rm.copy(), rv.copy()
        m = 0.1
        nn.batch_norm2d(_t(x), _t(np.ones(3)), _t(np.zeros(3)), rm, rv, True, momentum=m)
        bm = x.reshape(-1, 3).mean(axis=0)
        bv = x.reshape(-1, 3).var(axis=0)
        np.testing.assert_allclose(rm, (1 - m) * old_m + m * bm, rtol=1e-12)
        np.testing.assert_allclose(rv, (1 - m) * old_v + m * bv, rtol=1e-12)

    def test_eval_has_no_side_effects(self):
        layer = nn.BatchNorm2d(3, dtype=np.float64).eval()
        x = _t(np.random.default_rng(7).normal(size=(2, 2, 2, 3)))
        a = layer(x).data.copy()
        b = layer(x).data
        assert a.tobytes() == b.tobytes()
        np.testing.assert_array_equal(layer._buffers["running_mean"], 0.0)

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatchError):
            nn.batch_norm2d(_t(np.ones((1, 1, 1, 2))), _t(np.ones(2)), _t(np.zeros(2)),
                            np.zeros(2), np.ones(2), True)


class TestLinearAndGap:
    def test_identity(self):
        x = np.random.default_rng(8).normal(size=(3, 4))
        np.testing.assert_array_equal(nn.linear(_t(x), _t(np.eye(4)), _t(np.zeros(4))).data, x)

    def test_hand_computed(self):
        out = nn.linear(_t([[1.0, 2.0]]), _t([[1.0, 1.0], [1.0, -1.0]]), _t([0.0, 1.0]))
        assert out.data.tolist() == [[3.0, 0.0]]

    def test_zero_input_gives_bias(self):
        out = nn.linear(_t(np.zeros((2, 5, 3))), _t(np.ones((3, 2))), _t([4.0, -1.0]))
        np.testing.assert_array_equal(out.data, np.broadcast_to([4.0, -1.0], (2, 5, 2)))

    def test_linear_shape_error(self):
        with pytest.raises(ShapeError):
            nn.linear(_t(np.zeros((2, 3))), _t(np.zeros((4, 2))))

    def test_gap_constant_and_single_pixel(self):
        np.testing.assert_array_equal(nn.global_avg_pool(_t(np.full((1, 3, 3, 2), 2.5))).data, 2.5)
        px = np.array([1.0, -2.0, 3.0]).reshape(1, 1, 1, 3)
        assert nn.global_avg_pool(_t(px)).data.tolist() == [[1.0, -2.0, 3.0]]

    def test_gap_matches_mean(self):
        x = np.random.default_rng(9).normal(size=(2, 7, 7, 8))
        oracle = np.array([[x[b, :, :, c].sum() / 49 for c in range(8)] for b in range(2)])
        np.testing.assert_allclose(nn.global_avg_pool(_t(x)).data, oracle, atol=1e-6)


class TestModule:
    def test_named_parameters_and_state(self):
        rng = np.random.default_rng(0)

        class Net(nn.Module):
            def __init__(self):
                self.fc = nn.Linear(3, 2, rng)
                self.bn = nn.BatchNorm2d(2)
                self.layers = [nn.Linear(2, 2, rng)]

        net = Net()
        names = [n for n, _ in net.named_parameters()]
        assert names == ["fc.weight", "fc.bias", "bn.gamma", "bn.beta", "layers.0.weight", "layers.0.bias"]
        state = net.state_dict()
        assert "bn.running_mean" in state and "bn.running_var" in state
        with pytest.raises(KeyError):
            net.load_state_dict({"fc.weight": state["fc.weight"]})
