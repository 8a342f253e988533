import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volscan import tensor as T
from volscan.errors import GradCheckError, ShapeError, UninitializedStatsError


def naive_conv2d(x, k, b):
    """Direct loop convolution used as an independent oracle."""
    cin, h, w = x.shape
    cout = k.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((cout, h, w))
    for o in range(cout):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * k[o]) + b[o]
    return out


def naive_conv3d(x, k, b):
    cin, d, h, w = x.shape
    cout = k.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((cout, d, h, w))
    for o in range(cout):
        for z in range(d):
            for i in range(h):
                for j in range(w):
                    out[o, z, i, j] = np.sum(xp[:, z:z + 3, i:i + 3, j:j + 3] * k[o]) + b[o]
    return out


class TestConv:
    def test_zero_kernel(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 6))
        out = T.conv2d(x, np.zeros((4, 3, 3, 3)), np.zeros(4))
        assert out.shape == (4, 5, 6)
        assert np.all(out == 0)

    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 7, 5))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(T.conv2d(x, k, np.zeros(1)), x)

    def test_all_ones_by_hand(self):
        out = T.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))[0]
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=float)
        np.testing.assert_array_equal(out, expected)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 6, 5))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        np.testing.assert_allclose(T.conv2d(x, k, b), naive_conv2d(x, k, b), atol=1e-12)

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 2, 4, 4))
        k = rng.normal(size=(3, 2, 3, 3))
        out = T.conv2d(x, k)
        for n in range(5):
            np.testing.assert_allclose(out[n], T.conv2d(x[n], k), atol=1e-12)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 4, 4\).*\(3, 3, 3, 3\)"):
            T.conv2d(np.zeros((2, 4, 4)), np.zeros((3, 3, 3, 3)))

    def test_linearity(self):
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(2, 2, 6, 6)).astype(np.float32)
        k = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        a, b = 0.7, -1.3
        lhs = T.conv2d(a * x + b * y, k)
        rhs = a * T.conv2d(x, k) + b * T.conv2d(y, k)
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_conv3d_zero_identity_and_ones(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 4, 5))
        assert np.all(T.conv3d(x, np.zeros((2, 2, 3, 3, 3))) == 0)
        k = np.zeros((1, 1, 3, 3, 3))
        k[0, 0, 1, 1, 1] = 1
        np.testing.assert_array_equal(T.conv3d(x[:1], k), x[:1])
        out = T.conv3d(np.ones((1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)))
        assert out[0, 1, 1, 1] == 27.0
        assert out[0, 0, 0, 0] == 8.0

    def test_conv3d_matches_naive(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 3, 4, 4))
        k = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        np.testing.assert_allclose(T.conv3d(x, k, b), naive_conv3d(x, k, b), atol=1e-12)

    def test_chunked_path(self, monkeypatch):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(6, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        dout = rng.normal(size=(6, 3, 5, 5))
        whole = T.conv2d(x, k), T.conv2d_backward(dout, x, k)
        monkeypatch.setattr(T, "_COLS_BUDGET", 1)
        chunked = T.conv2d(x, k), T.conv2d_backward(dout, x, k)
        np.testing.assert_allclose(whole[0], chunked[0], atol=1e-12)
        for a, b in zip(whole[1], chunked[1]):
            np.testing.assert_allclose(a, b, atol=1e-12)


class TestPool:
    def test_constant(self):
        out, _ = T.maxpool2d(np.full((2, 4, 6), 3.5))
        assert out.shape == (2, 2, 3)
        assert np.all(out == 3.5)

    def test_window(self):
        out, _ = T.maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert out[0, 0, 0] == 4.0

    def test_shape_contract(self):
        assert T.maxpool2d(np.zeros((32, 16, 16)))[0].shape == (32, 8, 8)

    def test_odd_raises(self):
        with pytest.raises(ShapeError):
            T.maxpool2d(np.zeros((1, 5, 4)))

    def test_tie_routes_to_first(self):
        x = np.ones((1, 2, 2))
        out, arg = T.maxpool2d(x)
        dx = T.maxpool2d_backward(np.ones_like(out), arg, x.shape)
        np.testing.assert_array_equal(dx[0], [[1, 0], [0, 0]])

    def test_backward_routes_to_argmax(self):
        x = np.array([[[1.0, 5.0, 0.0, 0.0], [2.0, 3.0, 0.0, 7.0]]])
        out, arg = T.maxpool2d(x)
        dx = T.maxpool2d_backward(np.array([[[10.0, 20.0]]]), arg, x.shape)
        np.testing.assert_array_equal(dx, [[[0, 10, 0, 0], [0, 0, 0, 20]]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_window_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 4, 4))
        out, _ = T.maxpool2d(x)
        blocks = x.reshape(2, 2, 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(2, 2, 2, 4)
        assert np.all(out <= blocks.max(-1))
        assert np.all(out == blocks.max(-1))
        perm = rng.permutation(4)
        shuffled = blocks[..., perm].reshape(2, 2, 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(2, 4, 4)
        np.testing.assert_array_equal(T.maxpool2d(shuffled)[0], out)


class TestBatchNorm:
    def test_fixed_point(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(16, 3, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out, _ = T.batchnorm(x, np.ones(3), np.zeros(3), T.RunningStats.zeros(3), train=True)
        np.testing.assert_allclose(out, x, rtol=1e-5)

    def test_constant_input(self):
        out, _ = T.batchnorm(np.full((4, 2, 3, 3), 7.0), np.ones(2), np.array([0.5, -1.0]),
                             T.RunningStats.zeros(2), train=True)
        np.testing.assert_allclose(out[:, 0], 0.5)
        np.testing.assert_allclose(out[:, 1], -1.0)

    def test_hand_values(self):
        x = np.array([[1.0], [2.0], [3.0]])
        out, _ = T.batchnorm(x, np.array([2.0]), np.array([1.0]), T.RunningStats.zeros(1), train=True)
        np.testing.assert_allclose(out[:, 0], [-1.449, 1.0, 3.449], atol=1e-3)
        s = 2 / math.sqrt(2 / 3 + 1e-5)
        np.testing.assert_allclose(out[:, 0], [1 - s, 1.0, 1 + s], rtol=1e-12)

    def test_eval_before_train_raises(self):
        with pytest.raises(UninitializedStatsError):
            T.batchnorm(np.zeros((2, 1)), np.ones(1), np.zeros(1), T.RunningStats.zeros(1), train=False)

    def test_running_stats_momentum(self):
        stats = T.RunningStats.zeros(1)
        T.batchnorm(np.array([[0.0], [2.0]]), np.ones(1), np.zeros(1), stats, train=True)
        assert stats.mean[0] == 1.0 and stats.var[0] == 2.0
        T.batchnorm(np.array([[4.0], [4.0]]), np.ones(1), np.zeros(1), stats, train=True)
        np.testing.assert_allclose(stats.mean[0], 0.9 * 1.0 + 0.1 * 4.0, rtol=1e-6)
        np.testing.assert_allclose(stats.var[0], 0.9 * 2.0, rtol=1e-6)
        before = stats.mean.copy()
        T.batchnorm(np.array([[9.0], [9.0]]), np.ones(1), np.zeros(1), stats, train=False)
        np.testing.assert_array_equal(stats.mean, before)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(8, 20))
    def test_train_output_normalised(self, seed, batch):
        rng = np.random.default_rng(seed)
        x = rng.normal(3.0, 2.5, size=(batch, 4, 3, 3)).astype(np.float32)
        out, _ = T.batchnorm(x, np.ones(4, np.float32), np.zeros(4, np.float32),
                             T.RunningStats.zeros(4), train=True)
        assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-4)
        assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-3)


class TestPointwise:
    def test_dense(self):
        assert T.dense(np.array([0.5, 0.25]), np.ones((1, 2)), np.zeros(1))[0] == 0.75
        assert T.dense(np.ones(3), np.zeros((1, 3)), np.zeros(1))[0] == 0
        with pytest.raises(ShapeError):
            T.dense(np.ones(3), np.zeros((1, 4)), np.zeros(1))

    def test_sigmoid_tanh(self):
        assert T.sigmoid(np.array(0.0)) == 0.5
        np.testing.assert_allclose(T.sigmoid(np.array(math.log(3))), 0.75, rtol=1e-15)
        assert T.tanh(np.array(0.0)) == 0
        big = T.sigmoid(np.array([-800.0, 800.0]))
        assert np.all(np.isfinite(big)) and big[0] == 0 and big[1] == 1

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-50, 50))
    def test_sigmoid_symmetry(self, v):
        x = np.array(v, dtype=np.float64)
        assert abs(T.sigmoid(x) + T.sigmoid(-x) - 1) <= 1e-12
        assert 0 <= T.sigmoid(x) <= 1
        assert -1 <= T.tanh(x) <= 1

    def test_sigmoid_keeps_float32(self):
        assert T.sigmoid(np.zeros(3, np.float32)).dtype == np.float32

    def test_bce(self):
        eps = T.BCE_EPS
        loss, _ = T.bce_loss(1 - eps, 1)
        assert loss < 1e-6
        assert T.bce_loss(0.5, 1)[0] == pytest.approx(math.log(2), abs=1e-6)
        assert T.bce_loss(0.5, 0)[0] == pytest.approx(0.693147, abs=1e-6)
        assert np.isfinite(T.bce_loss(0.0, 1)[0])
        assert np.isfinite(T.bce_loss(1.0, 0)[0])

    def test_bce_logit_gradient(self):
        z = np.array([-2.0, 0.3, 4.0])
        y = np.array([1.0, 0.0, 1.0])
        _, dz = T.bce_with_logits(z, y)
        np.testing.assert_allclose(dz, T.sigmoid(z) - y)


def _fd_setup(seed):
    return np.random.default_rng(seed)


class TestGradCheck:
    def test_conv2d(self):
        rng = _fd_setup(7)
        x = rng.normal(size=(2, 3, 5, 5))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        r = rng.normal(size=(2, 4, 5, 5))
        dx, dk, db = T.conv2d_backward(r, x, k)
        res = T.grad_check(lambda: np.sum(T.conv2d(x, k, b) * r), {"x": x, "k": k, "b": b},
                           {"x": dx, "k": dk, "b": db}, seed=7)
        assert res.max_rel_error < 1e-6

    def test_conv3d(self):
        rng = _fd_setup(8)
        x = rng.normal(size=(2, 2, 3, 4, 4))
        k = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        r = rng.normal(size=(2, 3, 3, 4, 4))
        dx, dk, db = T.conv3d_backward(r, x, k)
        res = T.grad_check(lambda: np.sum(T.conv3d(x, k, b) * r), {"x": x, "k": k, "b": b},
                           {"x": dx, "k": dk, "b": db}, seed=8)
        assert res.max_rel_error < 1e-6

    def test_maxpool_away_from_ties(self):
        rng = _fd_setup(9)
        x = rng.permutation(np.arange(2 * 3 * 8 * 8)).reshape(2, 3, 8, 8) * 1e-2
        r = rng.normal(size=(2, 3, 4, 4))
        out, arg = T.maxpool2d(x)
        dx = T.maxpool2d_backward(r, arg, x.shape)
        res = T.grad_check(lambda: np.sum(T.maxpool2d(x)[0] * r), {"x": x}, {"x": dx}, seed=9, samples=64)
        assert res.max_rel_error < 1e-6

    @pytest.mark.parametrize("train", [True, False])
    def test_batchnorm(self, train):
        rng = _fd_setup(10)
        x = rng.normal(1.0, 2.0, size=(4, 3, 2, 2))
        g = rng.normal(size=3)
        b = rng.normal(size=3)
        r = rng.normal(size=x.shape)
        stats = T.RunningStats(rng.normal(size=3), rng.uniform(0.5, 2, size=3), 1)

        def f():
            s = T.RunningStats(stats.mean.copy(), stats.var.copy(), stats.count)
            return np.sum(T.batchnorm(x, g, b, s, train)[0] * r)

        s = T.RunningStats(stats.mean.copy(), stats.var.copy(), stats.count)
        _, cache = T.batchnorm(x, g, b, s, train)
        dx, dg, db = T.batchnorm_backward(r, cache)
        res = T.grad_check(f, {"x": x, "g": g, "b": b}, {"x": dx, "g": dg, "b": db}, seed=10)
        assert res.max_rel_error < 1e-6

    def test_dense(self):
        rng = _fd_setup(11)
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(1, 5))
        b = rng.normal(size=1)
        r = rng.normal(size=(3, 1))
        dx, dw, db = T.dense_backward(r, x, w)
        res = T.grad_check(lambda: np.sum(T.dense(x, w, b) * r), {"x": x, "w": w, "b": b},
                           {"x": dx, "w": dw, "b": db}, seed=11)
        assert res.max_rel_error < 1e-6

    @pytest.mark.parametrize("name", ["sigmoid", "tanh"])
    def test_pointwise(self, name):
        rng = _fd_setup(12)
        x = rng.normal(size=8)
        r = rng.normal(size=8)
        fwd = getattr(T, name)
        bwd = getattr(T, name + "_backward")
        dx = bwd(r, fwd(x))
        res = T.grad_check(lambda: np.sum(fwd(x) * r), {"x": x}, {"x": dx}, seed=12)
        assert res.max_rel_error < 1e-8

    def test_bce_logits(self):
        z = np.array([-3.0, -0.2, 0.5, 2.0])
        y = np.array([1.0, 0.0, 1.0, 0.0])
        _, dz = T.bce_with_logits(z, y)
        res = T.grad_check(lambda: np.sum(T.bce_with_logits(z, y)[0]), {"z": z}, {"z": dz})
        assert res.max_rel_error < 1e-8

    def test_detects_wrong_gradient(self):
        x = np.linspace(-1, 1, 10)
        res = T.grad_check(lambda: np.sum(x**2), {"x": x}, {"x": 3 * x})
        assert res.max_rel_error > 0.1

    def test_non_finite_identifies_coordinate(self):
        x = np.array([1.0, 2.0])
        g = np.array([1.0, np.nan])
        with pytest.raises(GradCheckError) as err:
            T.grad_check(lambda: np.sum(x), {"x": x}, {"x": g})
        assert err.value.name == "x" and err.value.index == (1,)
