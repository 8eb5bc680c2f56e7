"""Reverse-mode autodiff: layer forwards against loop oracles, backwards against finite differences."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neoseize import autodiff as ad
from neoseize.autodiff import RunningStats, Tensor, grad_check, parameter
from neoseize.errors import BatchError, NonFiniteError, ShapeError, UsageError

RTOL = 1e-4


def naive_conv(x, w, b, pads):
    """Quadruple loop cross-correlation with explicit zero padding."""
    (pt, pb), (pl, pr) = pads
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + pt + pb, wd + pl + pr))
    xp[:, :, pt:pt + h, pl:pl + wd] = x
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    out[i, o, r, c] = np.sum(xp[i, :, r:r + kh, c:c + kw] * w[o]) + b[o]
    return out


def rand(*shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


class TestConv2d:
    def test_identity_1x1(self):
        x = rand(2, 3, 4, 5)
        w = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_ones_kernel(self):
        out = ad.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3)))).data
        np.testing.assert_array_equal(out, 9)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
           st.integers(1, 3), st.integers(0, 2), st.integers(0, 1), st.integers(0, 2 ** 16))
    def test_naive_oracle(self, n, cin, cout, kh, kw, pt, pr, seed):
        x = rand(n, cin, 4, 5, seed=seed)
        w = rand(cout, cin, kh, kw, seed=seed + 1)
        b = rand(cout, seed=seed + 2)
        pads = ((pt, 1 - min(pt, 1)), (0, pr))
        got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=pads).data
        np.testing.assert_allclose(got, naive_conv(x, w, b, pads), atol=1e-10)

    def test_gradient(self):
        x, w, b = parameter(rand(2, 2, 4, 3)), parameter(rand(3, 2, 2, 2, seed=1)), parameter(rand(3, seed=2))
        err = grad_check(lambda x, w, b: ad.tsum(ad.mul(ad.conv2d(x, w, b, padding=((0, 1), (0, 1))),
                                                        Tensor(rand(2, 3, 4, 3, seed=3)))), [x, w, b])
        assert err <= RTOL

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 1, 1))))
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((1, 2, 1, 1))))


class TestBatchNorm:
    def test_train_normalises(self):
        x = rand(8, 3, 4, 4, scale=5) + 3
        y = ad.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), RunningStats.fresh(3)).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)

    def test_eval_identity(self):
        x = rand(2, 3, 2, 2)
        y = ad.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), RunningStats.fresh(3),
                           mode="eval").data
        np.testing.assert_allclose(y, x / math.sqrt(1 + 1e-5), rtol=1e-14)

    def test_running_update(self):
        x = rand(4, 2, 3, 3, seed=5)
        st_ = RunningStats.fresh(2)
        ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, momentum=0.1)
        np.testing.assert_allclose(st_.mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(st_.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradient(self, mode):
        x = parameter(rand(3, 2, 2, 3))
        g, b = parameter(rand(2, seed=1) + 1), parameter(rand(2, seed=2))
        stats = RunningStats(np.array([0.2, -0.1]), np.array([1.5, 0.7]))
        proj = Tensor(rand(3, 2, 2, 3, seed=4))

        def f(x, g, b):
            s = RunningStats(stats.mean.copy(), stats.var.copy())
            return ad.tsum(ad.mul(ad.batchnorm2d(x, g, b, s, mode=mode), proj))

        assert grad_check(f, [x, g, b]) <= RTOL

    def test_batch_of_one(self):
        with pytest.raises(BatchError):
            ad.batchnorm2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                           RunningStats.fresh(2))


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])

    def test_relu_grad_at_zero(self):
        x = parameter(np.array([0.0, 1.0]))
        ad.tsum(ad.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_sigmoid(self):
        out = ad.sigmoid(Tensor(np.array([0.0, 50.0, -50.0, 800.0, -800.0]))).data
        assert out[0] == 0.5
        assert abs(out[1] - 1) <= 1e-15 and abs(out[2]) <= 1e-15
        assert out[3] == 1.0 and out[4] == 0.0

    def test_sigmoid_gradient(self):
        x = parameter(rand(7) * 4)
        assert grad_check(lambda x: ad.tsum(ad.mul(ad.sigmoid(x), Tensor(rand(7, seed=1)))), [x]) <= RTOL


class TestMaxPool:
    def test_small(self):
        assert ad.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 4

    def test_trajectory(self):
        x = Tensor(np.zeros((1, 1, 20, 11)))
        shapes = []
        for _ in range(3):
            x = ad.maxpool2d(x)
            shapes.append(x.shape[2:])
        assert shapes == [(10, 5), (5, 2), (2, 1)]

    def test_routes_to_argmax(self):
        x = parameter(np.array([[[[1.0, 5.0, 0.0], [2.0, 3.0, 9.0]]]]))
        ad.tsum(ad.maxpool2d(x)).backward()
        np.testing.assert_array_equal(x.grad, [[[[0, 1, 0], [0, 0, 0]]]])

    def test_first_max_wins_ties(self):
        x = parameter(np.ones((1, 1, 2, 2)))
        ad.tsum(ad.maxpool2d(x)).backward()
        np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])

    def test_gradient(self):
        x = parameter(rand(2, 2, 5, 4))
        assert grad_check(lambda x: ad.tsum(ad.mul(ad.maxpool2d(x), Tensor(rand(2, 2, 2, 2, seed=1)))),
                          [x]) <= RTOL


class TestDropout:
    def test_identities(self):
        x = Tensor(rand(3, 4))
        assert ad.dropout(x, 0.0, "train", 0) is x
        assert ad.dropout(x, 0.7, "eval", 0) is x

    def test_drop_fraction(self):
        y = ad.dropout(Tensor(np.ones(10 ** 5)), 0.3, "train", np.random.default_rng(0)).data
        assert abs(np.mean(y == 0) - 0.3) <= 0.01
        np.testing.assert_allclose(y[y != 0], 1 / 0.7)

    def test_seeded(self):
        a = ad.dropout(Tensor(np.ones(100)), 0.5, "train", 3).data
        b = ad.dropout(Tensor(np.ones(100)), 0.5, "train", 3).data
        np.testing.assert_array_equal(a, b)


class TestLinearFamily:
    def test_identity(self):
        x = rand(3, 4)
        np.testing.assert_array_equal(ad.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_linear_gradient(self):
        x, w, b = parameter(rand(3, 4)), parameter(rand(4, 2, seed=1)), parameter(rand(2, seed=2))
        assert grad_check(lambda x, w, b: ad.tsum(ad.mul(ad.linear(x, w, b), Tensor(rand(3, 2, seed=3)))),
                          [x, w, b]) <= RTOL

    def test_gap_constant(self):
        x = np.broadcast_to(np.array([1.5, -2.0])[None, :, None, None], (2, 2, 3, 4)).copy()
        np.testing.assert_array_equal(ad.global_avg_pool2d(Tensor(x)).data[..., 0, 0], [[1.5, -2.0]] * 2)

    def test_channelwise_identity(self):
        x = rand(2, 3, 2, 2)
        np.testing.assert_array_equal(ad.channelwise_mul(Tensor(x), Tensor(np.ones((2, 3, 1, 1)))).data, x)

    def test_gap_and_scale_gradients(self):
        x, s = parameter(rand(2, 3, 2, 2)), parameter(rand(2, 3, 1, 1, seed=1))
        proj = Tensor(rand(2, 3, 2, 2, seed=2))
        assert grad_check(lambda x, s: ad.tsum(ad.mul(ad.channelwise_mul(x, s), proj)), [x, s]) <= RTOL
        assert grad_check(lambda x: ad.tsum(ad.mul(ad.global_avg_pool2d(x), Tensor(rand(2, 3, 1, 1)))),
                          [x]) <= RTOL

    def test_scale_shape_error(self):
        with pytest.raises(ShapeError):
            ad.channelwise_mul(Tensor(np.zeros((2, 3, 2, 2))), Tensor(np.ones((2, 3))))


class TestWeightedBce:
    def test_perfect(self):
        y = np.array([0.0, 1.0, 1.0])
        assert ad.weighted_bce(Tensor(y), y).item() < 1e-6

    def test_half(self):
        assert ad.weighted_bce(Tensor(np.full(4, 0.5)), [0, 1, 0, 1]).item() == pytest.approx(0.5 * math.log(2))

    def test_formula(self):
        p, y = np.array([0.2, 0.9, 0.6]), np.array([0, 1, 1])
        expect = -np.mean(0.52 * y * np.log(p) + 0.48 * (1 - y) * np.log(1 - p))
        assert ad.weighted_bce(Tensor(p), y, 0.52).item() == pytest.approx(expect, rel=1e-14)

    def test_gradient(self):
        p = parameter(np.array([0.1, 0.35, 0.8, 0.55]))
        assert grad_check(lambda p: ad.weighted_bce(p, [0, 1, 1, 0], 0.52), [p], h=1e-7) <= 1e-6

    def test_clamped_extremes_finite(self):
        assert np.isfinite(ad.weighted_bce(Tensor(np.array([0.0, 1.0])), [1, 0]).item())


class TestEngine:
    def test_square(self):
        x = parameter(np.array(3.0))
        ad.mul(x, x).backward()
        assert x.grad == 6

    def test_backward_twice_errors(self):
        x = parameter(np.array(2.0))
        y = ad.mul(x, x)
        y.backward()
        with pytest.raises(UsageError):
            y.backward()

    def test_non_scalar(self):
        with pytest.raises(UsageError):
            ad.mul(parameter(np.ones(3)), 2.0).backward()

    def test_shared_node_accumulates(self):
        x = parameter(np.array(2.0))
        y = ad.mul(x, 3.0)
        ad.add(ad.mul(y, y), y).backward()  # 9x^2 + 3x
        assert x.grad == pytest.approx(39)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_forward(self):
        with pytest.raises(NonFiniteError):
            ad.mul(parameter(np.array([1e308])), 1e10)

    def test_broadcast_add(self):
        a, b = parameter(rand(3, 4)), parameter(rand(4, seed=1))
        assert grad_check(lambda a, b: ad.tsum(ad.mul(ad.add(a, b), Tensor(rand(3, 4, seed=2)))), [a, b]) <= RTOL
