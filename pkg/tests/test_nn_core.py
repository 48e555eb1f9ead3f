import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from matforge.errors import ConfigurationError, StateError
from matforge.nn import (
    LRN,
    Conv2D,
    ConvParams,
    Dropout,
    FullyConnected,
    MaxPool,
    ReLU,
    SoftmaxLoss,
    conv2d_backward,
    conv2d_forward,
    dropout_forward,
    fc_forward,
    gradient_check,
    lrn_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_loss,
)


def brute_conv(x, w, b, stride, pad, groups):
    """Direct nested-loop cross-correlation, independent of the im2col path."""
    n, c, h, wd = x.shape
    f, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    fg = f // groups
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            g = fi // fg
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, g * cg:(g + 1) * cg, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[ni, fi, i, j] = np.sum(patch * w[fi]) + b[fi]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv:
    def test_identity_kernel(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        p = ConvParams(1, 1, 1)
        y = conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1), p)
        np.testing.assert_array_equal(y, x)

    def test_alexnet_first_layer_shape(self):
        x = np.zeros((1, 3, 227, 227), dtype=np.float32)
        w = np.zeros((96, 3, 11, 11), dtype=np.float32)
        y = conv2d_forward(x, w, np.zeros(96, dtype=np.float32), ConvParams(96, 11, 11, stride=4))
        assert y.shape == (1, 96, 55, 55)

    def test_constant_input_all_ones_kernel(self):
        x = np.ones((1, 1, 6, 6))
        y = conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1), ConvParams(1, 3, 3))
        np.testing.assert_array_equal(y, np.full((1, 1, 4, 4), 9.0))

    @pytest.mark.parametrize("stride,pad,groups", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (3, 0, 2), (1, 1, 4)])
    def test_matches_brute_force(self, rng, stride, pad, groups):
        x = rng.standard_normal((2, 4, 9, 8))
        w = rng.standard_normal((8, 4 // groups, 3, 3))
        b = rng.standard_normal(8)
        p = ConvParams(8, 3, 3, stride, pad, groups)
        np.testing.assert_allclose(conv2d_forward(x, w, b, p), brute_conv(x, w, b, stride, pad, groups),
                                   rtol=1e-12, atol=1e-12)

    def test_groups_equal_independent_slices(self, rng):
        x = rng.standard_normal((1, 6, 7, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        grouped = conv2d_forward(x, w, b, ConvParams(4, 3, 3, pad=1, groups=2))
        halves = [conv2d_forward(x[:, 3 * g:3 * g + 3], w[2 * g:2 * g + 2], b[2 * g:2 * g + 2],
                                 ConvParams(2, 3, 3, pad=1)) for g in range(2)]
        np.testing.assert_allclose(grouped, np.concatenate(halves, axis=1), rtol=1e-13)

    def test_channel_mismatch_is_configuration_error(self):
        with pytest.raises(ConfigurationError):
            conv2d_forward(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1), ConvParams(1, 3, 3))

    def test_bad_params(self):
        with pytest.raises(ConfigurationError):
            ConvParams(3, 3, 3, groups=2)
        with pytest.raises(ConfigurationError):
            ConvParams(4, 3, 3, stride=0)

    def test_identity_backward(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        p = ConvParams(1, 1, 1)
        gx, gw, gb = conv2d_backward(np.ones((1, 1, 3, 3)), x, np.ones((1, 1, 1, 1)), p)
        np.testing.assert_array_equal(gx, np.ones_like(x))
        assert gw.item() == x.sum()
        assert gb.item() == 9.0

    def test_zero_grad(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        gx, gw, gb = conv2d_backward(np.zeros((1, 3, 3, 3)), x, w, ConvParams(3, 3, 3))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_gradcheck(self, rng):
        layer = Conv2D(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), ConvParams(3, 3, 3))
        assert gradient_check(layer, rng.standard_normal((1, 2, 5, 5)), eps=1e-5) < 1e-5

    def test_backward_before_forward(self):
        layer = Conv2D(np.zeros((1, 1, 1, 1)), np.zeros(1), ConvParams(1, 1, 1))
        with pytest.raises(StateError):
            layer.backward(np.zeros((1, 1, 1, 1)))


class TestReLU:
    def test_definition(self):
        np.testing.assert_array_equal(relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])

    def test_all_negative(self):
        x = -np.ones((2, 3))
        assert not relu_forward(x).any()
        assert not relu_backward(np.ones_like(x), x).any()

    def test_gradcheck_away_from_kink(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        x[np.abs(x) < 1e-3] = 0.5
        assert gradient_check(ReLU(), x) < 1e-7


class TestMaxPool:
    def test_ramp(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out, _ = maxpool_forward(x, 2, 2)
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])

    def test_constant_ties_go_to_first(self):
        x = np.ones((1, 1, 4, 4))
        out, arg = maxpool_forward(x, 2, 2)
        np.testing.assert_array_equal(out, np.ones((1, 1, 2, 2)))
        g = maxpool_backward(np.ones((1, 1, 2, 2)), arg, x.shape, 2, 2)
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1
        np.testing.assert_array_equal(g[0, 0], expected)

    def test_shape(self):
        out, _ = maxpool_forward(np.zeros((1, 96, 55, 55), dtype=np.float32), 3, 2)
        assert out.shape == (1, 96, 27, 27)

    def test_matches_brute_force(self, rng):
        x = rng.standard_normal((2, 3, 9, 7))
        out, _ = maxpool_forward(x, 3, 2)
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                np.testing.assert_array_equal(out[:, :, i, j], x[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3].max(axis=(2, 3)))

    @given(arrays(np.float64, (1, 2, 6, 6), elements=st.floats(-10, 10)), st.integers(1, 3))
    @settings(max_examples=50, deadline=None)
    def test_gradient_mass_conserved_without_overlap(self, x, size):
        out, arg = maxpool_forward(x, size, size)
        g = np.random.default_rng(0).standard_normal(out.shape)
        gin = maxpool_backward(g, arg, x.shape, size, size)
        assert np.isclose(gin.sum(), g.sum(), rtol=1e-12, atol=1e-12)

    def test_gradcheck(self, rng):
        assert gradient_check(MaxPool(3, 2), rng.standard_normal((1, 2, 7, 7))) < 1e-5


class TestLRN:
    def test_alpha_zero(self, rng):
        x = rng.standard_normal((1, 7, 3, 3))
        out, _ = lrn_forward(x, 5, 0.0, 0.75, 1.0)
        np.testing.assert_array_equal(out, x)
        out, _ = lrn_forward(x, 5, 0.0, 0.75, 2.0)
        np.testing.assert_allclose(out, x * 2.0 ** -0.75, rtol=1e-15)

    def test_single_channel_scalar(self):
        out, _ = lrn_forward(np.ones((1, 1, 1, 1)), 5, 1e-4, 0.75, 1.0)
        assert out.item() == pytest.approx((1 + 2e-5) ** -0.75, rel=1e-14)
        assert out.item() == pytest.approx(0.999985, abs=1e-6)

    def test_matches_direct_window_sum(self, rng):
        x = rng.standard_normal((2, 9, 3, 2))
        n, alpha, beta, k = 5, 1e-2, 0.75, 2.0
        out, _ = lrn_forward(x, n, alpha, beta, k)
        expected = np.empty_like(x)
        for c in range(9):
            lo, hi = max(0, c - 2), min(9, c + 3)
            expected[:, c] = x[:, c] / (k + alpha / n * (x[:, lo:hi] ** 2).sum(axis=1)) ** beta
        np.testing.assert_allclose(out, expected, rtol=1e-13)

    def test_even_window_rejected(self):
        with pytest.raises(ConfigurationError):
            lrn_forward(np.ones((1, 3, 1, 1)), n=4)

    def test_gradcheck(self, rng):
        assert gradient_check(LRN(5, 0.5, 0.75, 1.0), rng.standard_normal((2, 7, 3, 3))) < 1e-5


class TestFullyConnected:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(fc_forward(x, np.eye(4), np.zeros(4)), x)

    def test_hand_product(self):
        out = fc_forward(np.array([[1.0, 1.0]]), np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]))
        np.testing.assert_array_equal(out, [[5.0, 7.0]])

    def test_mismatch(self):
        with pytest.raises(ConfigurationError):
            fc_forward(np.zeros((1, 3)), np.zeros((4, 2)), np.zeros(2))

    def test_gradcheck(self, rng):
        layer = FullyConnected(rng.standard_normal((6, 4)), rng.standard_normal(4))
        assert gradient_check(layer, rng.standard_normal((3, 6))) < 1e-7


class TestDropout:
    def test_ratio_zero_identity(self, rng):
        x = rng.standard_normal((4, 5))
        assert dropout_forward(x, 0.0, True, rng)[0] is x
        assert dropout_forward(x, 0.0, False)[0] is x

    def test_test_mode_identity(self, rng):
        x = rng.standard_normal((4, 5))
        out = Dropout(0.7).forward(x, train=False)
        assert out is x

    def test_mask_values(self, rng):
        _, mask = dropout_forward(np.ones((100,)), 0.25, True, rng)
        assert set(np.unique(mask)) <= {0.0, 1 / 0.75}

    def test_expectation(self):
        rng = np.random.default_rng(7)
        x = np.ones((10, 10))
        total = np.zeros_like(x)
        trials = 100_000
        for _ in range(trials // 1000):
            masks = rng.random((1000, 10, 10)) >= 0.5
            total += (masks * 2.0).sum(axis=0)
        mean = total / trials
        assert ((mean >= 0.98) & (mean <= 1.02)).all()

    def test_bad_ratio(self):
        with pytest.raises(ConfigurationError):
            dropout_forward(np.ones(3), 1.0, True, np.random.default_rng())

    def test_deterministic_given_seed(self):
        x = np.ones((3, 8))
        a = dropout_forward(x, 0.5, True, np.random.default_rng(3))[0]
        b = dropout_forward(x, 0.5, True, np.random.default_rng(3))[0]
        np.testing.assert_array_equal(a, b)


class TestSoftmaxLoss:
    def test_uniform(self):
        loss, probs, _ = softmax_loss(np.zeros((2, 10)), [0, 3])
        np.testing.assert_allclose(probs, 0.1)
        assert loss == pytest.approx(np.log(10), abs=1e-12)
        assert loss == pytest.approx(2.302585, abs=1e-6)

    def test_saturated(self):
        logits = np.zeros((1, 10))
        logits[0, 4] = 1000.0
        loss, probs, _ = softmax_loss(logits, [4])
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(probs[0], np.eye(10)[4], atol=1e-12)

    def test_gradient_formula(self, rng):
        logits = rng.standard_normal((4, 10))
        labels = [1, 2, 3, 9]
        _, probs, grad = softmax_loss(logits, labels)
        np.testing.assert_allclose(grad, (probs - np.eye(10)[labels]) / 4)

    def test_gradcheck(self, rng):
        assert gradient_check(SoftmaxLoss(), rng.standard_normal((3, 10)), labels=[0, 5, 9]) < 1e-5

    def test_label_range(self):
        with pytest.raises(ConfigurationError):
            softmax_loss(np.zeros((1, 10)), [10])

    @given(arrays(np.float64, (3, 10), elements=st.floats(-1e3, 1e3)))
    @settings(max_examples=100, deadline=None)
    def test_rows_sum_to_one_and_argmax_preserved(self, logits):
        p = softmax(logits)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        # argmax agrees up to logit gaps below double resolution
        for row_l, row_p in zip(logits, p):
            assert row_l[np.argmax(row_p)] >= row_l.max() - 1e-12 * max(1.0, abs(row_l.max()))


class TestGradientCheck:
    def test_catches_a_wrong_backward(self, rng):
        class BadReLU(ReLU):
            def backward(self, grad_out):
                return 2 * super().backward(grad_out)

        x = rng.standard_normal((1, 4)) + 3.0
        assert gradient_check(BadReLU(), x) > 0.1

    def test_non_finite_input(self):
        with pytest.raises(FloatingPointError):
            gradient_check(ReLU(), np.array([[np.nan]]))
