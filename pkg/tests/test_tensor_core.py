import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fourcropnet import tensor_core as tc
from fourcropnet.errors import DimensionMismatchError, NonFiniteError

from conftest import max_rel_error, numerical_gradient


def _conv_loss_factory(x, w, b, spec, g):
    def loss():
        out, _ = tc.conv2d_forward(x, w, b, spec)
        return float(np.sum(out * g))
    return loss


class TestConv2d:
    def test_stem_shape(self):
        x = np.zeros((1, 224, 224, 3), np.float32)
        spec = tc.ConvSpec(3, 32)
        out, _ = tc.conv2d_forward(x, np.zeros(spec.weight_shape, np.float32), np.zeros(32, np.float32), spec)
        assert out.shape == (1, 224, 224, 32)

    def test_zero_input_gives_bias(self, rng):
        spec = tc.ConvSpec(2, 4)
        w = rng.standard_normal(spec.weight_shape).astype(np.float32)
        b = np.array([0.5, -1.0, 2.0, 3.5], np.float32)
        out, _ = tc.conv2d_forward(np.zeros((2, 6, 6, 2), np.float32), w, b, spec)
        assert np.array_equal(out, np.broadcast_to(b, out.shape))

    def test_gradients_match_finite_differences(self, f64, rng):
        spec = tc.ConvSpec(2, 3)
        x = rng.standard_normal((1, 5, 5, 2))
        w = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal(3)
        g = rng.standard_normal((1, 5, 5, 3))
        _, cache = tc.conv2d_forward(x, w, b, spec)
        dx, dw, db = tc.conv2d_backward(g, cache)
        loss = _conv_loss_factory(x, w, b, spec, g)
        assert max_rel_error(dx, numerical_gradient(loss, x)) < 1e-4
        assert max_rel_error(dw, numerical_gradient(loss, w)) < 1e-4
        assert max_rel_error(db, numerical_gradient(loss, b)) < 1e-4

    @pytest.mark.parametrize("stride,padding,kernel", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3), (3, 2, 3)])
    def test_strided_gradients(self, f64, rng, stride, padding, kernel):
        spec = tc.ConvSpec(2, 2, kernel=kernel, stride=stride, padding=padding)
        x = rng.standard_normal((2, 7, 6, 2))
        w = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal(2)
        out, cache = tc.conv2d_forward(x, w, b, spec)
        g = rng.standard_normal(out.shape)
        dx, dw, _ = tc.conv2d_backward(g, cache)
        loss = _conv_loss_factory(x, w, b, spec, g)
        assert max_rel_error(dx, numerical_gradient(loss, x)) < 1e-4
        assert max_rel_error(dw, numerical_gradient(loss, w)) < 1e-4

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0), (2, 2)])
    def test_im2col_matches_direct_loop(self, rng, stride, padding):
        spec = tc.ConvSpec(3, 5, stride=stride, padding=padding)
        x = rng.standard_normal((2, 9, 8, 3)).astype(np.float32)
        w = rng.standard_normal(spec.weight_shape).astype(np.float32)
        b = rng.standard_normal(5).astype(np.float32)
        fast, _ = tc.conv2d_forward(x, w, b, spec)
        ref = tc.conv2d_direct(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64), spec)
        np.testing.assert_allclose(fast, ref, atol=1e-5, rtol=1e-6)

    def test_im2col_matches_direct_loop_f64(self, rng):
        spec = tc.ConvSpec(3, 4)
        x, w, b = rng.standard_normal((1, 6, 6, 3)), rng.standard_normal(spec.weight_shape), rng.standard_normal(4)
        fast, _ = tc.conv2d_forward(x, w, b, spec)
        assert np.max(np.abs(fast - tc.conv2d_direct(x, w, b, spec))) < 1e-6

    @settings(max_examples=60, deadline=None)
    @given(h=st.integers(1, 12), k=st.integers(1, 4), p=st.integers(0, 2), s=st.integers(1, 3))
    def test_output_shape_law(self, h, k, p, s):
        expected = (h - k + 2 * p) // s + 1
        if expected < 1 or k > h + 2 * p:
            return
        spec = tc.ConvSpec(1, 2, kernel=k, stride=s, padding=p)
        out, _ = tc.conv2d_forward(np.ones((1, h, h, 1)), np.ones(spec.weight_shape), np.zeros(2), spec)
        assert out.shape == (1, expected, expected, 2)

    def test_linearity(self, rng):
        spec = tc.ConvSpec(3, 4)
        w = rng.standard_normal(spec.weight_shape)
        zero = np.zeros(4)
        x1, x2 = rng.standard_normal((2, 1, 6, 6, 3))
        a, c = 1.7, -0.4
        lhs, _ = tc.conv2d_forward(a * x1 + c * x2, w, zero, spec)
        y1, _ = tc.conv2d_forward(x1, w, zero, spec)
        y2, _ = tc.conv2d_forward(x2, w, zero, spec)
        assert np.max(np.abs(lhs - (a * y1 + c * y2))) < 1e-5

    def test_channel_mismatch_names_axis(self):
        spec = tc.ConvSpec(3, 4)
        with pytest.raises(DimensionMismatchError) as err:
            tc.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros(spec.weight_shape), np.zeros(4), spec)
        assert err.value.axis == "channels"

    def test_weight_mismatch(self):
        spec = tc.ConvSpec(3, 4)
        with pytest.raises(DimensionMismatchError) as err:
            tc.conv2d_forward(np.zeros((1, 4, 4, 3)), np.zeros((3, 3, 3, 5)), np.zeros(4), spec)
        assert err.value.axis == "weights"

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            tc.ConvSpec(1, 1, stride=0)
        with pytest.raises(ValueError):
            tc.ConvSpec(1, 1, padding=-1)


class TestMaxPool:
    @pytest.mark.parametrize("shape,expected", [
        ((1, 224, 224, 32), (1, 112, 112, 32)),
        ((1, 56, 56, 64), (1, 28, 28, 64)),
        ((1, 56, 56, 128), (1, 28, 28, 128)),
    ])
    def test_shapes(self, shape, expected):
        out, _ = tc.maxpool2d_forward(np.zeros(shape, np.float32))
        assert out.shape == expected

    def test_single_window_routes_gradient(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        out, cache = tc.maxpool2d_forward(x)
        assert out.item() == 4.0
        dx = tc.maxpool2d_backward(np.ones((1, 1, 1, 1)), cache)
        assert np.array_equal(dx.reshape(2, 2), [[0, 0], [0, 1]])

    def test_odd_extent_rejected(self):
        with pytest.raises(DimensionMismatchError):
            tc.maxpool2d_forward(np.zeros((1, 5, 4, 1)))

    def test_backward_preserves_gradient_mass(self, rng):
        x = rng.standard_normal((2, 8, 6, 3))
        out, cache = tc.maxpool2d_forward(x)
        g = rng.standard_normal(out.shape)
        dx = tc.maxpool2d_backward(g, cache)
        assert math.isclose(dx.sum(), g.sum(), rel_tol=1e-12, abs_tol=1e-12)
        assert np.count_nonzero(dx) <= g.size

    def test_gradient_finite_differences(self, f64, rng):
        x = rng.standard_normal((1, 4, 4, 2))
        g = rng.standard_normal((1, 2, 2, 2))
        _, cache = tc.maxpool2d_forward(x)
        dx = tc.maxpool2d_backward(g, cache)
        num = numerical_gradient(lambda: float(np.sum(tc.maxpool2d_forward(x)[0] * g)), x)
        assert max_rel_error(dx, num) < 1e-4


class TestGlobalAvgPool:
    def test_constant_map(self):
        x = np.full((1, 5, 5, 3), 2.5)
        out, _ = tc.global_avg_pool_forward(x)
        assert np.allclose(out, 2.5)

    def test_shape(self):
        out, _ = tc.global_avg_pool_forward(np.zeros((1, 28, 28, 128)))
        assert out.shape == (1, 128)

    def test_mean_of_four(self):
        out, _ = tc.global_avg_pool_forward(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1))
        assert out.item() == 2.5

    def test_backward_is_uniform(self):
        dx = tc.global_avg_pool_backward(np.array([[4.0, 8.0]]), (1, 2, 2, 2))
        assert np.array_equal(dx[..., 0], np.ones((1, 2, 2)))
        assert np.array_equal(dx[..., 1], np.full((1, 2, 2), 2.0))


class TestDense:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        out, _ = tc.dense_forward(x, np.eye(4), np.zeros(4))
        assert np.array_equal(out, x)

    def test_classifier_shape(self):
        out, _ = tc.dense_forward(np.zeros((1, 128)), np.zeros((128, 15)), np.zeros(15))
        assert out.shape == (1, 15)

    def test_gradients(self, f64, rng):
        x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
        g = rng.standard_normal((3, 5))
        _, cache = tc.dense_forward(x, w, b)
        dx, dw, db = tc.dense_backward(g, cache)
        loss = lambda: float(np.sum(tc.dense_forward(x, w, b)[0] * g))  # noqa: E731
        for analytic, arr in ((dx, x), (dw, w), (db, b)):
            assert max_rel_error(analytic, numerical_gradient(loss, arr)) < 1e-4

    def test_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            tc.dense_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(5))


class TestActivations:
    def test_relu(self):
        out, _ = tc.relu_forward(np.array([-1.0, 0.0, 2.0]))
        assert np.array_equal(out, [0, 0, 2])

    def test_relu_subgradient_at_zero(self):
        assert tc.relu_backward(np.ones(3), np.array([-1.0, 0.0, 1.0])).tolist() == [0, 0, 1]

    def test_sigmoid_zero(self):
        assert tc.sigmoid(np.array([0.0])).item() == 0.5

    def test_sigmoid_gradient(self, rng):
        x = rng.standard_normal(6)
        s, cache = tc.sigmoid_forward(x)
        analytic = tc.sigmoid_backward(np.ones(6), cache)
        num = numerical_gradient(lambda: float(tc.sigmoid(x).sum()), x)
        assert np.max(np.abs(analytic - num)) < 1e-6

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_sigmoid_strictly_inside_unit_interval(self, dtype):
        s = tc.sigmoid(np.array([-1e4, -50, 50, 1e4], dtype=dtype))
        assert np.all(s > 0) and np.all(s < 1)


class TestSoftmax:
    def test_uniform(self):
        p = tc.softmax(np.zeros((1, 15)))
        assert np.allclose(p, 1 / 15, atol=1e-12)

    def test_shift_invariance(self, rng):
        z = rng.standard_normal((4, 15))
        assert np.max(np.abs(tc.softmax(z) - tc.softmax(z + 100))) < 1e-6

    def test_closed_form(self):
        p = tc.softmax(np.log(np.array([[1.0, 2.0, 3.0]])))
        assert np.allclose(p, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-500, 500), min_size=2, max_size=20))
    def test_rows_are_distributions(self, values):
        p = tc.softmax(np.array([values]))
        assert abs(p.sum() - 1) < 1e-6
        assert np.all(p >= 0) and np.all(p <= 1)

    def test_rows_strictly_inside_for_moderate_logits(self, rng):
        p = tc.softmax(rng.uniform(-20, 20, (8, 15)))
        assert np.all(p > 0) and np.all(p < 1)
        assert np.allclose(p.sum(axis=1), 1, atol=1e-6)

    def test_needs_two_classes(self):
        with pytest.raises(DimensionMismatchError):
            tc.softmax(np.zeros((2, 1)))


class TestPrecision:
    def test_context_restores(self):
        assert tc.get_dtype() is np.float32
        with tc.precision(np.float64):
            assert tc.get_dtype() is np.float64
        assert tc.get_dtype() is np.float32

    def test_rejects_other_dtypes(self):
        with pytest.raises(ValueError):
            tc.set_dtype(np.int32)


def test_finite_check_flag(monkeypatch):
    spec = tc.ConvSpec(1, 1)
    x = np.full((1, 3, 3, 1), np.inf)
    tc.conv2d_forward(x, np.ones(spec.weight_shape), np.zeros(1), spec)
    monkeypatch.setenv("FCN_CHECK_FINITE", "1")
    with pytest.raises(NonFiniteError):
        tc.conv2d_forward(x, np.ones(spec.weight_shape), np.zeros(1), spec)
