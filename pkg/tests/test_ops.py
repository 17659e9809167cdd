"""Tensor-primitive tests: hand-computed examples, a naive convolution
oracle, and algebraic properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spiking_resnet.errors import ShapeMismatchError
from spiking_resnet.ops import (
    BatchNormParams,
    TailRecorder,
    batchnorm_forward,
    conv2d,
    fully_connected,
    global_avg_pool,
    percentile,
    relu,
)


def naive_conv2d(x, w, b, stride, padding):
    """Direct-sum reference: plain loops, no unfolding tricks."""
    ic, h, ww = x.shape
    oc, _, kh, kw = w.shape
    xp = np.zeros((ic, h + 2 * padding, ww + 2 * padding), dtype=np.float64)
    xp[:, padding:padding + h, padding:padding + ww] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    out = np.zeros((oc, oh, ow), dtype=np.float64)
    for o in range(oc):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(ic):
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += w[o, c, ki, kj] * xp[c, i * stride + ki, j * stride + kj]
                out[o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_scalar_multiply(self):
        x = np.array([[[2.0]]], dtype=np.float32)
        w = np.array([[[[3.0]]]], dtype=np.float32)
        out = conv2d(x, w, np.zeros(1), stride=1, padding=0)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == pytest.approx(6.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 5, 5)).astype(np.float32)
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = conv2d(x, w, np.zeros(3))
        np.testing.assert_array_equal(out, x)

    def test_ones_kernel_sums_window(self):
        x = np.ones((1, 3, 3), dtype=np.float32)
        w = np.ones((1, 1, 3, 3), dtype=np.float32)
        out = conv2d(x, w, np.zeros(1))
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == pytest.approx(9.0)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_matches_naive_oracle(self, stride, padding):
        rng = np.random.default_rng(42)
        for _ in range(5):
            ic = int(rng.integers(1, 9))
            oc = int(rng.integers(1, 9))
            h = int(rng.integers(3, 9))
            k = int(rng.choice([1, 3]))
            x = rng.normal(size=(ic, h, h)).astype(np.float32)
            w = rng.normal(size=(oc, ic, k, k)).astype(np.float32)
            b = rng.normal(size=oc).astype(np.float32)
            got = conv2d(x, w, b, stride=stride, padding=padding)
            want = naive_conv2d(x, w, b, stride, padding)
            np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)

    def test_output_shape_formula(self):
        x = np.zeros((2, 7, 7), dtype=np.float32)
        w = np.zeros((4, 2, 3, 3), dtype=np.float32)
        out = conv2d(x, w, None, stride=2, padding=0)
        assert out.shape == (4, 3, 3)

    def test_channel_mismatch_names_axis(self):
        x = np.zeros((2, 4, 4), dtype=np.float32)
        w = np.zeros((1, 3, 3, 3), dtype=np.float32)
        with pytest.raises(ShapeMismatchError, match="in_channels"):
            conv2d(x, w, None)

    def test_degenerate_output_rejected(self):
        x = np.zeros((1, 2, 2), dtype=np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        with pytest.raises(ShapeMismatchError, match="spatial"):
            conv2d(x, w, None)

    def test_finite_output_on_finite_input(self):
        rng = np.random.default_rng(3)
        x = (rng.normal(size=(4, 8, 8)) * 1e3).astype(np.float32)
        w = rng.normal(size=(4, 4, 3, 3)).astype(np.float32)
        out = conv2d(x, w, rng.normal(size=4), stride=1, padding=1)
        assert np.all(np.isfinite(out))


class TestRelu:
    def test_definition(self):
        np.testing.assert_array_equal(
            relu(np.array([-1.0, 0.0, 2.0], dtype=np.float32)),
            np.array([0.0, 0.0, 2.0], dtype=np.float32),
        )

    def test_all_negative(self):
        x = -np.abs(np.random.default_rng(0).normal(size=(3, 4))).astype(np.float32)
        assert np.all(relu(x) == 0)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=64))
    def test_idempotent(self, values):
        x = np.array(values, dtype=np.float32)
        np.testing.assert_array_equal(relu(relu(x)), relu(x))

    @given(
        st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=64),
        st.floats(1e-3, 1e3),
    )
    def test_positive_homogeneity(self, values, c):
        x = np.array(values, dtype=np.float32)
        c = np.float32(c)
        np.testing.assert_allclose(relu(c * x), c * relu(x), rtol=1e-6)


class TestBatchNorm:
    def test_identity_params(self):
        x = np.random.default_rng(0).normal(size=(3, 4, 4)).astype(np.float32)
        p = BatchNormParams(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), epsilon=1e-12)
        np.testing.assert_allclose(batchnorm_forward(x, p), x, rtol=1e-6)

    def test_hand_computed_value(self):
        x = np.full((1, 1, 1), 5.0, dtype=np.float32)
        p = BatchNormParams([2.0], [1.0], [3.0], [4.0], epsilon=1e-12)
        assert batchnorm_forward(x, p)[0, 0, 0] == pytest.approx(3.0, abs=1e-6)

    def test_zero_centred_input_returns_beta(self):
        x = np.full((2, 3, 3), 1.5, dtype=np.float32)
        p = BatchNormParams([4.0, 4.0], [7.0, 7.0], [1.5, 1.5], [2.0, 2.0])
        np.testing.assert_allclose(batchnorm_forward(x, p), 7.0, rtol=1e-6)

    def test_channel_mismatch(self):
        x = np.zeros((3, 2, 2), dtype=np.float32)
        p = BatchNormParams(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))
        with pytest.raises(ShapeMismatchError, match="channels"):
            batchnorm_forward(x, p)

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            BatchNormParams([1.0], [0.0], [0.0], [-1.0])
        with pytest.raises(ValueError):
            BatchNormParams([1.0], [0.0], [0.0], [1.0], epsilon=0.0)


class TestGlobalAvgPool:
    def test_single_pixel_identity(self):
        x = np.arange(3, dtype=np.float32).reshape(3, 1, 1)
        np.testing.assert_array_equal(global_avg_pool(x), x)

    def test_hand_mean(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
        assert global_avg_pool(x)[0, 0, 0] == pytest.approx(2.5)

    def test_zeros(self):
        assert np.all(global_avg_pool(np.zeros((2, 3, 3), dtype=np.float32)) == 0)


class TestFullyConnected:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0], dtype=np.float32)
        np.testing.assert_array_equal(fully_connected(x, np.eye(3, dtype=np.float32)), x)

    def test_zero_weights_return_bias(self):
        out = fully_connected(
            np.array([9.0, 9.0], dtype=np.float32),
            np.zeros((1, 2), dtype=np.float32),
            np.array([5.0]),
        )
        np.testing.assert_array_equal(out, np.array([5.0], dtype=np.float32))

    def test_hand_dot_product(self):
        out = fully_connected(
            np.array([3.0, 4.0], dtype=np.float32),
            np.array([[1.0, 2.0]], dtype=np.float32),
            np.array([1.0]),
        )
        assert out[0] == pytest.approx(12.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeMismatchError, match="in_features"):
            fully_connected(np.zeros(3, dtype=np.float32), np.zeros((2, 4), dtype=np.float32))


class TestPercentile:
    def test_max_case(self):
        assert percentile(np.arange(1, 101), 1.0) == 100

    def test_constant_data(self):
        for p in (0.1, 0.5, 0.999, 1.0):
            assert percentile([5.0, 5.0, 5.0], p) == 5.0

    def test_linear_interpolation_value(self):
        values = np.arange(1000, dtype=np.float64)
        assert percentile(values, 0.999) == pytest.approx(998.001)

    def test_against_numpy_oracle(self):
        rng = np.random.default_rng(7)
        values = rng.normal(size=2501)
        for p in (0.25, 0.5, 0.9, 0.999, 1.0):
            assert percentile(values, p) == pytest.approx(
                float(np.percentile(values, p * 100, method="linear"))
            )

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            percentile([], 0.5)

    def test_invalid_fraction_rejected(self):
        with pytest.raises(ValueError):
            percentile([1.0], 0.0)
        with pytest.raises(ValueError):
            percentile([1.0], 1.5)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=100))
    @settings(max_examples=50)
    def test_monotone_in_p_and_bounded(self, values):
        ps = [0.1, 0.3, 0.5, 0.9, 1.0]
        results = [percentile(values, p) for p in ps]
        assert all(a <= b + 1e-9 for a, b in zip(results, results[1:]))
        assert min(values) - 1e-9 <= results[0]
        assert results[-1] <= max(values) + 1e-9


class TestTailRecorder:
    def test_exact_without_compression(self):
        rng = np.random.default_rng(0)
        rec = TailRecorder(p=0.9)
        everything = []
        for _ in range(5):
            chunk = rng.normal(size=1000)
            rec.add(chunk)
            everything.append(chunk)
        allv = np.concatenate(everything)
        assert rec.percentile() == pytest.approx(percentile(allv, 0.9))
        assert rec.count == allv.size

    def test_exact_with_forced_compression(self):
        rng = np.random.default_rng(1)
        rec = TailRecorder(p=0.999, retain_limit=5000)
        everything = []
        for _ in range(40):
            chunk = rng.normal(size=997)
            rec.add(chunk)
            everything.append(chunk)
        allv = np.concatenate(everything).astype(np.float32)
        assert rec.percentile() == pytest.approx(percentile(allv, 0.999), rel=1e-6)

    def test_low_percentile_after_compression_rejected(self):
        rec = TailRecorder(p=0.9, retain_limit=5000)
        rng = np.random.default_rng(2)
        for _ in range(10):
            rec.add(rng.normal(size=997))
        assert rec._discarded > 0
        with pytest.raises(ValueError):
            rec.percentile(0.5)
