"""Tensor-layer unit tests: every op against an independent oracle, plus
backend agreement and shape algebra.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facekit import tensor as T
from facekit.errors import ShapeError
from facekit.tensor import BatchNormParams, ConvParams


def naive_conv2d(x, w, b, stride, padding, groups):
    """Per-pixel dot-product reference, written independently of the kernels."""
    n_batch, c_in, h, wd = x.shape
    c_out, c_per_g, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n_batch, c_out, oh, ow), np.float64)
    oc_per_g = c_out // groups
    for n in range(n_batch):
        for oc in range(c_out):
            g = oc // oc_per_g
            for i in range(oh):
                for j in range(ow):
                    acc = float(b[oc]) if b is not None else 0.0
                    for cl in range(c_per_g):
                        c = g * c_per_g + cl
                        for a in range(kh):
                            ii = i * stride + a - padding
                            if ii < 0 or ii >= h:
                                continue
                            for kb in range(kw):
                                jj = j * stride + kb - padding
                                if jj < 0 or jj >= wd:
                                    continue
                                acc += float(x[n, c, ii, jj]) * float(w[oc, cl, a, kb])
                    out[n, oc, i, j] = acc
    return out


def rnd(shape, rng, dtype=np.float32):
    return rng.standard_normal(shape).astype(dtype)


@pytest.fixture(params=["numba", "numpy"])
def any_backend(request, monkeypatch):
    if request.param == "numba" and not T.NUMBA_AVAILABLE:
        pytest.skip("numba not installed")
    monkeypatch.setenv("FACEKIT_BACKEND", request.param)
    return request.param


class TestConv2d:
    def test_identity_1x1(self, any_backend):
        rng = np.random.default_rng(0)
        x = rnd((2, 3, 5, 5), rng)
        w = np.zeros((3, 3, 1, 1), np.float32)
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        y = T.conv2d(x, ConvParams(w))
        np.testing.assert_array_equal(y, x)

    def test_zero_kernel_gives_bias(self, any_backend):
        rng = np.random.default_rng(1)
        x = rnd((1, 2, 4, 4), rng)
        w = np.zeros((5, 2, 3, 3), np.float32)
        b = np.arange(5, dtype=np.float32)
        y = T.conv2d(x, ConvParams(w, b, padding=1))
        assert y.shape == (1, 5, 4, 4)
        for oc in range(5):
            np.testing.assert_array_equal(y[0, oc], np.full((4, 4), b[oc]))

    def test_matches_oracle_pad_stride(self, any_backend):
        rng = np.random.default_rng(2)
        x = rnd((1, 3, 4, 4), rng)
        w = rnd((4, 3, 3, 3), rng)
        b = rnd((4,), rng)
        y = T.conv2d(x, ConvParams(w, b, stride=2, padding=1))
        ref = naive_conv2d(x, w, b, 2, 1, 1)
        assert y.shape == ref.shape
        np.testing.assert_allclose(y, ref, atol=1e-5)

    @pytest.mark.parametrize("groups,cin,cout", [(2, 4, 6), (4, 4, 4), (8, 8, 8)])
    def test_grouped_and_depthwise(self, any_backend, groups, cin, cout):
        rng = np.random.default_rng(3)
        x = rnd((2, cin, 6, 6), rng)
        w = rnd((cout, cin // groups, 3, 3), rng)
        b = rnd((cout,), rng)
        y = T.conv2d(x, ConvParams(w, b, stride=1, padding=1, groups=groups))
        ref = naive_conv2d(x, w, b, 1, 1, groups)
        np.testing.assert_allclose(y, ref, atol=1e-5)

    def test_depthwise_pointwise_composition(self, any_backend):
        # a full conv whose kernel factorizes as dw then pw must equal the pipeline
        rng = np.random.default_rng(4)
        cin, cout = 4, 6
        x = rnd((1, cin, 8, 8), rng)
        dw = rnd((cin, 1, 3, 3), rng)
        pw = rnd((cout, cin, 1, 1), rng)
        pipeline = T.conv2d(
            T.conv2d(x, ConvParams(dw, None, padding=1, groups=cin)),
            ConvParams(pw),
        )
        w_full = np.zeros((cout, cin, 3, 3), np.float32)
        for oc in range(cout):
            for c in range(cin):
                w_full[oc, c] = pw[oc, c, 0, 0] * dw[c, 0]
        fused = T.conv2d(x, ConvParams(w_full, None, padding=1))
        np.testing.assert_allclose(pipeline, fused, atol=1e-5)

    def test_channel_mismatch_names_dimension(self, any_backend):
        x = np.zeros((1, 3, 4, 4), np.float32)
        w = np.zeros((2, 4, 1, 1), np.float32)
        with pytest.raises(ShapeError, match="channels 3"):
            T.conv2d(x, ConvParams(w))

    def test_float64_path(self, any_backend):
        rng = np.random.default_rng(5)
        x = rnd((1, 2, 5, 5), rng, np.float64)
        w = rnd((3, 2, 3, 3), rng, np.float64)
        b = rnd((3,), rng, np.float64)
        y = T.conv2d(x, ConvParams(w, b, padding=1))
        assert y.dtype == np.float64
        np.testing.assert_allclose(y, naive_conv2d(x, w, b, 1, 1, 1), atol=1e-12)

    def test_pure_bit_identical_across_calls(self, any_backend):
        rng = np.random.default_rng(6)
        x = rnd((1, 3, 7, 7), rng)
        w = rnd((5, 3, 3, 3), rng)
        p = ConvParams(w, None, stride=2, padding=1)
        y1 = T.conv2d(x, p)
        y2 = T.conv2d(x, p)
        assert y1.tobytes() == y2.tobytes()


def test_backends_agree_within_1e6():
    if not T.NUMBA_AVAILABLE:
        pytest.skip("numba not installed")
    import os

    rng = np.random.default_rng(7)
    x = rnd((2, 6, 9, 9), rng)
    w = rnd((8, 3, 3, 3), rng)
    b = rnd((8,), rng)
    p = ConvParams(w, b, stride=2, padding=1, groups=2)
    saved = os.environ.get("FACEKIT_BACKEND")
    try:
        os.environ["FACEKIT_BACKEND"] = "numba"
        y_jit = T.conv2d(x, p)
        m = T.maxpool2d(x, 3, 2, 1)
        os.environ["FACEKIT_BACKEND"] = "numpy"
        y_np = T.conv2d(x, p)
        m_np = T.maxpool2d(x, 3, 2, 1)
    finally:
        if saved is None:
            os.environ.pop("FACEKIT_BACKEND", None)
        else:
            os.environ["FACEKIT_BACKEND"] = saved
    assert np.abs(y_jit.astype(np.float64) - y_np.astype(np.float64)).max() <= 1e-6
    np.testing.assert_array_equal(m, m_np)


class TestBatchNorm:
    def test_identity_params(self):
        rng = np.random.default_rng(8)
        x = rnd((1, 3, 4, 4), rng)
        p = BatchNormParams(
            np.ones(3, np.float32),
            np.zeros(3, np.float32),
            np.zeros(3, np.float32),
            np.ones(3, np.float32),
            epsilon=1e-12,
        )
        np.testing.assert_allclose(T.batchnorm_infer(x, p), x, atol=1e-6)

    def test_zero_gamma_gives_beta(self):
        rng = np.random.default_rng(9)
        x = rnd((1, 2, 3, 3), rng)
        p = BatchNormParams(
            np.zeros(2, np.float32),
            np.array([1.5, -2.0], np.float32),
            rnd((2,), rng),
            np.abs(rnd((2,), rng)),
        )
        y = T.batchnorm_infer(x, p)
        np.testing.assert_allclose(y[0, 0], 1.5, atol=1e-6)
        np.testing.assert_allclose(y[0, 1], -2.0, atol=1e-6)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(10)
        x = rnd((2, 4, 3, 3), rng)
        p = BatchNormParams(
            rnd((4,), rng),
            rnd((4,), rng),
            rnd((4,), rng),
            np.abs(rnd((4,), rng)) + 0.1,
            epsilon=1e-5,
        )
        y = T.batchnorm_infer(x, p)
        for c in range(4):
            expect = p.gamma[c] * (x[:, c] - p.running_mean[c]) / np.sqrt(
                p.running_var[c] + 1e-5
            ) + p.beta[c]
            np.testing.assert_allclose(y[:, c], expect, atol=1e-5)

    def test_channel_mismatch(self):
        x = np.zeros((1, 3, 2, 2), np.float32)
        p = BatchNormParams(*(np.ones(2, np.float32) for _ in range(4)))
        with pytest.raises(ShapeError):
            T.batchnorm_infer(x, p)


class TestActivations:
    def test_silu_zero(self):
        assert T.silu(np.zeros((1, 1, 1, 1), np.float32))[0, 0, 0, 0] == 0.0

    def test_silu_saturates(self):
        x = np.full((1, 1, 1, 1), 20.0, np.float32)
        assert abs(float(T.silu(x)[0, 0, 0, 0]) - 20.0) < 1e-6

    def test_silu_at_one(self):
        # 1 / (1 + e^-1), frozen reference value
        x = np.ones((1, 1, 1, 1), np.float64)
        assert abs(float(T.silu(x)[0, 0, 0, 0]) - 0.7310585786300049) < 1e-12

    def test_sigmoid_extremes_finite(self):
        y = T.sigmoid(np.array([-200.0, 0.0, 200.0]))
        assert np.all(np.isfinite(y))
        assert y[1] == 0.5


class TestMaxPool:
    def test_2x2(self, any_backend):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32)
        y = T.maxpool2d(x, 2, 2)
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 4.0

    def test_constant(self, any_backend):
        x = np.full((1, 2, 6, 6), 3.25, np.float32)
        y = T.maxpool2d(x, 3, 2, 1)
        np.testing.assert_array_equal(y, np.full(y.shape, 3.25))

    def test_matches_window_scan(self, any_backend):
        rng = np.random.default_rng(11)
        x = rnd((1, 2, 8, 8), rng)
        y = T.maxpool2d(x, 3, 2, 1)
        for c in range(2):
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    best = -np.inf
                    for a in range(3):
                        for b in range(3):
                            ii, jj = i * 2 + a - 1, j * 2 + b - 1
                            if 0 <= ii < 8 and 0 <= jj < 8:
                                best = max(best, x[0, c, ii, jj])
                    assert y[0, c, i, j] == np.float32(best)

    def test_padding_never_selected(self, any_backend):
        x = np.full((1, 1, 4, 4), -5.0, np.float32)
        y = T.maxpool2d(x, 3, 1, 1)
        np.testing.assert_array_equal(y, np.full(y.shape, -5.0))


class TestResizeAndStructure:
    def test_upsample_single_pixel(self):
        x = np.array([[[[1.0]]]], np.float32)
        y = T.upsample_nearest2x(x)
        np.testing.assert_array_equal(y, np.ones((1, 1, 2, 2), np.float32))

    def test_upsample_shape(self):
        x = np.zeros((1, 3, 4, 5), np.float32)
        assert T.upsample_nearest2x(x).shape == (1, 3, 8, 10)

    def test_upsample_then_stride2_max_on_constants(self):
        x = np.full((1, 1, 3, 3), 2.0, np.float32)
        y = T.maxpool2d(T.upsample_nearest2x(x), 2, 2)
        np.testing.assert_array_equal(y, x)

    def test_concat_shapes(self):
        a = np.zeros((1, 2, 4, 4), np.float32)
        b = np.zeros((1, 3, 4, 4), np.float32)
        assert T.concat_channels(a, b).shape == (1, 5, 4, 4)

    def test_add_zeros(self):
        rng = np.random.default_rng(12)
        x = rnd((1, 2, 3, 3), rng)
        np.testing.assert_array_equal(T.add(x, np.zeros_like(x)), x)

    def test_split_concat_roundtrip(self):
        rng = np.random.default_rng(13)
        a = rnd((2, 3, 4, 4), rng)
        b = rnd((2, 5, 4, 4), rng)
        sa, sb = T.split_channels(T.concat_channels(a, b), [3, 5])
        np.testing.assert_array_equal(sa, a)
        np.testing.assert_array_equal(sb, b)

    def test_split_bad_sizes(self):
        x = np.zeros((1, 4, 2, 2), np.float32)
        with pytest.raises(ShapeError):
            T.split_channels(x, [1, 2])


@settings(max_examples=30, deadline=None)
@given(h=st.integers(2, 17), w=st.integers(2, 17))
def test_stride2_shape_algebra(h, w):
    # k=3, stride=2, pad=1 halves spatial dims, rounding up
    import os

    os.environ["FACEKIT_BACKEND"] = "numpy"
    try:
        x = np.zeros((1, 1, h, w), np.float32)
        y = T.conv2d(x, ConvParams(np.zeros((1, 1, 3, 3), np.float32), stride=2, padding=1))
        assert y.shape[2] == -(-h // 2)
        assert y.shape[3] == -(-w // 2)
    finally:
        os.environ.pop("FACEKIT_BACKEND", None)


def test_flop_tally_1x1_conv():
    x = np.zeros((1, 8, 10, 12), np.float32)
    p = ConvParams(np.zeros((16, 8, 1, 1), np.float32))
    with T.flop_tally() as tally:
        T.conv2d(x, p)
    assert tally[0] == 2 * 8 * 16 * 10 * 12
