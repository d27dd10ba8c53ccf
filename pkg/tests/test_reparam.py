"""Branch-fusion correctness: BN folding, kernel lifting, and the central
multi-branch-equals-single-conv equivalence.
"""

import numpy as np
import pytest

from facekit import reparam as rp
from facekit import tensor as T
from facekit.errors import ShapeError
from facekit.tensor import BatchNormParams, ConvParams


def rand_bn(c, rng, dtype=np.float32, eps=1e-5):
    return BatchNormParams(
        rng.standard_normal(c).astype(dtype),
        rng.standard_normal(c).astype(dtype),
        rng.standard_normal(c).astype(dtype),
        (np.abs(rng.standard_normal(c)) + 0.05).astype(dtype),
        epsilon=eps,
    )


def trivial_bn(c, dtype=np.float32):
    return BatchNormParams(
        np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype),
        epsilon=1e-12,
    )


def rand_branches(rng, cin, cout, stride=1, groups=1, with_1x1=True, with_id=None,
                  dtype=np.float32):
    if with_id is None:
        with_id = cin == cout and stride == 1
    conv3 = ConvParams(
        rng.standard_normal((cout, cin // groups, 3, 3)).astype(dtype),
        None, stride, 1, groups,
    )
    b1 = None
    if with_1x1:
        b1 = (
            ConvParams(
                rng.standard_normal((cout, cin // groups, 1, 1)).astype(dtype),
                None, stride, 0, groups,
            ),
            rand_bn(cout, rng, dtype),
        )
    bid = rand_bn(cout, rng, dtype) if with_id else None
    return rp.RepBranchSet((conv3, rand_bn(cout, rng, dtype)), b1, bid)


class TestFoldBn:
    def test_trivial_bn_keeps_conv(self):
        rng = np.random.default_rng(0)
        conv = ConvParams(rng.standard_normal((4, 3, 3, 3)).astype(np.float32), None, 1, 1)
        folded = rp.fold_bn(conv, trivial_bn(4))
        np.testing.assert_allclose(folded.weight, conv.weight, atol=1e-6)
        np.testing.assert_allclose(folded.bias, 0.0, atol=1e-6)

    def test_gamma_two_doubles_weights(self):
        rng = np.random.default_rng(1)
        conv = ConvParams(rng.standard_normal((2, 2, 3, 3)).astype(np.float32), None, 1, 1)
        beta = np.array([0.5, -1.0], np.float32)
        bn = BatchNormParams(
            np.full(2, 2.0, np.float32), beta, np.zeros(2, np.float32),
            np.ones(2, np.float32), epsilon=1e-12,
        )
        folded = rp.fold_bn(conv, bn)
        np.testing.assert_allclose(folded.weight, 2.0 * conv.weight, rtol=1e-6)
        np.testing.assert_allclose(folded.bias, beta, atol=1e-6)

    def test_two_path_equality(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        conv = ConvParams(
            rng.standard_normal((5, 3, 3, 3)).astype(np.float32),
            rng.standard_normal(5).astype(np.float32), 1, 1,
        )
        bn = rand_bn(5, rng)
        ref = T.batchnorm_infer(T.conv2d(x, conv), bn)
        got = T.conv2d(x, rp.fold_bn(conv, bn))
        assert np.abs(ref - got).max() <= 1e-5

    def test_channel_mismatch(self):
        conv = ConvParams(np.zeros((4, 3, 3, 3), np.float32))
        with pytest.raises(ShapeError):
            rp.fold_bn(conv, trivial_bn(3))


class TestPad1x1:
    def test_center_placement(self):
        w = np.arange(6, dtype=np.float32).reshape(3, 2, 1, 1)
        p3 = rp.pad_1x1_to_3x3(ConvParams(w))
        assert p3.kernel == 3 and p3.padding == 1
        np.testing.assert_array_equal(p3.weight[:, :, 1, 1], w[:, :, 0, 0])
        mask = np.ones((3, 3), bool)
        mask[1, 1] = False
        assert np.all(p3.weight[:, :, mask] == 0)

    def test_zero_stays_zero(self):
        p3 = rp.pad_1x1_to_3x3(ConvParams(np.zeros((2, 2, 1, 1), np.float32)))
        assert np.all(p3.weight == 0)

    def test_two_path_equality(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 4, 5, 5)).astype(np.float32)
        conv1 = ConvParams(rng.standard_normal((6, 4, 1, 1)).astype(np.float32))
        y1 = T.conv2d(x, conv1)
        y3 = T.conv2d(x, rp.pad_1x1_to_3x3(conv1))
        np.testing.assert_array_equal(y1, y3)

    def test_rejects_3x3(self):
        with pytest.raises(ShapeError):
            rp.pad_1x1_to_3x3(ConvParams(np.zeros((2, 2, 3, 3), np.float32)))


class TestIdentity3x3:
    def test_plain_identity(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
        np.testing.assert_array_equal(T.conv2d(x, rp.identity_as_3x3(4)), x)

    def test_depthwise_identity(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 6, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(T.conv2d(x, rp.identity_as_3x3(6, groups=6)), x)

    def test_grouped_identity(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 8, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(T.conv2d(x, rp.identity_as_3x3(8, groups=2)), x)

    def test_fold_with_bn_equals_bn_alone(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 5, 6, 6)).astype(np.float32)
        bn = rand_bn(5, rng)
        direct = T.batchnorm_infer(x, bn)
        via_conv = T.conv2d(x, rp.fold_bn(rp.identity_as_3x3(5), bn))
        assert np.abs(direct - via_conv).max() <= 1e-5


class TestFuseRepconv:
    def test_lone_3x3_with_trivial_bn(self):
        rng = np.random.default_rng(8)
        conv3 = ConvParams(rng.standard_normal((4, 4, 3, 3)).astype(np.float32), None, 1, 1)
        fused = rp.fuse_repconv(
            rp.RepBranchSet((conv3, trivial_bn(4)), None, None)
        )
        np.testing.assert_allclose(fused.weight, conv3.weight, atol=1e-6)
        np.testing.assert_allclose(fused.bias, 0.0, atol=1e-6)

    def test_zero_3x3_plus_identity_is_identity(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)
        conv3 = ConvParams(np.zeros((3, 3, 3, 3), np.float32), None, 1, 1)
        fused = rp.fuse_repconv(
            rp.RepBranchSet((conv3, trivial_bn(3)), None, trivial_bn(3))
        )
        y = T.conv2d(x, fused)
        np.testing.assert_allclose(y, x, atol=1e-6)

    @pytest.mark.parametrize("stride,groups", [(1, 1), (2, 1), (1, 2), (2, 4), (1, 8)])
    def test_full_branch_equivalence_f32(self, stride, groups):
        rng = np.random.default_rng(10 + stride * 10 + groups)
        cin = cout = 8
        branches = rand_branches(rng, cin, cout, stride, groups)
        fused = rp.fuse_repconv(branches)
        for _ in range(5):
            x = rng.standard_normal((1, cin, 7, 7)).astype(np.float32)
            pre = rp.rep_forward(x, branches, activate=False)
            post = T.conv2d(x, fused)
            assert np.abs(pre - post).max() <= 1e-5
            # activation applied after summation commutes with fusion
            act_multi = rp.rep_forward(x, branches, activate=True)
            assert np.abs(act_multi - T.silu(post)).max() <= 1e-5

    def test_full_branch_equivalence_f64(self):
        rng = np.random.default_rng(11)
        branches = rand_branches(rng, 6, 6, dtype=np.float64)
        fused = rp.fuse_repconv(branches)
        x = rng.standard_normal((2, 6, 6, 6))
        diff = np.abs(rp.rep_forward(x, branches, activate=False) - T.conv2d(x, fused))
        assert diff.max() <= 1e-10

    def test_channel_change_drops_identity(self):
        rng = np.random.default_rng(12)
        with pytest.raises(ShapeError):
            rp.RepBranchSet(
                (
                    ConvParams(np.zeros((4, 3, 3, 3), np.float32), None, 1, 1),
                    trivial_bn(4),
                ),
                None,
                trivial_bn(4),
            )

    def test_fusion_idempotent_on_degenerate_set(self):
        # a fused conv rewrapped as a single-branch set with pass-through BN
        rng = np.random.default_rng(13)
        fused = rp.fuse_repconv(rand_branches(rng, 5, 5))
        again = rp.fuse_repconv(
            rp.RepBranchSet((fused, trivial_bn(5)), None, None)
        )
        np.testing.assert_allclose(again.weight, fused.weight, rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(again.bias, fused.bias, rtol=1e-6, atol=1e-6)

    def test_param_count_strictly_smaller(self):
        rng = np.random.default_rng(14)
        branches = rand_branches(rng, 8, 8)
        fused = rp.fuse_repconv(branches)
        fused_n = fused.weight.size + fused.bias.size
        assert fused_n < branches.param_count()
