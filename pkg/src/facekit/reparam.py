"""Structural reparameterization: fold batch norm into convolutions and
collapse parallel {3x3, 1x1, identity} branches into one 3x3 convolution
with bias. The transforms are exact up to float rounding, so the deploy
graph reproduces the train graph within tight tolerances (1e-5 in float32,
1e-10 in float64).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import BatchNormParams, ConvParams, batchnorm_infer, conv2d, silu


@dataclass
class RepBranchSet:
    """Train-form parallel branches sharing stride/groups.

    branch3x3: (3x3 conv without bias, its BN)
    branch1x1: optional (1x1 conv without bias, its BN)
    branch_id: optional BN on the raw input; only legal for
               in_ch == out_ch with stride 1.
    """

    branch3x3: tuple[ConvParams, BatchNormParams]
    branch1x1: tuple[ConvParams, BatchNormParams] | None = None
    branch_id: BatchNormParams | None = None

    def __post_init__(self):
        conv3, bn3 = self.branch3x3
        if conv3.kernel != 3:
            raise ShapeError(f"branch3x3 kernel must be 3, got {conv3.kernel}")
        if bn3.channels != conv3.out_ch:
            raise ShapeError("branch3x3 BN channel mismatch")
        if self.branch1x1 is not None:
            conv1, bn1 = self.branch1x1
            if conv1.kernel != 1:
                raise ShapeError(f"branch1x1 kernel must be 1, got {conv1.kernel}")
            if (conv1.in_ch, conv1.out_ch, conv1.stride, conv1.groups) != (
                conv3.in_ch,
                conv3.out_ch,
                conv3.stride,
                conv3.groups,
            ):
                raise ShapeError("branch1x1 does not match branch3x3 in/out/stride/groups")
            if bn1.channels != conv1.out_ch:
                raise ShapeError("branch1x1 BN channel mismatch")
        if self.branch_id is not None:
            if conv3.in_ch != conv3.out_ch or conv3.stride != 1:
                raise ShapeError(
                    "identity branch requires in_ch == out_ch and stride 1, got "
                    f"in={conv3.in_ch} out={conv3.out_ch} stride={conv3.stride}"
                )
            if self.branch_id.channels != conv3.out_ch:
                raise ShapeError("identity BN channel mismatch")

    @property
    def stride(self):
        return self.branch3x3[0].stride

    @property
    def groups(self):
        return self.branch3x3[0].groups

    def param_count(self):
        conv3, bn3 = self.branch3x3
        n = conv3.weight.size + 2 * bn3.channels
        if conv3.bias is not None:
            n += conv3.bias.size
        if self.branch1x1 is not None:
            conv1, bn1 = self.branch1x1
            n += conv1.weight.size + 2 * bn1.channels
        if self.branch_id is not None:
            n += 2 * self.branch_id.channels
        return n


def fold_bn(conv: ConvParams, bn: BatchNormParams) -> ConvParams:
    """Absorb inference-time BN into the convolution.

    w' = w * gamma / sqrt(var + eps) per output channel;
    b' = beta - gamma * mean / sqrt(var + eps), plus the folded prior bias.
    """
    if bn.channels != conv.out_ch:
        raise ShapeError(
            f"fold_bn: conv out_ch {conv.out_ch} != bn channels {bn.channels}"
        )
    dt = conv.weight.dtype
    inv = bn.gamma.astype(np.float64) / np.sqrt(
        bn.running_var.astype(np.float64) + bn.epsilon
    )
    w = conv.weight.astype(np.float64) * inv[:, None, None, None]
    prior = conv.bias.astype(np.float64) if conv.bias is not None else 0.0
    b = bn.beta.astype(np.float64) + (prior - bn.running_mean.astype(np.float64)) * inv
    return ConvParams(
        w.astype(dt), b.astype(dt), conv.stride, conv.padding, conv.groups
    )


def pad_1x1_to_3x3(conv: ConvParams) -> ConvParams:
    """Embed a 1x1 kernel at the center of a zero 3x3 kernel.

    Output padding becomes 1 so spatial behavior matches the 3x3 branch.
    """
    if conv.kernel != 1:
        raise ShapeError(f"pad_1x1_to_3x3 expects k=1, got k={conv.kernel}")
    w3 = np.zeros(conv.weight.shape[:2] + (3, 3), conv.weight.dtype)
    w3[:, :, 1, 1] = conv.weight[:, :, 0, 0]
    return ConvParams(w3, conv.bias, conv.stride, 1, conv.groups)


def identity_as_3x3(channels, groups=1, dtype=np.float32) -> ConvParams:
    """The 3x3 convolution that maps any tensor to itself."""
    if channels % groups != 0:
        raise ShapeError(f"channels {channels} not divisible by groups {groups}")
    c_per_g = channels // groups
    w = np.zeros((channels, c_per_g, 3, 3), dtype)
    for c in range(channels):
        w[c, c % c_per_g, 1, 1] = 1.0
    return ConvParams(w, None, 1, 1, groups)


def rep_forward(x, branches: RepBranchSet, activate=True):
    """Train-form evaluation: each branch runs conv then BN as separate ops,
    branch outputs are summed, and the activation is applied once to the sum.
    """
    conv3, bn3 = branches.branch3x3
    conv3 = ConvParams(conv3.weight, conv3.bias, conv3.stride, 1, conv3.groups)
    y = batchnorm_infer(conv2d(x, conv3), bn3)
    if branches.branch1x1 is not None:
        conv1, bn1 = branches.branch1x1
        conv1 = ConvParams(conv1.weight, conv1.bias, conv1.stride, 0, conv1.groups)
        y = y + batchnorm_infer(conv2d(x, conv1), bn1)
    if branches.branch_id is not None:
        y = y + batchnorm_infer(x, branches.branch_id)
    return silu(y) if activate else y


def fuse_repconv(branches: RepBranchSet) -> ConvParams:
    """Collapse the branch set into one 3x3 convolution with bias.

    Each branch is BN-folded, lifted to 3x3, and the kernels/biases summed.
    """
    conv3, bn3 = branches.branch3x3
    dt = conv3.weight.dtype
    folded = fold_bn(
        ConvParams(conv3.weight, conv3.bias, conv3.stride, 1, conv3.groups), bn3
    )
    w = folded.weight.astype(np.float64)
    b = folded.bias.astype(np.float64)
    if branches.branch1x1 is not None:
        conv1, bn1 = branches.branch1x1
        f1 = pad_1x1_to_3x3(fold_bn(conv1, bn1))
        w = w + f1.weight.astype(np.float64)
        b = b + f1.bias.astype(np.float64)
    if branches.branch_id is not None:
        ident = identity_as_3x3(conv3.out_ch, conv3.groups, dt)
        fid = fold_bn(ident, branches.branch_id)
        w = w + fid.weight.astype(np.float64)
        b = b + fid.bias.astype(np.float64)
    return ConvParams(w.astype(dt), b.astype(dt), conv3.stride, 1, conv3.groups)
