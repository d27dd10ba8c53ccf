"""Functional tensor ops used by the network graph.

All ops are pure: they allocate fresh outputs and never mutate inputs.
conv2d and maxpool2d dispatch to the JIT or numpy kernels per call (see
backend.py); everything else is cheap enough to stay plain numpy.
"""

from contextlib import contextmanager

import numpy as np

from ..errors import ShapeError
from . import backend, kernels_numpy
from .types import BatchNormParams, ConvParams, check_tensor4, conv_out_hw

_flop_tally = None


@contextmanager
def flop_tally():
    """Count conv multiply-accumulates (as 2*MAC FLOPs) inside the block.

    Only convolutions are tallied; normalization, activations and pooling
    are omitted by convention. Not reentrant, not thread-safe; meant for
    one-off model accounting, never the inference path.
    """
    global _flop_tally
    saved = _flop_tally
    _flop_tally = [0]
    try:
        yield _flop_tally
    finally:
        _flop_tally = saved


def conv2d(x, params: ConvParams):
    check_tensor4(x, "conv input")
    w = params.weight
    if x.shape[1] != params.in_ch:
        raise ShapeError(
            f"conv input channels {x.shape[1]} != weight in_ch {params.in_ch} "
            f"(groups={params.groups})"
        )
    oh, ow = conv_out_hw(x.shape[2], x.shape[3], params.kernel, params.stride, params.padding)
    out = np.empty((x.shape[0], params.out_ch, oh, ow), x.dtype)
    bias = params.bias
    if bias is None:
        bias = np.zeros(params.out_ch, x.dtype)
    if _flop_tally is not None:
        _flop_tally[0] += (
            2 * x.shape[0] * params.out_ch * w.shape[1] * params.kernel ** 2 * oh * ow
        )
    if backend.use_numba():
        from . import kernels_numba

        kernels_numba.conv2d_kernel(
            x, w, bias, params.stride, params.padding, params.groups, out
        )
    else:
        kernels_numpy.conv2d_kernel(
            x, w, bias, params.stride, params.padding, params.groups, out
        )
    return out


def batchnorm_infer(x, params: BatchNormParams):
    check_tensor4(x, "batchnorm input")
    if x.shape[1] != params.channels:
        raise ShapeError(
            f"batchnorm input channels {x.shape[1]} != params channels {params.channels}"
        )
    inv = 1.0 / np.sqrt(params.running_var.astype(np.float64) + params.epsilon)
    scale = params.gamma.astype(np.float64) * inv
    shift = params.beta.astype(np.float64) - params.running_mean.astype(np.float64) * scale
    y = x.astype(np.float64) * scale[None, :, None, None] + shift[None, :, None, None]
    return y.astype(x.dtype)


def sigmoid(x):
    """Numerically stable logistic, computed in float64, cast back."""
    x64 = np.asarray(x, np.float64)
    out = np.empty_like(x64)
    pos = x64 >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x64[pos]))
    ex = np.exp(x64[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.astype(np.asarray(x).dtype) if np.asarray(x).dtype != np.float64 else out


def silu(x):
    return (x * sigmoid(x)).astype(x.dtype, copy=False)


def maxpool2d(x, k, stride, padding=0):
    check_tensor4(x, "maxpool input")
    if padding >= k:
        raise ShapeError(f"maxpool padding {padding} must be < kernel {k}")
    oh, ow = conv_out_hw(x.shape[2], x.shape[3], k, stride, padding)
    out = np.empty((x.shape[0], x.shape[1], oh, ow), x.dtype)
    if backend.use_numba():
        from . import kernels_numba

        kernels_numba.maxpool2d_kernel(x, k, stride, padding, out)
    else:
        kernels_numpy.maxpool2d_kernel(x, k, stride, padding, out)
    return out


def upsample_nearest2x(x):
    check_tensor4(x, "upsample input")
    return x.repeat(2, axis=2).repeat(2, axis=3)


def concat_channels(a, b):
    check_tensor4(a, "concat lhs")
    check_tensor4(b, "concat rhs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat: batch/spatial mismatch {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def add(a, b):
    check_tensor4(a, "add lhs")
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def split_channels(x, sizes):
    check_tensor4(x, "split input")
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to channel count {x.shape[1]}")
    pieces = []
    c0 = 0
    for s in sizes:
        pieces.append(x[:, c0 : c0 + s])
        c0 += s
    return pieces
