"""Dense-tensor layer: NCHW float tensors, conv/pool/activation kernels with
a JIT fast path and a pure-numpy fallback (see backend.py for selection).
"""

from .backend import NUMBA_AVAILABLE, backend_name
from .ops import (
    add,
    batchnorm_infer,
    concat_channels,
    conv2d,
    flop_tally,
    maxpool2d,
    sigmoid,
    silu,
    split_channels,
    upsample_nearest2x,
)
from .types import BatchNormParams, ConvParams, Tensor4, check_tensor4, conv_out_hw

__all__ = [
    "NUMBA_AVAILABLE",
    "BatchNormParams",
    "ConvParams",
    "Tensor4",
    "add",
    "backend_name",
    "batchnorm_infer",
    "check_tensor4",
    "concat_channels",
    "conv2d",
    "conv_out_hw",
    "flop_tally",
    "maxpool2d",
    "sigmoid",
    "silu",
    "split_channels",
    "upsample_nearest2x",
]
