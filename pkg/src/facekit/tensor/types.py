"""Core value types for the dense-tensor layer.

A feature map ("Tensor4") is a plain numpy ndarray of rank 4 in NCHW order:
(batch, channels, height, width), row-major, float32 for inference and
float64 for reference-precision checks. Using the ndarray directly keeps
every op zero-copy and composable; the helpers below enforce the contract.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError

# Alias documenting intent; all ops accept/return plain ndarrays.
Tensor4 = np.ndarray

_FLOAT_DTYPES = (np.float32, np.float64)


def check_tensor4(x, name="tensor"):
    """Validate NCHW layout and dtype; returns x unchanged."""
    if not isinstance(x, np.ndarray):
        raise ShapeError(f"{name}: expected ndarray, got {type(x).__name__}")
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank 4 (NCHW), got rank {x.ndim}")
    if x.dtype.type not in _FLOAT_DTYPES:
        raise ShapeError(f"{name}: expected float32/float64 data, got {x.dtype}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: all dimensions must be >= 1, got {x.shape}")
    return x


@dataclass
class ConvParams:
    """Convolution parameters.

    weight: (out_ch, in_ch // groups, kh, kw)
    bias:   (out_ch,) or None
    """

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4:
            raise ShapeError(f"conv weight: expected rank 4, got rank {w.ndim}")
        if w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv weight: kernel must be square, got {w.shape[2]}x{w.shape[3]}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ShapeError(
                f"conv params: stride={self.stride} padding={self.padding} groups={self.groups} out of range"
            )
        if w.shape[0] % self.groups != 0:
            raise ShapeError(f"conv weight: out_ch {w.shape[0]} not divisible by groups {self.groups}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ShapeError(
                f"conv bias: expected shape ({w.shape[0]},), got {self.bias.shape}"
            )

    @property
    def out_ch(self):
        return self.weight.shape[0]

    @property
    def in_ch(self):
        return self.weight.shape[1] * self.groups

    @property
    def kernel(self):
        return self.weight.shape[2]


@dataclass
class BatchNormParams:
    """Inference-time batch normalization statistics and affine terms."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        n = self.gamma.shape[0]
        for fname in ("beta", "running_mean", "running_var"):
            arr = getattr(self, fname)
            if arr.shape != (n,):
                raise ShapeError(f"batchnorm {fname}: expected shape ({n},), got {arr.shape}")
        if self.epsilon <= 0:
            raise ShapeError(f"batchnorm epsilon must be > 0, got {self.epsilon}")
        if np.any(self.running_var < 0):
            raise ShapeError("batchnorm running_var has negative entries")

    @property
    def channels(self):
        return self.gamma.shape[0]


def conv_out_hw(h, w, k, stride, padding):
    """Spatial output dims of a convolution/pool: floor((d + 2p - k)/s) + 1."""
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"window k={k} stride={stride} pad={padding} does not fit input {h}x{w}"
        )
    return oh, ow
