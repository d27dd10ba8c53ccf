"""Building blocks for the detector graph: conv units, reparameterizable
convolutions, bottlenecks, the split-transform-merge stage block, pooling
pyramid, and the three stem variants.
"""

import math

import numpy as np

from .. import reparam as rp
from ..errors import ShapeError
from ..module import Module, ModuleList
from ..tensor import (
    BatchNormParams,
    ConvParams,
    batchnorm_infer,
    concat_channels,
    conv2d,
    maxpool2d,
    silu,
    split_channels,
)


def kaiming_uniform(rng, shape, dtype=np.float32):
    # He-uniform (bound sqrt(6/fan_in)) compounds activation variance here
    # because BN starts at identity statistics; bound 2/sqrt(fan_in) keeps
    # magnitudes flat through the deep graph, which also keeps float32
    # fusion error orders of magnitude under the deploy tolerance.
    fan_in = shape[1] * shape[2] * shape[3]
    bound = 2.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class Conv2d(Module):
    """Bare convolution holding its arrays; no normalization, no activation."""

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, groups=1, bias=False):
        super().__init__()
        if padding is None:
            padding = k // 2
        self.weight = kaiming_uniform(rng, (cout, cin // groups, k, k))
        if bias:
            self.bias = np.zeros(cout, np.float32)
        self.stride = stride
        self.padding = padding
        self.groups = groups

    @classmethod
    def from_params(cls, params: ConvParams):
        self = object.__new__(cls)
        Module.__init__(self)
        self.weight = params.weight
        if params.bias is not None:
            self.bias = params.bias
        self.stride = params.stride
        self.padding = params.padding
        self.groups = params.groups
        return self

    def as_params(self):
        return ConvParams(
            self.weight, getattr(self, "bias", None), self.stride, self.padding, self.groups
        )

    def forward(self, x):
        return conv2d(x, self.as_params())


class BatchNorm2d(Module):
    def __init__(self, c, eps=1e-5):
        super().__init__()
        self.gamma = np.ones(c, np.float32)
        self.beta = np.zeros(c, np.float32)
        self.running_mean = np.zeros(c, np.float32)
        self.running_var = np.ones(c, np.float32)
        self.eps = eps

    def as_params(self):
        return BatchNormParams(
            self.gamma, self.beta, self.running_mean, self.running_var, self.eps
        )

    def forward(self, x):
        return batchnorm_infer(x, self.as_params())

    def param_count(self):
        # affine terms only; running statistics are state, not parameters
        return int(self.gamma.size + self.beta.size)


class ConvAct(Module):
    """Deploy-form unit: biased convolution followed by SiLU."""

    def __init__(self, params: ConvParams):
        super().__init__()
        bias = params.bias
        if bias is None:
            bias = np.zeros(params.out_ch, params.weight.dtype)
        self.conv = Conv2d.from_params(
            ConvParams(params.weight, bias, params.stride, params.padding, params.groups)
        )

    def forward(self, x):
        return silu(self.conv(x))


class CBS(Module):
    """Conv, batch norm, SiLU."""

    def __init__(self, cin, cout, k, rng, stride=1, groups=1):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, groups=groups)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return silu(self.bn(self.conv(x)))


class RepConv(Module):
    """Train-form multi-branch 3x3 unit: 3x3+BN, 1x1+BN, optional BN identity.

    Branch sums feed one SiLU. deploy() collapses everything into a single
    biased 3x3 convolution (see reparam module).
    """

    def __init__(self, cin, cout, rng, stride=1, groups=1, with_1x1=True):
        super().__init__()
        self.conv3 = Conv2d(cin, cout, 3, rng, stride=stride, groups=groups)
        self.bn3 = BatchNorm2d(cout)
        if with_1x1:
            self.conv1 = Conv2d(cin, cout, 1, rng, stride=stride, padding=0, groups=groups)
            self.bn1 = BatchNorm2d(cout)
        if cin == cout and stride == 1:
            self.bnid = BatchNorm2d(cout)

    def branch_set(self):
        b1 = None
        if hasattr(self, "conv1"):
            b1 = (self.conv1.as_params(), self.bn1.as_params())
        bid = self.bnid.as_params() if hasattr(self, "bnid") else None
        return rp.RepBranchSet((self.conv3.as_params(), self.bn3.as_params()), b1, bid)

    def forward(self, x):
        return rp.rep_forward(x, self.branch_set(), activate=True)

    def deploy(self):
        return ConvAct(rp.fuse_repconv(self.branch_set()))


class V5Bot(Module):
    def __init__(self, cin, cout, rng, shortcut=True):
        super().__init__()
        self.cv1 = CBS(cin, cout, 1, rng)
        self.cv2 = CBS(cout, cout, 3, rng)
        self.residual = shortcut and cin == cout

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.residual else y


class V8Bot(Module):
    def __init__(self, cin, cout, rng, shortcut=True):
        super().__init__()
        self.cv1 = CBS(cin, cout, 3, rng)
        self.cv2 = CBS(cout, cout, 3, rng)
        self.residual = shortcut and cin == cout

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.residual else y


class RepV8Bot(Module):
    def __init__(self, cin, cout, rng, shortcut=True):
        super().__init__()
        self.cv1 = RepConv(cin, cout, rng)
        self.cv2 = RepConv(cout, cout, rng)
        self.residual = shortcut and cin == cout

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.residual else y


class RepDWV8Bot(Module):
    """Full 3x3 unit followed by a depthwise reparameterizable 3x3."""

    def __init__(self, cin, cout, rng, shortcut=True):
        super().__init__()
        self.cv1 = CBS(cin, cout, 3, rng)
        self.cv2 = RepConv(cout, cout, rng, groups=cout)
        self.residual = shortcut and cin == cout

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.residual else y


BOTTLENECKS = {
    "V5Bot": V5Bot,
    "V8Bot": V8Bot,
    "RepV8Bot": RepV8Bot,
    "RepDWV8Bot": RepDWV8Bot,
}


class RepC2f(Module):
    """Split-transform-merge stage: 1x1 expand, halve channels, run n
    bottlenecks each appending its output, then 1x1 project the (2+n) halves.
    """

    def __init__(self, cin, cout, n, rng, bottleneck="RepDWV8Bot", shortcut=True):
        super().__init__()
        if cout % 2:
            raise ShapeError(f"stage output channels must be even, got {cout}")
        if bottleneck not in BOTTLENECKS:
            raise ShapeError(f"unknown bottleneck kind {bottleneck!r}")
        self.half = cout // 2
        self.cv1 = CBS(cin, cout, 1, rng)
        self.bots = ModuleList(
            BOTTLENECKS[bottleneck](self.half, self.half, rng, shortcut) for _ in range(n)
        )
        self.cv2 = CBS((2 + n) * self.half, cout, 1, rng)

    def forward(self, x):
        a, b = split_channels(self.cv1(x), [self.half, self.half])
        pieces = [a, b]
        for bot in self.bots:
            pieces.append(bot(pieces[-1]))
        y = pieces[0]
        for p in pieces[1:]:
            y = concat_channels(y, p)
        return self.cv2(y)


class SPPF(Module):
    """Cascaded 5x5 max pools concatenated, between two 1x1 conv units."""

    def __init__(self, cin, cout, rng, k=5):
        super().__init__()
        half = cin // 2
        self.k = k
        self.cv1 = CBS(cin, half, 1, rng)
        self.cv2 = CBS(half * 4, cout, 1, rng)

    def forward(self, x):
        y0 = self.cv1(x)
        y1 = maxpool2d(y0, self.k, 1, self.k // 2)
        y2 = maxpool2d(y1, self.k, 1, self.k // 2)
        y3 = maxpool2d(y2, self.k, 1, self.k // 2)
        y = concat_channels(concat_channels(y0, y1), concat_channels(y2, y3))
        return self.cv2(y)


class NaiveV8Stem(Module):
    """Two stride-2 conv units; total downsample 4."""

    def __init__(self, w1, w2, rng):
        super().__init__()
        self.c1 = CBS(3, w1, 3, rng, stride=2)
        self.c2 = CBS(w1, w2, 3, rng, stride=2)

    def forward(self, x):
        return self.c2(self.c1(x))


class RepV8Stem(Module):
    """Two stride-2 reparameterizable units; total downsample 4."""

    def __init__(self, w1, w2, rng):
        super().__init__()
        self.c1 = RepConv(3, w1, rng, stride=2)
        self.c2 = RepConv(w1, w2, rng, stride=2)

    def forward(self, x):
        return self.c2(self.c1(x))


class RepV7Stem(Module):
    """Stride-2 conv unit, then a max-pool branch beside a conv branch,
    concatenated. The pooling path is structurally unfusable (nonlinear), so
    only the conv sub-paths reparameterize.
    """

    def __init__(self, w1, w2, rng):
        super().__init__()
        if w2 % 2:
            raise ShapeError(f"stem output channels must be even, got {w2}")
        half = w2 // 2
        self.c1 = CBS(3, w1, 3, rng, stride=2)
        self.pool_proj = CBS(w1, half, 1, rng)
        self.conv_proj = CBS(w1, half, 1, rng)
        self.conv_down = RepConv(half, half, rng, stride=2)

    def forward(self, x):
        y = self.c1(x)
        a = self.pool_proj(maxpool2d(y, 2, 2))
        b = self.conv_down(self.conv_proj(y))
        return concat_channels(a, b)


STEMS = {
    "NaiveV8": NaiveV8Stem,
    "RepV7": RepV7Stem,
    "RepV8": RepV8Stem,
}
