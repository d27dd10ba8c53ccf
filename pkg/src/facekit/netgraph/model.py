"""The full detector graph: stem, staged backbone, pooling pyramid, PAN neck,
and the tri-branch head emitting box bins, face logit, and raw landmarks at
three strides.
"""

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from ..module import Module, ModuleList
from ..tensor import check_tensor4, concat_channels, flop_tally, upsample_nearest2x
from .blocks import CBS, SPPF, STEMS, Conv2d, RepC2f
from .config import ModelConfig

_BASE_WIDTHS = (64, 128, 256, 512, 1024)
_BASE_REPEATS = (3, 6, 6, 3)


def make_divisible(x, divisor=8):
    return max(divisor, int(x + divisor / 2) // divisor * divisor)


def scaled_widths(width_multiple):
    return tuple(make_divisible(w * width_multiple) for w in _BASE_WIDTHS)


def scaled_repeats(depth_multiple):
    return tuple(max(1, round(r * depth_multiple)) for r in _BASE_REPEATS)


@dataclass
class HeadOutputs:
    """Per-stride raw head tensors, one entry per pyramid level."""

    strides: tuple
    box_logits: list  # (N, 4*reg_max, H, W) each
    face_logits: list  # (N, 1, H, W) each
    kpt_raw: list  # (N, 3*num_keypoints, H, W) each

    def __post_init__(self):
        for b, f, k in zip(self.box_logits, self.face_logits, self.kpt_raw):
            if not (b.shape[2:] == f.shape[2:] == k.shape[2:]):
                raise ShapeError(
                    f"head tensors disagree on grid size: {b.shape} {f.shape} {k.shape}"
                )


class Stage(Module):
    """Optional stride-2 downsample followed by a RepC2f block."""

    def __init__(self, cin, cout, n, rng, bottleneck, shortcut, downsample):
        super().__init__()
        if downsample:
            self.down = CBS(cin, cout, 3, rng, stride=2)
            cin = cout
        self.c2f = RepC2f(cin, cout, n, rng, bottleneck, shortcut)

    def forward(self, x):
        if hasattr(self, "down"):
            x = self.down(x)
        return self.c2f(x)


class HeadBranch(Module):
    """Three consecutive convolutions: two 3x3 units, then a plain biased 1x1."""

    def __init__(self, cin, hidden, cout, rng, final_bias=0.0):
        super().__init__()
        self.c1 = CBS(cin, hidden, 3, rng)
        self.c2 = CBS(hidden, hidden, 3, rng)
        self.out = Conv2d(hidden, cout, 1, rng, bias=True)
        self.out.bias[:] = final_bias

    def forward(self, x):
        return self.out(self.c2(self.c1(x)))


class FaceLandmarkNet(Module):
    """Detector with shared backbone/neck and independent box, face-score,
    and landmark branches per pyramid level.
    """

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        w1, w2, w3, w4, w5 = scaled_widths(cfg.width_multiple)
        r1, r2, r3, r4 = scaled_repeats(cfg.depth_multiple)
        bot = cfg.bottleneck_kind

        self.stem = STEMS[cfg.stem_kind](w1, w2, rng)
        self.stage1 = Stage(w2, w2, r1, rng, bot, True, downsample=False)
        self.stage2 = Stage(w2, w3, r2, rng, bot, True, downsample=True)
        self.stage3 = Stage(w3, w4, r3, rng, bot, True, downsample=True)
        self.stage4 = Stage(w4, w5, r4, rng, bot, True, downsample=True)
        self.sppf = SPPF(w5, w5, rng)

        self.up_c2f_1 = RepC2f(w5 + w4, w4, 1, rng, bot, shortcut=False)
        self.up_c2f_2 = RepC2f(w4 + w3, w3, 1, rng, bot, shortcut=False)
        self.down_conv_1 = CBS(w3, w3, 3, rng, stride=2)
        self.down_c2f_1 = RepC2f(w3 + w4, w4, 1, rng, bot, shortcut=False)
        self.down_conv_2 = CBS(w4, w4, 3, rng, stride=2)
        self.down_c2f_2 = RepC2f(w4 + w5, w5, 1, rng, bot, shortcut=False)

        # Shared hidden widths across levels, sized from the finest level.
        box_hidden = max(16, w3 // 4, 4 * cfg.reg_max)
        face_hidden = max(16, w3)
        kpt_hidden = max(w3 // 4, cfg.landmark_channels)
        level_widths = (w3, w4, w5)
        self.box_heads = ModuleList()
        self.face_heads = ModuleList()
        self.kpt_heads = ModuleList()
        for cin, stride in zip(level_widths, cfg.strides):
            self.box_heads.append(HeadBranch(cin, box_hidden, 4 * cfg.reg_max, rng, 1.0))
            # start face confidence low: roughly 5 expected faces per grid
            prior = math.log(5.0 / (640.0 / stride) ** 2)
            self.face_heads.append(HeadBranch(cin, face_hidden, 1, rng, prior))
            self.kpt_heads.append(HeadBranch(cin, kpt_hidden, cfg.landmark_channels, rng, 0.0))

    def forward(self, x):
        check_tensor4(x, "model input")
        side = x.shape[2]
        if x.shape[3] != side:
            raise ShapeError(f"model input must be square, got {x.shape[2]}x{x.shape[3]}")
        if side % self.cfg.strides[-1]:
            raise ShapeError(
                f"input side {side} not divisible by max stride {self.cfg.strides[-1]}"
            )
        if x.shape[1] != 3:
            raise ShapeError(f"model input must have 3 channels, got {x.shape[1]}")

        y = self.stage1(self.stem(x))
        p3 = self.stage2(y)
        p4 = self.stage3(p3)
        p5 = self.sppf(self.stage4(p4))

        u4 = self.up_c2f_1(concat_channels(upsample_nearest2x(p5), p4))
        n3 = self.up_c2f_2(concat_channels(upsample_nearest2x(u4), p3))
        n4 = self.down_c2f_1(concat_channels(self.down_conv_1(n3), u4))
        n5 = self.down_c2f_2(concat_channels(self.down_conv_2(n4), p5))

        feats = (n3, n4, n5)
        return HeadOutputs(
            self.cfg.strides,
            [self.box_heads[i](f) for i, f in enumerate(feats)],
            [self.face_heads[i](f) for i, f in enumerate(feats)],
            [self.kpt_heads[i](f) for i, f in enumerate(feats)],
        )


def build_model(cfg: ModelConfig, seed=0) -> FaceLandmarkNet:
    """Deterministically initialized model; identical seeds give identical bits."""
    rng = np.random.default_rng(seed)
    return FaceLandmarkNet(cfg, rng)


def forward(model, image):
    return model(image)


def deploy(model):
    """Inference-form copy with every reparameterizable block fused."""
    return model.deploy()


def count_params(model):
    """Learnable parameter tally (conv weights/biases plus BN affine terms)."""
    return model.param_count()


def count_flops(model, input_side):
    """Conv FLOPs (2*MACs) of one forward pass at the given square input side."""
    x = np.zeros((1, 3, input_side, input_side), np.float32)
    with flop_tally() as tally:
        model(x)
    return tally[0]
