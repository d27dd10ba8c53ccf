"""Model configuration: variant selection, scaling multiples, head sizing."""

import dataclasses
import os
from dataclasses import dataclass

from ..errors import FormatError, ShapeError

STEM_KINDS = ("NaiveV8", "RepV7", "RepV8")
BOTTLENECK_KINDS = ("V5Bot", "V8Bot", "RepV8Bot", "RepDWV8Bot")


@dataclass
class ModelConfig:
    stem_kind: str = "RepV8"
    bottleneck_kind: str = "RepDWV8Bot"
    depth_multiple: float = 0.33
    width_multiple: float = 0.25
    reg_max: int = 16
    num_keypoints: int = 68
    strides: tuple = (8, 16, 32)

    def __post_init__(self):
        if self.stem_kind not in STEM_KINDS:
            raise ShapeError(f"stem_kind must be one of {STEM_KINDS}, got {self.stem_kind!r}")
        if self.bottleneck_kind not in BOTTLENECK_KINDS:
            raise ShapeError(
                f"bottleneck_kind must be one of {BOTTLENECK_KINDS}, got {self.bottleneck_kind!r}"
            )
        if self.depth_multiple <= 0 or self.width_multiple <= 0:
            raise ShapeError(
                f"multiples must be > 0, got depth={self.depth_multiple} width={self.width_multiple}"
            )
        if self.reg_max < 2:
            raise ShapeError(f"reg_max must be >= 2, got {self.reg_max}")
        if self.num_keypoints < 1:
            raise ShapeError(f"num_keypoints must be >= 1, got {self.num_keypoints}")
        self.strides = tuple(int(s) for s in self.strides)
        if list(self.strides) != sorted(set(self.strides)):
            raise ShapeError(f"strides must be strictly increasing, got {self.strides}")

    @property
    def landmark_channels(self):
        return 3 * self.num_keypoints


# Variant scalings; the head keeps its own sizing rule (see model.py).
PRESETS = {
    "tiny": dict(width_multiple=0.25, depth_multiple=0.33),
    "small": dict(width_multiple=0.50, depth_multiple=0.33),
}

_FIELD_TYPES = {f.name: f for f in dataclasses.fields(ModelConfig)}


def _coerce(name, raw):
    if name == "strides":
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if name in ("depth_multiple", "width_multiple"):
        return float(raw)
    if name in ("reg_max", "num_keypoints"):
        return int(raw)
    return raw


def model_config(name_or_path=None, **overrides) -> ModelConfig:
    """Resolve a ModelConfig from a preset name, a config file path, or None.

    Overrides win over whatever the source provides.
    """
    base = {}
    if name_or_path is None or name_or_path == "":
        pass
    elif name_or_path in PRESETS:
        base = dict(PRESETS[name_or_path])
    elif os.path.exists(str(name_or_path)):
        base = _parse_config_file(str(name_or_path))
    else:
        raise FormatError(
            f"model config {name_or_path!r} is neither a preset {sorted(PRESETS)} "
            "nor an existing file"
        )
    base.update(overrides)
    return ModelConfig(**base)


def _parse_config_file(path):
    """key=value or 'key value' lines; '#' starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, _, raw = line.partition("=")
            else:
                key, _, raw = line.partition(" ")
            key, raw = key.strip(), raw.strip()
            if key not in _FIELD_TYPES:
                raise FormatError(f"{path}:{lineno}: unknown config key {key!r}")
            if not raw:
                raise FormatError(f"{path}:{lineno}: missing value for {key!r}")
            try:
                out[key] = _coerce(key, raw)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
    return out
