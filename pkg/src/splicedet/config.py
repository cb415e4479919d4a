"""Run configuration.

Keys mirror the Mask R-CNN configuration table names (``IMAGE_SHAPE``,
``RPN_ANCHOR_SCALES`` ...) so that table can be pasted into a config file
almost verbatim. The file format is one ``KEY = VALUE`` (or ``KEY VALUE``)
pair per line; ``#`` starts a comment. Spaces inside a key are folded to
underscores, so ``IMAGE MAX DIM 512`` is accepted as well.
"""

from __future__ import annotations

import ast
import dataclasses
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # configuration-table keys
    BACKBONE: str = "mobilenetv1"
    IMAGE_MAX_DIM: int = 512
    IMAGE_MIN_DIM: int = 800  # recorded only; IMAGE_SHAPE governs resizing
    IMAGE_META_SIZE: int = 15  # recorded only
    IMAGE_SHAPE: tuple = (512, 512, 3)
    LEARNING_RATE: float = 0.01
    MASK_SHAPE: tuple = (28, 28)
    RPN_ANCHOR_SCALES: tuple = (8, 16, 32, 64, 128)
    STEPS_PER_EPOCH: int = 50
    WEIGHT_DECAY: float = 0.0001

    # model
    NUM_CLASSES: int = 1  # foreground classes; background is added on top
    DEPTH_MULTIPLIER: float = 1.0
    RESOLUTION_MULTIPLIER: float = 1.0
    BN_MOMENTUM: float = 0.9
    BN_EPS: float = 1e-5
    TRAIN_BN: bool = True
    FPN_CHANNELS: int = 256
    RPN_CONV_CHANNELS: int = 512
    BOX_HEAD_DIM: int = 1024
    MASK_HEAD_CHANNELS: int = 256
    MASK_HEAD_CONVS: int = 4
    BG_BOX_DELTAS: bool = False
    POOL_SIZE: int = 7
    MASK_POOL_SIZE: int = 14
    ROI_SAMPLING_RATIO: int = 2
    ROI_CANONICAL_SIZE: float = 224.0
    ROI_CANONICAL_LEVEL: int = 4

    # rpn
    RPN_ANCHOR_RATIOS: tuple = (0.5, 1.0, 2.0)
    ANCHOR_SCALE_UNITS: str = "stride"  # "stride": side = scale * stride; "pixels": side = scale
    RPN_POS_IOU: float = 0.7
    RPN_NEG_IOU: float = 0.3
    RPN_TRAIN_ANCHORS_PER_IMAGE: int = 256
    RPN_POS_FRACTION: float = 0.5
    RPN_NMS_THRESHOLD: float = 0.7
    PRE_NMS_LIMIT_TRAIN: int = 2000
    PRE_NMS_LIMIT_INFERENCE: int = 1000
    POST_NMS_ROIS_TRAINING: int = 512
    POST_NMS_ROIS_INFERENCE: int = 256
    BBOX_STD_DEV: tuple = (0.1, 0.1, 0.2, 0.2)

    # roi heads
    TRAIN_ROIS_PER_IMAGE: int = 512
    ROI_POSITIVE_RATIO: float = 0.25
    ROI_FG_IOU: float = 0.5
    USE_GT_AS_PROPOSALS: bool = True
    DETECTION_MIN_CONFIDENCE: float = 0.5
    DETECTION_NMS_THRESHOLD: float = 0.3
    DETECTION_MAX_INSTANCES: int = 100
    MASK_THRESHOLD: float = 0.5

    # losses
    RPN_LAMBDA: float = 1.0
    RPN_CLS_NORM: str = "sampled"
    RPN_REG_NORM: str = "sampled"
    SMOOTH_L1_BETA: float = 1.0

    # training
    EPOCHS: int = 360
    TOTAL_STEPS: Any = None  # literal "iterations" reading; overrides EPOCHS * STEPS_PER_EPOCH
    LR_DROPS: tuple = ((120, 0.003), (240, 0.001))
    MOMENTUM: float = 0.9
    GRADIENT_CLIP_NORM: Any = 10.0
    CHECKPOINT_EVERY_EPOCHS: int = 10
    ACCUMULATE_STEPS: int = 1
    USE_AUTHENTIC: bool = True
    SEED: int = 0

    # evaluation
    MATCHING_IOU: float = 0.5
    IOU_KIND: str = "mask"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.BACKBONE.lower() != "mobilenetv1":
            raise ConfigError(f"unsupported BACKBONE {self.BACKBONE!r}; only mobilenetv1 is built in")
        if len(self.IMAGE_SHAPE) != 3 or self.IMAGE_SHAPE[0] != self.IMAGE_SHAPE[1]:
            raise ConfigError(f"IMAGE_SHAPE must be square [S S 3], got {self.IMAGE_SHAPE}")
        if self.IMAGE_SHAPE[0] % 64:
            raise ConfigError("IMAGE_SHAPE side must be divisible by 64 (P6 stride)")
        if tuple(self.MASK_SHAPE) != (2 * self.MASK_POOL_SIZE,) * 2:
            raise ConfigError("MASK_SHAPE must be twice MASK_POOL_SIZE (one stride-2 deconvolution)")
        if len(self.RPN_ANCHOR_SCALES) != 5:
            raise ConfigError("RPN_ANCHOR_SCALES needs one scale per pyramid level P2..P6")
        if not 0 < self.DEPTH_MULTIPLIER <= 1 or not 0 < self.RESOLUTION_MULTIPLIER <= 1:
            raise ConfigError("multipliers must lie in (0, 1]")
        if self.RPN_POS_IOU <= self.RPN_NEG_IOU:
            raise ConfigError("RPN_POS_IOU must exceed RPN_NEG_IOU")
        if self.ANCHOR_SCALE_UNITS not in ("stride", "pixels"):
            raise ConfigError("ANCHOR_SCALE_UNITS must be 'stride' or 'pixels'")
        if self.IOU_KIND not in ("mask", "box"):
            raise ConfigError("IOU_KIND must be 'mask' or 'box'")
        if self.RPN_LAMBDA <= 0 or self.SMOOTH_L1_BETA <= 0:
            raise ConfigError("RPN_LAMBDA and SMOOTH_L1_BETA must be positive")

    @property
    def image_size(self) -> int:
        """Network input side after the resolution multiplier, kept a multiple of 64."""
        side = self.IMAGE_SHAPE[0] * self.RESOLUTION_MULTIPLIER
        return max(64, int(round(side / 64)) * 64)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, overrides=None) -> "Config":
        values = parse_key_values(text)
        if overrides:
            values.update(parse_overrides(overrides))
        return cls.from_mapping(values)

    @classmethod
    def load(cls, path=None, overrides=None) -> "Config":
        text = Path(path).read_text() if path else ""
        return cls.loads(text, overrides)

    @classmethod
    def from_mapping(cls, values: dict) -> "Config":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            default = known[key].default
            kwargs[key] = _coerce(key, raw, default)
        return cls(**kwargs)


def _normalize_key(key: str) -> str:
    return re.sub(r"[\s_]+", "_", key.strip()).upper()


def parse_key_values(text: str) -> dict:
    known = {f.name for f in fields(Config)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = line.split("=", 1)
        else:
            # "IMAGE MAX DIM 512": the longest run of leading words naming a known key
            tokens = line.split()
            if len(tokens) < 2:
                raise ConfigError(f"line {lineno}: expected KEY = VALUE")
            cut = next((i for i in range(len(tokens) - 1, 0, -1)
                        if _normalize_key("_".join(tokens[:i])) in known), 1)
            key, value = " ".join(tokens[:cut]), " ".join(tokens[cut:])
        values[_normalize_key(key)] = _parse_value(value.strip())
    return values


def parse_overrides(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        out[_normalize_key(key)] = _parse_value(value.strip())
    return out


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    if text[:1] in "[(" and text[-1:] in "])":
        # "[512 512 3]" style, as printed by numpy
        inner = text[1:-1].replace(",", " ").split()
        try:
            return tuple(ast.literal_eval(tok) for tok in inner)
        except (ValueError, SyntaxError):
            pass
    return text


def _coerce(key, value, default):
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            if not isinstance(value, int) or isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return str(value)
        if isinstance(default, tuple):
            if not isinstance(value, (tuple, list)):
                raise TypeError
            return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r} (expected {type(default).__name__})") from None
    return value


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return repr(tuple(value))
    if isinstance(value, str):
        return value
    return repr(value)


def smoke_config(**overrides) -> Config:
    """Reduced-width profile for desk-scale overfitting runs: 128 px input,
    half-width backbone, narrow heads, 4 x 50 optimizer steps of 5 images
    each. Batch-norm statistics stay frozen because batch-of-one statistics
    seen in training differ from the moving averages used at inference."""
    base = dict(
        IMAGE_SHAPE=(128, 128, 3),
        IMAGE_MAX_DIM=128,
        DEPTH_MULTIPLIER=0.5,
        TRAIN_BN=False,
        FPN_CHANNELS=64,
        RPN_CONV_CHANNELS=64,
        BOX_HEAD_DIM=256,
        MASK_HEAD_CHANNELS=64,
        RPN_ANCHOR_SCALES=(4, 4, 4, 4, 4),
        PRE_NMS_LIMIT_TRAIN=600,
        PRE_NMS_LIMIT_INFERENCE=600,
        POST_NMS_ROIS_TRAINING=128,
        POST_NMS_ROIS_INFERENCE=64,
        TRAIN_ROIS_PER_IMAGE=64,
        ROI_POSITIVE_RATIO=0.5,
        RPN_TRAIN_ANCHORS_PER_IMAGE=128,
        ROI_CANONICAL_SIZE=112.0,
        LEARNING_RATE=0.015,
        GRADIENT_CLIP_NORM=5.0,
        STEPS_PER_EPOCH=50,
        EPOCHS=4,
        LR_DROPS=((2, 0.005), (3, 0.0015)),
        ACCUMULATE_STEPS=5,
        CHECKPOINT_EVERY_EPOCHS=4,
    )
    base.update(overrides)
    return Config(**base)
