"""MobileNet V1 feature extractor, FPN, and parameter/cost accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

STANDARD = "standard_conv"
SEPARABLE = "depthwise_separable"

# (operator, out channels c, repeats n, first stride s), one row per table line
MOBILENET_V1_STAGES = (
    (STANDARD, 32, 1, 2),
    (SEPARABLE, 64, 1, 1),
    (SEPARABLE, 128, 1, 2),
    (SEPARABLE, 128, 1, 1),
    (SEPARABLE, 256, 1, 2),
    (SEPARABLE, 256, 1, 1),
    (SEPARABLE, 512, 1, 2),
    (SEPARABLE, 512, 5, 1),
    (SEPARABLE, 1024, 1, 2),
    (SEPARABLE, 1024, 1, 1),
)


@dataclass
class BackboneConfig:
    depth_multiplier: float = 1.0
    resolution_multiplier: float = 1.0
    stage_spec: tuple = MOBILENET_V1_STAGES
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    train_bn: bool = True

    def __post_init__(self):
        if not 0 < self.depth_multiplier <= 1 or not 0 < self.resolution_multiplier <= 1:
            raise ValueError("multipliers must lie in (0, 1]")
        first = self.stage_spec[0]
        if first[0] != STANDARD or first[1] != 32 or first[3] != 2:
            raise ValueError("first stage must be a 32-channel stride-2 standard convolution")
        for op, c, n, s in self.stage_spec:
            if op not in (STANDARD, SEPARABLE) or s not in (1, 2) or n < 1 or c < 1:
                raise ValueError(f"bad stage row {(op, c, n, s)}")

    def channels(self, c: int) -> int:
        return scale_channels(c, self.depth_multiplier)


def scale_channels(c: int, multiplier: float, divisor: int = 8) -> int:
    """Apply the depth multiplier, rounding to the nearest multiple of 8 (never below 8)."""
    if multiplier == 1.0:
        return c
    return max(divisor, int(round(c * multiplier / divisor)) * divisor)


class ConvBN(nn.Module):
    """Convolution (or dense layer when ``kernel_size`` is None) + batch norm
    + optional ReLU6. Parameter names follow the checkpoint scheme:
    ``weight``, ``bias``, ``bn_gamma``, ``bn_beta``, ``bn_mean``, ``bn_var``."""

    def __init__(self, in_ch, out_ch, kernel_size=3, stride=1, groups=1, bias=False,
                 activation="relu6", bn_momentum=0.9, bn_eps=1e-5, train_bn=True):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel_size, self.stride, self.groups = kernel_size, stride, groups
        if kernel_size is None:
            self.weight = nn.Parameter(torch.empty(out_ch, in_ch))
        else:
            self.weight = nn.Parameter(torch.empty(out_ch, in_ch // groups, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        self.bn_gamma = nn.Parameter(torch.ones(out_ch))
        self.bn_beta = nn.Parameter(torch.zeros(out_ch))
        self.register_buffer("bn_mean", torch.zeros(out_ch))
        self.register_buffer("bn_var", torch.ones(out_ch))
        self.activation = activation
        self.bn_momentum, self.bn_eps, self.train_bn = bn_momentum, bn_eps, train_bn
        fan_in = self.weight[0].numel()
        nn.init.normal_(self.weight, 0.0, math.sqrt(2.0 / fan_in))

    def forward(self, x):
        if self.kernel_size is None:
            x = F.linear(x, self.weight, self.bias)
        else:
            x = F.conv2d(x, self.weight, self.bias, self.stride, self.kernel_size // 2, 1, self.groups)
        use_batch = self.training and self.train_bn
        if use_batch and x.dim() == 2 and x.shape[0] < 2:
            use_batch = False  # a single row has no batch statistics
        # keras-style momentum m keeps m of the old running value; torch expects 1 - m
        x = F.batch_norm(x, self.bn_mean, self.bn_var, self.bn_gamma, self.bn_beta,
                         use_batch, 1.0 - self.bn_momentum, self.bn_eps)
        if self.activation == "relu6":
            x = F.relu6(x)
        elif self.activation == "relu":
            x = F.relu(x)
        return x


class SeparableBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride, **bn):
        super().__init__()
        self.dw = ConvBN(in_ch, in_ch, 3, stride, groups=in_ch, **bn)
        self.pw = ConvBN(in_ch, out_ch, 1, 1, **bn)

    def forward(self, x):
        return self.pw(self.dw(x))


class MobileNetV1(nn.Module):
    """Layers are named ``conv0`` (standard stem) and ``conv1`` ... ``convN``
    (separable). Stage outputs ``C1..C5`` are the last activations at
    strides 2, 4, 8, 16, 32."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config = config or BackboneConfig()
        bn = dict(bn_momentum=config.bn_momentum, bn_eps=config.bn_eps, train_bn=config.train_bn)
        self.layer_names, self.layer_strides = [], []
        in_ch, stride, idx = 3, 1, 0
        for op, c, n, s in config.stage_spec:
            out_ch = config.channels(c)
            for rep in range(n):
                layer_stride = s if rep == 0 else 1
                if op == STANDARD:
                    layer = ConvBN(in_ch, out_ch, 3, layer_stride, **bn)
                else:
                    layer = SeparableBlock(in_ch, out_ch, layer_stride, **bn)
                name = f"conv{idx}"
                self.add_module(name, layer)
                stride *= layer_stride
                self.layer_names.append(name)
                self.layer_strides.append(stride)
                in_ch, idx = out_ch, idx + 1
        # last layer at each stride feeds C_k
        self.stage_layers = {}
        for name, s in zip(self.layer_names, self.layer_strides):
            k = int(round(math.log2(s)))
            if k >= 1:
                self.stage_layers[f"C{k}"] = name
        self.stage_channels = {k: getattr(self, v).pw.out_ch if isinstance(getattr(self, v), SeparableBlock)
                               else getattr(self, v).out_ch for k, v in self.stage_layers.items()}

    def forward(self, x, return_layers=False):
        outputs, stages = [], {}
        wanted = {v: k for k, v in self.stage_layers.items()}
        for name in self.layer_names:
            x = getattr(self, name)(x)
            if return_layers:
                outputs.append(x)
            if name in wanted:
                stages[wanted[name]] = x
        return (stages, outputs) if return_layers else stages


def build_mobilenet_v1(config: BackboneConfig | None = None) -> MobileNetV1:
    return MobileNetV1(config)


def table_shapes(input_hw=(224, 224), config: BackboneConfig | None = None) -> list:
    """Analytic (H, W, C) after each table row, by ceil-division of strides."""
    config = config or BackboneConfig()
    h, w = input_hw
    rows = []
    for op, c, n, s in config.stage_spec:
        h, w = math.ceil(h / s), math.ceil(w / s)
        rows.append((h, w, config.channels(c)))
    return rows


# --- depthwise separable convolution primitives ---------------------------

def depthwise_separable_forward(x, dw_kernel, pw_kernel, stride: int = 1):
    """pointwise(depthwise(x)) with zero 'same' padding.

    ``x`` is (C, H, W) or (N, C, H, W); ``dw_kernel`` is (C, k, k), one filter
    per channel; ``pw_kernel`` is (C_out, C) and mixes channels linearly.
    """
    x = torch.as_tensor(x)
    dw = torch.as_tensor(dw_kernel, dtype=x.dtype)
    pw = torch.as_tensor(pw_kernel, dtype=x.dtype)
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {tuple(x.shape)}")
    c = x.shape[1]
    if dw.dim() != 3 or dw.shape[0] != c or dw.shape[1] != dw.shape[2]:
        raise ValueError(f"depthwise kernel {tuple(dw.shape)} does not match {c} input channels")
    if pw.dim() != 2 or pw.shape[1] != c:
        raise ValueError(f"pointwise kernel {tuple(pw.shape)} does not match {c} channels")
    k = dw.shape[-1]
    y = F.conv2d(x, dw.unsqueeze(1), None, stride, k // 2, 1, c)
    y = F.conv2d(y, pw[:, :, None, None])
    return y.squeeze(0) if squeeze else y


def dsc_cost_ratio(kernel_size: int, out_channels: int) -> float:
    """Separable / standard multiply-accumulate cost for identical layer shapes."""
    if kernel_size < 1 or out_channels < 1:
        raise ValueError("kernel_size and out_channels must be >= 1")
    return 1.0 / out_channels + 1.0 / kernel_size ** 2


def count_macs(model: nn.Module, x) -> int:
    """Multiply-accumulates performed by every convolution / dense layer on input ``x``."""
    total = 0

    def hook(mod, inputs, output):
        nonlocal total
        if isinstance(mod, nn.Conv2d):
            per_out = mod.in_channels // mod.groups * mod.kernel_size[0] * mod.kernel_size[1]
            total += output.numel() * per_out
        elif isinstance(mod, nn.Linear):
            total += output.numel() * mod.in_features
        elif isinstance(mod, ConvBN):
            total += output.numel() * mod.weight[0].numel()

    handles = [m.register_forward_hook(hook) for m in model.modules()
               if isinstance(m, (nn.Conv2d, nn.Linear, ConvBN))]
    try:
        with torch.no_grad():
            model(x)
    finally:
        for h in handles:
            h.remove()
    return total


# --- feature pyramid ------------------------------------------------------

@dataclass
class FeaturePyramid:
    levels: dict  # "P2".."P6" -> (N, C, H, W)
    strides: dict = field(default_factory=lambda: {f"P{k}": 2 ** k for k in range(2, 7)})

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[1]

    def __getitem__(self, key):
        return self.levels[key]

    def items(self):
        return [(k, self.levels[k]) for k in sorted(self.levels, key=lambda s: int(s[1:]))]


class FPN(nn.Module):
    def __init__(self, in_channels=(128, 256, 512, 1024), out_channels: int = 256):
        super().__init__()
        self.out_channels = out_channels
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.smooth = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels)
        for m in list(self.lateral) + list(self.smooth):
            nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / m.weight[0].numel()))
            nn.init.zeros_(m.bias)

    def forward(self, stages) -> FeaturePyramid:
        if isinstance(stages, dict):
            stages = [stages[f"C{k}"] for k in range(2, 6)]
        for lo, hi in zip(stages[:-1], stages[1:]):
            if hi.shape[-2:] != tuple(math.ceil(s / 2) for s in lo.shape[-2:]):
                raise ValueError(f"stage sizes must halve: {tuple(lo.shape[-2:])} -> {tuple(hi.shape[-2:])}")
        laterals = [conv(c) for conv, c in zip(self.lateral, stages)]
        merged = [laterals[-1]]
        for lat in reversed(laterals[:-1]):
            up = F.interpolate(merged[0], scale_factor=2, mode="nearest")
            merged.insert(0, lat + up[..., : lat.shape[-2], : lat.shape[-1]])
        outs = [conv(m) for conv, m in zip(self.smooth, merged)]
        levels = {f"P{k}": o for k, o in zip(range(2, 6), outs)}
        levels["P6"] = levels["P5"][..., ::2, ::2]
        return FeaturePyramid(levels)


def build_fpn(stage_outputs, out_channels: int = 256, fpn: FPN | None = None) -> FeaturePyramid:
    """Lift C2..C5 to P2..P6 (uses ``fpn``'s weights when given)."""
    if isinstance(stage_outputs, dict):
        stage_outputs = [stage_outputs[f"C{k}"] for k in range(2, 6)]
    if fpn is None:
        fpn = FPN([c.shape[1] for c in stage_outputs], out_channels)
    return fpn(stage_outputs)


# --- parameter accounting -------------------------------------------------

NON_TRAINABLE_BUFFERS = ("bn_mean", "bn_var")


@dataclass
class ParameterReport:
    total: int
    trainable: int
    non_trainable: int
    per_layer: list  # [(layer name, trainable, non_trainable)]

    def format(self, breakdown: bool = True) -> str:
        lines = []
        if breakdown:
            width = max((len(n) for n, _, _ in self.per_layer), default=10)
            for name, tr, nt in self.per_layer:
                lines.append(f"{name:<{width}}  {tr:>12,}  {nt:>9,}")
            lines.append("")
        lines.append(f"Total params: {self.total:,}")
        lines.append(f"Trainable params: {self.trainable:,}")
        lines.append(f"Non-trainable params: {self.non_trainable:,}")
        return "\n".join(lines)


def count_parameters(model: nn.Module | None) -> ParameterReport:
    """Batch-norm moving statistics count as non-trainable weights."""
    if model is None:
        return ParameterReport(0, 0, 0, [])
    layers = {}

    def add(name, n, trainable):
        layer = name.rsplit(".", 1)[0] if "." in name else name
        tr, nt = layers.get(layer, (0, 0))
        layers[layer] = (tr + n, nt) if trainable else (tr, nt + n)

    for name, p in model.named_parameters():
        add(name, p.numel(), p.requires_grad)
    for name, b in model.named_buffers():
        if name.rsplit(".", 1)[-1] in NON_TRAINABLE_BUFFERS:
            add(name, b.numel(), False)
    per_layer = [(k, v[0], v[1]) for k, v in layers.items()]
    trainable = sum(v[0] for v in layers.values())
    non_trainable = sum(v[1] for v in layers.values())
    return ParameterReport(trainable + non_trainable, trainable, non_trainable, per_layer)


def analytic_backbone_count(config: BackboneConfig | None = None) -> tuple:
    """(trainable, non_trainable) from the stage table alone."""
    config = config or BackboneConfig()
    trainable = non_trainable = 0
    in_ch = 3
    for op, c, n, _ in config.stage_spec:
        out_ch = config.channels(c)
        for _ in range(n):
            if op == STANDARD:
                trainable += 9 * in_ch * out_ch + 2 * out_ch
                non_trainable += 2 * out_ch
            else:
                trainable += 9 * in_ch + 2 * in_ch + in_ch * out_ch + 2 * out_ch
                non_trainable += 2 * in_ch + 2 * out_ch
            in_ch = out_ch
    return trainable, non_trainable


def numpy_state(model: nn.Module) -> dict:
    """Flat name -> array view of parameters and batch-norm statistics."""
    out = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    for name, b in model.named_buffers():
        out[name] = b.detach().cpu().numpy()
    return dict(sorted(out.items()))


def load_numpy_state(model: nn.Module, state: dict, strict: bool = True) -> None:
    own = dict(model.named_parameters())
    own.update(dict(model.named_buffers()))
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if strict and (missing or unexpected):
        raise KeyError(f"checkpoint mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
    with torch.no_grad():
        for name, arr in state.items():
            if name in own:
                t = own[name]
                src = torch.from_numpy(np.ascontiguousarray(arr))
                if tuple(src.shape) != tuple(t.shape):
                    raise ValueError(f"{name}: shape {tuple(src.shape)} != {tuple(t.shape)}")
                t.copy_(src.to(t.dtype))
