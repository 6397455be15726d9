"""Student/teacher networks built from reparameterizable residual feature blocks.

Layout (student and teacher share it)::

    head 3x3 -> N x RRFB -> tail 3x3 (+ head skip) -> 3x3 to 3*s^2 -> pixel shuffle

Each RRFB is three conv stages with an activation after each, a residual add
of the block input and an optional spatial-attention gate. In ``train`` mode a
conv stage is an :class:`RRB` (3x3, 1x1, 1x1->3x3 and identity branches); in
``fused`` mode it is a single 3x3 convolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from dipforge.model.kernels import ConvKernel, fuse_parallel, fuse_sequential, identity_as_kernel

MODES = ("train", "fused")


class ConfigError(ValueError):
    """Invalid model or pipeline configuration."""


@dataclass
class ModelConfig:
    scale: int = 4
    width: int = 16
    blocks: int = 4
    inner_width: Optional[int] = None
    activation: str = "relu"
    attention: bool = True
    mode: str = "train"
    image_residual: bool = False
    anchor_taps: Optional[list] = None  # 1-based block positions; None taps every block

    def validate(self) -> "ModelConfig":
        if self.scale not in (1, 2, 3, 4):
            raise ConfigError(f"scale must be 1, 2, 3 or 4, got {self.scale}")
        if self.width < 4:
            raise ConfigError(f"feature width must be >= 4, got {self.width}")
        if self.blocks < 1:
            raise ConfigError(f"need at least one block, got {self.blocks}")
        if self.inner_width is not None and self.inner_width < 1:
            raise ConfigError("inner_width must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.anchor_taps is not None:
            taps = list(self.anchor_taps)
            if not taps or any(t < 1 or t > self.blocks for t in taps) or sorted(set(taps)) != taps:
                raise ConfigError(f"anchor taps {taps} must be increasing positions in 1..{self.blocks}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


_ACTIVATIONS = {
    "relu": lambda: nn.ReLU(),
    "lrelu": lambda: nn.LeakyReLU(0.05),
    "identity": lambda: nn.Identity(),
}


def _conv(cin, cout, k, **kw):
    return nn.Conv2d(cin, cout, k, padding=kw.pop("padding", k // 2), **kw)


class RRB(nn.Module):
    """Multi-branch conv stage that folds into one 3x3 convolution.

    The 1x1 of the sequential branch runs on a zero-padded input, so the
    intermediate border carries the 1x1 bias. That keeps the folded kernel
    exact on border pixels too.
    """

    def __init__(self, in_channels: int, out_channels: int, mid_channels: Optional[int] = None, identity: bool = True):
        super().__init__()
        mid = mid_channels or out_channels
        self.in_channels, self.out_channels = in_channels, out_channels
        self.direct3x3 = _conv(in_channels, out_channels, 3)
        self.expand1x1 = _conv(in_channels, out_channels, 1)
        self.seq_1x1 = _conv(in_channels, mid, 1, padding=1)
        self.seq_3x3 = _conv(mid, out_channels, 3, padding=0)
        self.identity = bool(identity and in_channels == out_channels)

    def forward(self, x):
        y = self.direct3x3(x) + self.expand1x1(x) + self.seq_3x3(self.seq_1x1(x))
        if self.identity:
            y = y + x
        return y

    def fuse(self) -> ConvKernel:
        # fold in float64 so the fused kernel is rounded once, not per branch
        dtype = self.direct3x3.weight.dtype
        branch = lambda conv: ConvKernel.from_conv(conv).to(torch.float64)  # noqa: E731
        seq = fuse_sequential(branch(self.seq_1x1), branch(self.seq_3x3))
        k = fuse_parallel(branch(self.direct3x3), branch(self.expand1x1))
        k = fuse_parallel(k, seq)
        if self.identity:
            k = fuse_parallel(k, identity_as_kernel(self.in_channels, dtype=torch.float64))
        return k.to(dtype)


class Conv3(nn.Module):
    """Fused conv stage; a plain 3x3 convolution."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.fused = _conv(in_channels, out_channels, 3)

    @property
    def in_channels(self):
        return self.fused.in_channels

    @property
    def out_channels(self):
        return self.fused.out_channels

    @classmethod
    def from_kernel(cls, k: ConvKernel) -> "Conv3":
        m = cls(k.in_channels, k.out_channels).to(k.weight.dtype)
        with torch.no_grad():
            m.fused.weight.copy_(k.weight)
            m.fused.bias.copy_(k.bias)
        return m

    def forward(self, x):
        return self.fused(x)

    def fuse(self) -> ConvKernel:
        return ConvKernel.from_conv(self.fused)


class SpatialGate(nn.Module):
    """Lightweight ESA-style gate: reduce, strided conv, pool, upsample, expand, sigmoid."""

    def __init__(self, channels: int, reduced: Optional[int] = None):
        super().__init__()
        f = reduced or max(1, channels // 4)
        self.reduce = _conv(channels, f, 1)
        self.down = nn.Conv2d(f, f, 3, stride=2, padding=1)
        self.expand = _conv(f, channels, 1)

    def forward(self, x):
        y = self.down(self.reduce(x))
        y = F.max_pool2d(y, kernel_size=3, stride=2, padding=1)
        y = F.interpolate(y, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return x * torch.sigmoid(self.expand(y))


class RRFB(nn.Module):
    def __init__(self, width: int, inner_width: Optional[int] = None, activation: str = "relu",
                 attention: bool = True, residual: bool = True, mode: str = "train"):
        super().__init__()
        inner = inner_width or width
        stage = RRB if mode == "train" else Conv3
        self.conv1 = stage(width, inner)
        self.conv2 = stage(inner, inner)
        self.conv3 = stage(inner, width)
        self.act = _ACTIVATIONS[activation]()
        self.residual = residual
        self.attn = SpatialGate(width) if attention else None

    @property
    def stages(self):
        return [self.conv1, self.conv2, self.conv3]

    def forward(self, x):
        y = self.act(self.conv1(x))
        y = self.act(self.conv2(y))
        y = self.act(self.conv3(y))
        if self.residual:
            y = y + x
        if self.attn is not None:
            y = self.attn(y)
        return y


class SRNet(nn.Module):
    """Shared body of the student, teacher and 1x enhancer networks."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        cfg = config.validate()
        self.config = cfg
        w, s = cfg.width, cfg.scale
        self.head = _conv(3, w, 3)
        self.blocks = nn.ModuleList(
            RRFB(w, cfg.inner_width, cfg.activation, cfg.attention, mode=cfg.mode) for _ in range(cfg.blocks)
        )
        self.tail = _conv(w, w, 3)
        self.upsampler = _conv(w, 3 * s * s, 3)
        self.shuffle = nn.PixelShuffle(s)

    @property
    def scale(self) -> int:
        return self.config.scale

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def anchor_taps(self) -> list:
        return list(self.config.anchor_taps or range(1, len(self.blocks) + 1))

    def forward_features(self, x):
        """Return ``(sr, anchors)`` where anchors are the tapped block outputs."""
        h = self.head(x)
        taps = set(self.anchor_taps)
        anchors = []
        y = h
        for i, block in enumerate(self.blocks, start=1):
            y = block(y)
            if i in taps:
                anchors.append(y)
        y = self.tail(y) + h
        out = self.shuffle(self.upsampler(y))
        if self.config.image_residual:
            out = out + _upsample_image(x, self.scale)
        return out, anchors

    def forward(self, x):
        h = self.head(x)
        y = h
        for block in self.blocks:
            y = block(y)
        out = self.shuffle(self.upsampler(self.tail(y) + h))
        if self.config.image_residual:
            out = out + _upsample_image(x, self.scale)
        return out

    def anchors(self, x) -> list:
        return self.forward_features(x)[1]


def _upsample_image(x, scale):
    if scale == 1:
        return x
    return F.interpolate(x, scale_factor=scale, mode="bicubic", align_corners=False)


class StudentModel(SRNet):
    pass


class TeacherModel(SRNet):
    pass


def build_student(config: ModelConfig | dict | None = None, **overrides) -> StudentModel:
    cfg = _coerce(config, overrides)
    if cfg.anchor_taps is not None:
        raise ConfigError("the student exposes every block as an anchor; anchor_taps is teacher-only")
    return StudentModel(cfg)


def build_teacher(config: ModelConfig | dict | None = None, **overrides) -> TeacherModel:
    base = dict(width=64, blocks=8, mode="fused", anchor_taps=[2, 4, 6, 8])
    if isinstance(config, ModelConfig):
        config = config.to_dict()
    base.update(config or {})
    base.update(overrides)
    return TeacherModel(ModelConfig(**base))


def build_model(config: ModelConfig | dict, role: str = "student") -> SRNet:
    cfg = _coerce(config, {})
    cls = {"student": StudentModel, "teacher": TeacherModel, "enhancer": StudentModel}[role]
    return cls(cfg)


def _coerce(config, overrides) -> ModelConfig:
    if config is None:
        config = {}
    if isinstance(config, ModelConfig):
        config = config.to_dict()
    data = dict(config)
    data.update(overrides)
    unknown = set(data) - set(ModelConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**data).validate()
