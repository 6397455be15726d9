"""Convolution kernels as plain data plus the algebra that merges them.

A :class:`ConvKernel` is the unit that reparameterization and pruning act on.
All fusion helpers return new kernels and keep the dtype of their inputs, so
the same code validates fusion in single and double precision.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class FusionError(ValueError):
    """Raised when two kernels cannot be merged into one."""


@dataclass(frozen=True)
class ConvKernel:
    weight: torch.Tensor  # [out, in, k, k]
    bias: torch.Tensor  # [out]

    def __post_init__(self):
        w, b = self.weight, self.bias
        if w.dim() != 4 or w.shape[2] != w.shape[3] or w.shape[2] not in (1, 3):
            raise ValueError(f"expected [out, in, k, k] with k in (1, 3), got {tuple(w.shape)}")
        if min(w.shape) < 1:
            raise ValueError(f"empty kernel {tuple(w.shape)}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {tuple(b.shape)} does not match {w.shape[0]} filters")
        if not bool(torch.isfinite(w).all()) or not bool(torch.isfinite(b).all()):
            raise ValueError("kernel contains non-finite values")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def from_conv(cls, conv: nn.Conv2d) -> "ConvKernel":
        bias = conv.bias if conv.bias is not None else torch.zeros(conv.out_channels, dtype=conv.weight.dtype)
        return cls(conv.weight.detach().clone(), bias.detach().clone())

    def to(self, dtype) -> "ConvKernel":
        return ConvKernel(self.weight.to(dtype), self.bias.to(dtype))

    @classmethod
    def random(cls, out_channels: int, in_channels: int, k: int, *, generator=None, dtype=torch.float32):
        w = torch.randn(out_channels, in_channels, k, k, generator=generator, dtype=dtype)
        b = torch.randn(out_channels, generator=generator, dtype=dtype)
        return cls(w, b)

    def to_conv(self) -> nn.Conv2d:
        conv = nn.Conv2d(self.in_channels, self.out_channels, self.k, padding=self.k // 2)
        conv = conv.to(self.weight.dtype)
        with torch.no_grad():
            conv.weight.copy_(self.weight)
            conv.bias.copy_(self.bias)
        return conv

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        """Same-size convolution with zero padding."""
        return F.conv2d(x, self.weight, self.bias, padding=self.k // 2)

    def as_3x3(self) -> "ConvKernel":
        if self.k == 3:
            return self
        return ConvKernel(F.pad(self.weight, [1, 1, 1, 1]), self.bias)


def fuse_parallel(a: ConvKernel, b: ConvKernel) -> ConvKernel:
    """Kernel whose output equals ``a(x) + b(x)``; 1x1 kernels land on the 3x3 center."""
    if a.in_channels != b.in_channels or a.out_channels != b.out_channels:
        raise FusionError(
            f"parallel branches disagree: {a.out_channels}x{a.in_channels} vs {b.out_channels}x{b.in_channels}"
        )
    a3, b3 = a.as_3x3(), b.as_3x3()
    return ConvKernel(a3.weight + b3.weight, a.bias + b.bias)


def fuse_sequential(first: ConvKernel, second: ConvKernel) -> ConvKernel:
    """Collapse a 1x1 conv followed by a 3x3 conv into one 3x3 conv.

    The composition is exact at image borders only if the intermediate map is
    padded with ``first.bias`` rather than zeros, which is what
    :class:`~dipforge.model.blocks.RRB` does in train mode.
    """
    if first.k != 1 or second.k != 3:
        raise FusionError("sequential fusion expects a 1x1 kernel followed by a 3x3 kernel")
    if first.out_channels != second.in_channels:
        raise FusionError(f"inner width mismatch: {first.out_channels} != {second.in_channels}")
    w1 = first.weight[:, :, 0, 0]  # [mid, in]
    weight = torch.einsum("omhw,mi->oihw", second.weight, w1)
    bias = second.bias + torch.einsum("omhw,m->o", second.weight, first.bias)
    return ConvKernel(weight, bias)


def identity_as_kernel(channels: int, dtype=torch.float32) -> ConvKernel:
    """3x3 Dirac kernel: convolving with it returns the input unchanged."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    w = torch.zeros(channels, channels, 3, 3, dtype=dtype)
    idx = torch.arange(channels)
    w[idx, idx, 1, 1] = 1.0
    return ConvKernel(w, torch.zeros(channels, dtype=dtype))
