"""Model-guided ground-truth enhancement.

A 1x restoration network is trained to undo a mild synthetic softening of the
HR images (Gaussian blur then a bicubic 2x round trip), then applied to the
HR images themselves to produce sharper targets. Every patch is kept; there
is no manual selection step.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from dipforge.data import SRDataset, bicubic_resize, save_png, to_uint8
from dipforge.distill import l1
from dipforge.model import ConfigError, SRNet, build_model
from dipforge.training import fit, make_sampler, seed_everything, super_resolve


@dataclass
class EnhancerConfig:
    width: int = 16
    blocks: int = 2
    steps: int = 2000
    lr: float = 1e-4
    halve_every: int = 100_000
    batch_size: int = 16
    patch_size: int = 48
    seed: int = 0
    strength: float = 1.0
    blur_sigma: float = 0.6

    def validate(self) -> "EnhancerConfig":
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError(f"enhancement strength must lie in [0, 1], got {self.strength}")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        return self


@dataclass
class EnhancerModel:
    net: SRNet
    strength: float = 1.0

    def __post_init__(self):
        if self.net.scale != 1:
            raise ConfigError(f"enhancer must be a 1x model, got scale {self.net.scale}")
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError(f"enhancement strength must lie in [0, 1], got {self.strength}")

    def restore(self, hr: np.ndarray) -> np.ndarray:
        return super_resolve(self.net, hr)

    def __call__(self, hr: np.ndarray, strength: Optional[float] = None) -> np.ndarray:
        lam = self.strength if strength is None else strength
        if lam == 0:
            return hr.copy()
        out = self.restore(hr)
        if out.shape != hr.shape:
            raise ValueError(f"enhancer changed image shape {hr.shape} -> {out.shape}")
        return np.clip(lam * out + (1.0 - lam) * hr, 0.0, 1.0).astype(np.float32)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in self.net.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def soften(img: np.ndarray, sigma: float = 0.6) -> np.ndarray:
    """Gaussian blur followed by a bicubic down/up round trip by 2."""
    h, w = img.shape[:2]
    blurred = np.stack([gaussian_filter(img[..., c], sigma, mode="reflect") for c in range(img.shape[2])], -1)
    small = bicubic_resize(blurred.astype(np.float32), Fraction(1, 2))
    return bicubic_resize(small, 2)[:h, :w]


def build_enhancer_net(width: int = 16, blocks: int = 2) -> SRNet:
    """1x network that starts out as the identity map."""
    net = build_model(dict(scale=1, width=width, blocks=blocks, mode="fused", image_residual=True), role="enhancer")
    torch.nn.init.zeros_(net.upsampler.weight)
    torch.nn.init.zeros_(net.upsampler.bias)
    return net


def train_enhancer(ds: SRDataset, config: Optional[EnhancerConfig] = None):
    """Train on ``(soften(HR), HR)`` pairs with L1; returns ``(EnhancerModel, trace)``."""
    cfg = (config or EnhancerConfig()).validate()
    seed_everything(cfg.seed)
    pairs = SRDataset(
        names=list(ds.names), hr=list(ds.hr), lr=[soften(h, cfg.blur_sigma) for h in ds.hr], scale=1,
    )
    net = build_enhancer_net(cfg.width, cfg.blocks)
    sampler = make_sampler(pairs, cfg.patch_size, cfg.seed, True, target="hr")

    def step(x, y):
        loss = l1(net(x), y)
        return loss, {"loss": loss.item()}

    trace = fit(net.parameters(), step, sampler, cfg.steps, cfg.lr, cfg.halve_every, cfg.batch_size, modules=(net,))
    net.eval()
    return EnhancerModel(net, cfg.strength), trace


def enhance_dataset(ds: SRDataset, model: EnhancerModel, out_dir=None) -> SRDataset:
    """Populate ``enh`` for every sample; optionally write sidecar PNGs named like the HR files.

    Enhanced images are quantized to 8 bits so the in-memory copy equals what a
    reload of the sidecar folder would give.
    """
    enh = []
    for name, hr in zip(ds.names, ds.hr):
        e = to_uint8(model(hr)).astype(np.float32) / 255.0
        if e.shape != hr.shape:
            raise ValueError(f"{name}: enhanced shape {e.shape} != {hr.shape}")
        enh.append(e)
        if out_dir is not None:
            save_png(e, Path(out_dir) / name)
    out = ds.with_enh(enh)
    out.meta = {**ds.meta, "enh_strength": model.strength, "enhancer_hash": model.fingerprint()}
    return out


def config_dict(cfg: EnhancerConfig) -> dict:
    return asdict(cfg)
