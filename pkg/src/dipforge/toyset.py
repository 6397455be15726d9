"""Procedural stand-in for DIV2K at desk scale.

Images mix smooth gradients, antialiased shapes, stripe and ring textures
and a little fine-grained texture, which gives a learned upsampler something
to beat bicubic on. Generation is fully determined by the seed.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from dipforge.data import save_png

SUPERSAMPLE = 4


def _grid(size):
    n = size * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c, indexing="ij")


def _texture(rng, yy, xx):
    kind = rng.integers(4)
    freq = rng.uniform(3, 14)
    theta = rng.uniform(0, np.pi)
    if kind == 0:  # straight stripes
        t = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
        return (t > 0).astype(np.float64) if rng.random() < 0.5 else 0.5 + 0.5 * t
    if kind == 1:  # rings
        cy, cx = rng.uniform(0, 1, 2)
        r = np.hypot(yy - cy, xx - cx)
        return 0.5 + 0.5 * np.sin(2 * np.pi * freq * r)
    if kind == 2:  # checkerboard
        u = xx * np.cos(theta) + yy * np.sin(theta)
        v = -xx * np.sin(theta) + yy * np.cos(theta)
        return ((np.floor(u * freq / 2) + np.floor(v * freq / 2)) % 2).astype(np.float64)
    return np.zeros_like(yy) + 0.5


def _shape_mask(rng, yy, xx):
    kind = rng.integers(3)
    cy, cx = rng.uniform(0.1, 0.9, 2)
    if kind == 0:
        r = rng.uniform(0.05, 0.3)
        return np.hypot(yy - cy, xx - cx) < r
    if kind == 1:
        hy, hx = rng.uniform(0.05, 0.3, 2)
        theta = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        return (np.abs(u) < hx) & (np.abs(v) < hy)
    pts = rng.uniform(0, 1, (3, 2))
    mask = np.ones_like(yy, dtype=bool)
    d1, d2 = pts[1] - pts[0], pts[2] - pts[0]
    sign = np.sign(d1[0] * d2[1] - d1[1] * d2[0]) or 1.0
    for a, b in ((0, 1), (1, 2), (2, 0)):
        e = pts[b] - pts[a]
        side = e[0] * (yy - pts[a][1]) - e[1] * (xx - pts[a][0])
        mask &= sign * side >= 0
    return mask


def make_image(rng: np.random.Generator, size: int = 96) -> np.ndarray:
    yy, xx = _grid(size)
    c0, c1 = rng.uniform(0, 1, (2, 3))
    theta = rng.uniform(0, 2 * np.pi)
    t = (xx * np.cos(theta) + yy * np.sin(theta))
    t = (t - t.min()) / (np.ptp(t) + 1e-9)
    img = c0[None, None] * (1 - t[..., None]) + c1[None, None] * t[..., None]
    for _ in range(rng.integers(4, 9)):
        mask = _shape_mask(rng, yy, xx)
        tex = _texture(rng, yy, xx)
        ca, cb = rng.uniform(0, 1, (2, 3))
        fill = ca[None, None] * (1 - tex[..., None]) + cb[None, None] * tex[..., None]
        img = np.where(mask[..., None], fill, img)
    s = SUPERSAMPLE
    img = img.reshape(size, s, size, s, 3).mean(axis=(1, 3))
    img += rng.normal(0, 0.004, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def write_toyset(out_dir, count: int = 32, val_count: int = 8, size: int = 96, seed: int = 0) -> dict:
    """Write ``train/`` and ``val/`` PNG folders; returns their paths."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    dirs = {"train": out / "train", "val": out / "val"}
    for split, n in (("train", count), ("val", val_count)):
        for i in range(n):
            save_png(make_image(rng, size), dirs[split] / f"{split}_{i:04d}.png")
    return dirs
