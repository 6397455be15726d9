"""HR folder ingestion, bicubic degradation and augmented patch sampling.

Images live in memory as float32 ``H x W x 3`` arrays in ``[0, 1]``. Bicubic
resampling follows the MATLAB ``imresize`` convention used across the SR
literature: Keys cubic with ``a = -0.5``, symmetric boundary extension, and a
kernel widened by ``1/factor`` when downsampling (antialiasing).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

BICUBIC_A = -0.5
FULL_SCALE_PATCH_STAGES = (64, 128, 256, 384)


class IngestionError(RuntimeError):
    pass


class SamplingError(ValueError):
    pass


# --------------------------------------------------------------------- bicubic

def cubic(x, a: float = BICUBIC_A):
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0),
    )


def _resize_matrix(in_len: int, out_len: int, factor: float, antialias: bool = True) -> np.ndarray:
    """Dense ``out_len x in_len`` interpolation matrix for one axis."""
    if factor < 1 and antialias:
        width = 4.0 / factor
        kernel = lambda t: factor * cubic(factor * t)  # noqa: E731
    else:
        width = 4.0
        kernel = cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / factor + 0.5 * (1 - 1 / factor)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    # symmetric extension: ... 2 1 | 1 2 ... n | n n-1 ...
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    src = mirror[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    m = np.zeros((out_len, in_len))
    np.add.at(m, (np.repeat(np.arange(out_len), taps), src.ravel()), w.ravel())
    return m


def output_size(size: int, factor) -> int:
    return int(math.ceil(size * Fraction(factor).limit_denominator(10_000)))


def bicubic_resize(img: np.ndarray, factor, clamp: bool = True) -> np.ndarray:
    """Resize an ``H x W [x C]`` image by ``factor`` (``1/4`` downsamples by 4)."""
    if not factor > 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    h, w = img.shape[:2]
    oh, ow = output_size(h, factor), output_size(w, factor)
    if oh < 1 or ow < 1:
        raise ValueError(f"degenerate output size {oh}x{ow}")
    f = float(factor)
    mh = _resize_matrix(h, oh, f)
    mw = _resize_matrix(w, ow, f)
    x = img.astype(np.float64)
    out = np.einsum("oh,hw...->ow...", mh, x)
    out = np.einsum("pw,ow...->op...", mw, out)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float32)


# ------------------------------------------------------------------ image I/O

def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as e:  # PIL raises a zoo of types for broken files
        raise IngestionError(f"cannot decode image {path}: {e}") from e
    return arr.astype(np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)


# -------------------------------------------------------------------- dataset

@dataclass
class SRSample:
    lr: np.ndarray
    hr: np.ndarray
    scale: int
    id: str
    enh: Optional[np.ndarray] = None

    def __post_init__(self):
        lh, lw = self.lr.shape[:2]
        if self.hr.shape[:2] != (lh * self.scale, lw * self.scale):
            raise ValueError(f"{self.id}: hr {self.hr.shape[:2]} is not {self.scale}x lr {self.lr.shape[:2]}")
        if self.enh is not None and self.enh.shape != self.hr.shape:
            raise ValueError(f"{self.id}: enh shape {self.enh.shape} != hr shape {self.hr.shape}")
        for img in (self.lr, self.hr, self.enh):
            if img is not None and img.size and (img.min() < 0 or img.max() > 1):
                raise ValueError(f"{self.id}: pixel values outside [0, 1]")


@dataclass
class SRDataset:
    """Read-only collection of aligned images; share freely between samplers."""

    names: list
    hr: list
    lr: list
    scale: int
    enh: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i) -> SRSample:
        enh = self.enh[i] if self.enh is not None else None
        return SRSample(self.lr[i], self.hr[i], self.scale, self.names[i], enh)

    @property
    def min_lr_side(self) -> int:
        return min(min(x.shape[:2]) for x in self.lr)

    def with_enh(self, enh: list) -> "SRDataset":
        if len(enh) != len(self):
            raise ValueError("one enhanced image per sample required")
        for name, e, h in zip(self.names, enh, self.hr):
            if e.shape != h.shape:
                raise ValueError(f"{name}: enhanced image {e.shape} does not match hr {h.shape}")
        return replace(self, enh=list(enh))

    def subset(self, idx) -> "SRDataset":
        idx = list(idx)
        pick = lambda xs: None if xs is None else [xs[i] for i in idx]  # noqa: E731
        return replace(self, names=pick(self.names), hr=pick(self.hr), lr=pick(self.lr), enh=pick(self.enh))


def crop_to_multiple(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    return bicubic_resize(hr, Fraction(1, scale))


def ingest_dataset(hr_dir, scale: int, enh_dir=None, cache_dir=None) -> SRDataset:
    """Pair every PNG in ``hr_dir`` with its bicubic-downsampled LR image."""
    if scale not in (1, 2, 3, 4):
        raise ValueError(f"unsupported scale {scale}")
    hr_dir = Path(hr_dir)
    files = sorted(hr_dir.glob("*.png"))
    if not files:
        raise IngestionError(f"no PNG images found in {hr_dir}")
    names, hrs, lrs, enhs = [], [], [], []
    for f in files:
        hr = crop_to_multiple(load_png(f), scale)
        if min(hr.shape[:2]) < scale:
            raise IngestionError(f"image {f} is smaller than the scale factor")
        lr = degrade(hr, scale) if scale > 1 else hr.copy()
        names.append(f.name)
        hrs.append(hr)
        lrs.append(lr)
        if enh_dir is not None:
            ef = Path(enh_dir) / f.name
            if not ef.exists():
                raise IngestionError(f"missing enhanced image {ef}")
            enh = crop_to_multiple(load_png(ef), scale)
            if enh.shape != hr.shape:
                raise IngestionError(f"enhanced image {ef} has shape {enh.shape}, expected {hr.shape}")
            enhs.append(enh)
        if cache_dir is not None:
            save_png(lr, Path(cache_dir) / f.name)
    meta = {"bicubic_a": BICUBIC_A, "boundary": "symmetric", "antialias": True, "source": str(hr_dir)}
    return SRDataset(names, hrs, lrs, scale, enhs if enh_dir is not None else None, meta)


def load_dataset(hr_dir, scale: int, enh_dir=None) -> SRDataset:
    return ingest_dataset(hr_dir, scale, enh_dir)


# ------------------------------------------------------------- augmentation

def apply_symmetry(img: np.ndarray, rot: int, flip: bool) -> np.ndarray:
    """One of the 8 dihedral symmetries: optional horizontal flip, then ``rot`` quarter turns."""
    out = img[:, ::-1] if flip else img
    return np.rot90(out, k=rot % 4, axes=(0, 1))


def invert_symmetry(img: np.ndarray, rot: int, flip: bool) -> np.ndarray:
    out = np.rot90(img, k=-(rot % 4), axes=(0, 1))
    return out[:, ::-1] if flip else out


@dataclass
class PatchSpec:
    lr_patch_size: int
    augment_flip: bool = True
    augment_rot90: bool = True
    seed: int = 0


class PatchSampler:
    """Deterministic stream of augmented patches.

    The RNG is keyed by ``(seed, worker)`` so parallel loaders stay
    reproducible.
    """

    def __init__(self, ds: SRDataset, spec: PatchSpec, worker: int = 0, target: str = "enh"):
        self.ds = ds
        self.spec = spec
        self.rng = np.random.default_rng([spec.seed, worker])
        self.target = target

    def sample(self) -> SRSample:
        ds, spec = self.ds, self.spec
        p = spec.lr_patch_size
        i = int(self.rng.integers(len(ds)))
        lr, hr = ds.lr[i], ds.hr[i]
        h, w = lr.shape[:2]
        if p > h or p > w:
            raise SamplingError(f"patch size {p} exceeds LR image {ds.names[i]} ({h}x{w})")
        y = int(self.rng.integers(h - p + 1))
        x = int(self.rng.integers(w - p + 1))
        rot = int(self.rng.integers(4)) if spec.augment_rot90 else 0
        flip = bool(self.rng.integers(2)) if spec.augment_flip else False
        s = ds.scale
        crop = lambda img, k: apply_symmetry(img[y * k:(y + p) * k, x * k:(x + p) * k], rot, flip)  # noqa: E731
        enh = crop(ds.enh[i], s) if ds.enh is not None else None
        return SRSample(crop(lr, 1), crop(hr, s), s, f"{ds.names[i]}@{y},{x}/r{rot}f{int(flip)}", enh)

    def batch(self, n: int, target: Optional[str] = None):
        """``(lr, target)`` NCHW float tensors; ``target`` is ``"enh"`` or ``"hr"``."""
        target = target or self.target
        samples = [self.sample() for _ in range(n)]
        lr = np.stack([s.lr for s in samples])
        if target == "enh":
            if samples[0].enh is None:
                raise SamplingError("dataset has no enhanced ground truth")
            tg = np.stack([s.enh for s in samples])
        else:
            tg = np.stack([s.hr for s in samples])
        return to_tensor(lr), to_tensor(tg)


def sample_patch(ds: SRDataset, spec: PatchSpec, rng: Optional[np.random.Generator] = None) -> SRSample:
    sampler = PatchSampler(ds, spec)
    if rng is not None:
        sampler.rng = rng
    return sampler.sample()


def clamp_patch_size(size: int, ds: SRDataset) -> int:
    limit = ds.min_lr_side
    if size > limit:
        log.warning("patch size %d exceeds smallest LR image side %d; clamping", size, limit)
        return limit
    return size


def to_tensor(x: np.ndarray) -> torch.Tensor:
    """HWC / NHWC numpy -> CHW / NCHW float tensor."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    t = torch.from_numpy(x)
    return t.permute(2, 0, 1).contiguous() if t.dim() == 3 else t.permute(0, 3, 1, 2).contiguous()


def to_image(t: torch.Tensor) -> np.ndarray:
    """CHW / 1CHW tensor -> HWC float32 numpy."""
    t = t.detach().cpu()
    if t.dim() == 4:
        t = t[0]
    return t.permute(1, 2, 0).numpy().astype(np.float32)
