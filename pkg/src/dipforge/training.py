"""Shared optimisation loop, learning-rate schedule, traces and evaluation."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from dipforge.data import PatchSampler, PatchSpec, SRDataset, bicubic_resize, clamp_patch_size, to_image, to_tensor
from dipforge.metrics import psnr

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Loss became non-finite; ``last_good`` holds the weights from the previous step."""

    def __init__(self, msg, step=None, last_good=None, diagnostics=None):
        super().__init__(msg)
        self.step = step
        self.last_good = last_good
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-4
    halve_every: int = 100_000
    batch_size: int = 16
    patch_size: int = 48  # LR pixels
    seed: int = 0
    augment: bool = True

    def validate(self) -> "TrainConfig":
        if self.steps < 0 or self.batch_size < 1 or self.patch_size < 1:
            raise ValueError(f"invalid training config {self}")
        if self.lr <= 0 or self.halve_every < 1:
            raise ValueError("learning rate and halving period must be positive")
        return self

    def to_dict(self):
        return asdict(self)


def lr_at(step: int, initial: float, halve_every: int) -> float:
    """Step-decay schedule: the rate halves every ``halve_every`` iterations."""
    return initial * 0.5 ** (step // halve_every)


def make_sampler(ds: SRDataset, patch: int, seed: int, augment: bool = True, target: str = "enh") -> PatchSampler:
    spec = PatchSpec(clamp_patch_size(patch, ds), augment_flip=augment, augment_rot90=augment, seed=seed)
    return PatchSampler(ds, spec, target=target)


def fit(
    params,
    loss_fn: Callable,
    sampler: PatchSampler,
    steps: int,
    lr: float,
    halve_every: int,
    batch_size: int,
    modules: tuple = (),
    trace: Optional[list] = None,
    step_offset: int = 0,
    extra: Optional[dict] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> list:
    """Run ``steps`` Adam updates of ``loss_fn(lr, target) -> (loss, parts)``.

    ``modules`` are snapshotted so a non-finite loss can roll back to the last
    good weights before :class:`TrainingError` is raised.
    """
    params = list(params)
    opt = optimizer or torch.optim.Adam(params, lr=lr)
    trace = [] if trace is None else trace
    extra = extra or {}
    for m in modules:
        m.train()
    good = None
    device = params[0].device if params else torch.device("cpu")
    for i in range(steps):
        step = step_offset + i
        rate = lr_at(step, lr, halve_every)
        for g in opt.param_groups:
            g["lr"] = rate
        x, y = sampler.batch(batch_size)
        x, y = x.to(device), y.to(device)
        loss, parts = loss_fn(x, y)
        if not torch.isfinite(loss):
            if good is not None:
                for m, state in zip(modules, good):
                    m.load_state_dict(state)
            raise TrainingError(
                f"non-finite loss at step {step}", step=step, last_good=good,
                diagnostics={"parts": parts, "lr": rate, "input_range": (float(x.min()), float(x.max()))},
            )
        if modules and (i % 50 == 0):
            good = [copy.deepcopy(m.state_dict()) for m in modules]
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        trace.append({"step": step, **parts, "lr": rate, "patch_size": sampler.spec.lr_patch_size, **extra})
    return trace


def write_trace(rows: list, path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def windowed_mean(rows: list, key: str, window: int, last: bool) -> float:
    vals = [r[key] for r in rows if key in r]
    if not vals:
        raise ValueError(f"no {key!r} values in trace")
    part = vals[-window:] if last else vals[:window]
    return float(np.mean(part))


@torch.no_grad()
def super_resolve(model: nn.Module, lr_img: np.ndarray) -> np.ndarray:
    model.eval()
    p = next(model.parameters())
    out = model(to_tensor(lr_img)[None].to(device=p.device, dtype=p.dtype))
    return np.clip(to_image(out), 0.0, 1.0)


def evaluate_psnr(model: nn.Module, ds: SRDataset, target: str = "hr", crop_border: int = 0) -> float:
    """Mean PSNR of ``model`` over whole images of ``ds``."""
    refs = ds.hr if target == "hr" else ds.enh
    vals = [psnr(super_resolve(model, lr), ref, crop_border) for lr, ref in zip(ds.lr, refs)]
    return float(np.mean(vals))


def bicubic_psnr(ds: SRDataset, crop_border: int = 0) -> float:
    vals = [psnr(bicubic_resize(lr, ds.scale), hr, crop_border) for lr, hr in zip(ds.lr, ds.hr)]
    return float(np.mean(vals))


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
