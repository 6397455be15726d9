"""Teacher training, multi-anchor feature distillation and progressive finetuning."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Sequence

import torch
from torch import nn

from dipforge.data import FULL_SCALE_PATCH_STAGES, SRDataset, clamp_patch_size
from dipforge.model import ConfigError, ModelConfig, SRNet, StudentModel, TeacherModel, build_student, build_teacher
from dipforge.training import TrainConfig, evaluate_psnr, fit, make_sampler, seed_everything

log = logging.getLogger(__name__)


def l1(a, b):
    return (a - b).abs().mean()


def l2sq(a, b):
    return ((a - b) ** 2).mean()


@dataclass
class LossReport:
    l_teacher: float = 0.0
    l_feat: float = 0.0
    l_out: float = 0.0
    l_dis: float = 0.0
    l_pl: float = 0.0
    total: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "total"}


class ProjectionHeads(nn.ModuleList):
    """One 1x1 conv per anchor lifting student features to teacher width.

    Training scaffolding only: discarded after distillation and never counted
    in efficiency metrics.
    """

    def __init__(self, student_channels: Sequence[int], teacher_channels: Sequence[int], init_std: float = 1e-2):
        if len(student_channels) != len(teacher_channels):
            raise ConfigError("student and teacher must expose the same number of anchors")
        super().__init__(nn.Conv2d(s, t, 1) for s, t in zip(student_channels, teacher_channels))
        for conv in self:
            nn.init.normal_(conv.weight, std=init_std)
            nn.init.zeros_(conv.bias)

    @classmethod
    def for_models(cls, student: SRNet, teacher: SRNet, init_std: float = 1e-2) -> "ProjectionHeads":
        s = [student.blocks[t - 1].conv3.out_channels for t in student.anchor_taps]
        t = [teacher.blocks[k - 1].conv3.out_channels for k in teacher.anchor_taps]
        return cls(s, t, init_std)


@dataclass
class DistillConfig:
    lambdas: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    anchor_pairs: Optional[list] = None  # (teacher tap, student block); defaults to pairing in order
    steps: int = 1000
    lr: float = 1e-4
    halve_every: int = 100_000
    batch_size: int = 16
    patch_size: int = 48
    seed: int = 0
    augment: bool = True
    head_init_std: float = 1e-2
    loss_mode: str = "distill"

    def validate(self, n_anchors: Optional[int] = None) -> "DistillConfig":
        if any(lam < 0 for lam in self.lambdas):
            raise ConfigError("anchor weights must be non-negative")
        if n_anchors is not None and len(self.lambdas) != n_anchors:
            raise ConfigError(f"{len(self.lambdas)} anchor weights for {n_anchors} anchors")
        if self.anchor_pairs is not None and len(self.anchor_pairs) != len(self.lambdas):
            raise ConfigError("anchor_pairs and lambdas must have equal length")
        if self.loss_mode not in ("distill", "finetune"):
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.steps, self.lr, self.halve_every, self.batch_size, self.patch_size, self.seed,
                           self.augment).validate()


def _freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def distill_loss(student: SRNet, teacher: SRNet, heads: ProjectionHeads, batch, lambdas: Sequence[float]) -> LossReport:
    """``L_dis = sum_i lambda_i |F_i^T - psi_i(F_i^S)|_1 + |T - S|_1 + |S - I_enh|_1``.

    The teacher runs without autograd so no gradient can reach it.
    """
    lr_img, enh = batch
    if len(lambdas) != len(heads):
        raise ConfigError(f"{len(lambdas)} anchor weights for {len(heads)} projection heads")
    with torch.no_grad():
        t_out, t_feats = teacher.forward_features(lr_img)
    s_out, s_feats = student.forward_features(lr_img)
    if not (len(t_feats) == len(s_feats) == len(heads)):
        raise ConfigError(f"anchor count mismatch: teacher {len(t_feats)}, student {len(s_feats)}, heads {len(heads)}")
    feat = s_out.new_zeros(())
    for lam, ft, fs, head in zip(lambdas, t_feats, s_feats, heads):
        if ft.shape[-2:] != fs.shape[-2:]:
            raise ConfigError(f"anchor spatial shapes differ: teacher {tuple(ft.shape)} vs student {tuple(fs.shape)}")
        if lam == 0:
            continue
        feat = feat + lam * l1(ft, head(fs))
    out = l1(t_out, s_out) + l1(s_out, enh)
    total = feat + out
    f, o = feat.item(), out.item()
    return LossReport(l_feat=f, l_out=o, l_dis=f + o, total=total)


def pl_loss(student: SRNet, batch) -> LossReport:
    lr_img, enh = batch
    loss = l2sq(student(lr_img), enh)
    return LossReport(l_pl=loss.item(), total=loss)


def teacher_loss(teacher: SRNet, batch) -> LossReport:
    lr_img, target = batch
    loss = l1(teacher(lr_img), target)
    return LossReport(l_teacher=loss.item(), total=loss)


def _require_enh(ds: SRDataset, target: str):
    if target == "enh" and ds.enh is None:
        raise ConfigError("dataset has no enhanced ground truth; run the enhance stage first")


def train_teacher(ds: SRDataset, model_config=None, cfg: Optional[TrainConfig] = None, target: str = "enh",
                  teacher: Optional[TeacherModel] = None):
    """Minimise ``|T(I_LR) - I_enh|_1`` with Adam; returns ``(teacher, trace)``."""
    cfg = (cfg or TrainConfig()).validate()
    _require_enh(ds, target)
    seed_everything(cfg.seed)
    if teacher is None:
        teacher = build_teacher(model_config, scale=ds.scale)
    sampler = make_sampler(ds, cfg.patch_size, cfg.seed, cfg.augment, target)

    def step(x, y):
        r = teacher_loss(teacher, (x, y))
        return r.total, r.as_row()

    trace = fit(teacher.parameters(), step, sampler, cfg.steps, cfg.lr, cfg.halve_every, cfg.batch_size,
                modules=(teacher,))
    teacher.eval()
    return teacher, trace


def train_supervised(ds: SRDataset, model: Optional[SRNet] = None, model_config=None,
                     cfg: Optional[TrainConfig] = None, target: str = "enh", loss: str = "l1"):
    """Plain end-to-end training with no teacher (the no-distillation baseline)."""
    cfg = (cfg or TrainConfig()).validate()
    _require_enh(ds, target)
    seed_everything(cfg.seed)
    if model is None:
        model = build_student(model_config, scale=ds.scale)
    sampler = make_sampler(ds, cfg.patch_size, cfg.seed, cfg.augment, target)
    crit = l1 if loss == "l1" else l2sq

    def step(x, y):
        value = crit(model(x), y)
        return value, {"loss": value.item()}

    trace = fit(model.parameters(), step, sampler, cfg.steps, cfg.lr, cfg.halve_every, cfg.batch_size,
                modules=(model,))
    model.eval()
    return model, trace


def distill_student(ds: SRDataset, teacher: TeacherModel, cfg: Optional[DistillConfig] = None,
                    student: Optional[StudentModel] = None, model_config=None):
    """Multi-anchor distillation; returns ``(student, trace)`` with heads discarded."""
    cfg = cfg or DistillConfig()
    _require_enh(ds, "enh")
    seed_everything(cfg.seed)
    if student is None:
        student = build_student(model_config, scale=ds.scale)
    if len(teacher.anchor_taps) != len(student.anchor_taps):
        raise ConfigError(f"teacher exposes {len(teacher.anchor_taps)} anchors, student has "
                          f"{len(student.anchor_taps)} blocks")
    cfg.validate(len(student.anchor_taps))
    _freeze(teacher)
    heads = ProjectionHeads.for_models(student, teacher, cfg.head_init_std)
    tc = cfg.train_config()
    sampler = make_sampler(ds, tc.patch_size, tc.seed, tc.augment, "enh")
    lambdas = list(cfg.lambdas)

    def step(x, y):
        r = distill_loss(student, teacher, heads, (x, y), lambdas)
        return r.total, r.as_row()

    params = list(student.parameters()) + list(heads.parameters())
    trace = fit(params, step, sampler, tc.steps, tc.lr, tc.halve_every, tc.batch_size, modules=(student, heads))
    student.eval()
    return student, trace


@dataclass
class TrainSchedule:
    patch_stages: list = field(default_factory=lambda: list(FULL_SCALE_PATCH_STAGES))
    steps_per_stage: int = 1000
    lr: float = 2e-5
    halve_every: int = 20_000
    batch_size: int = 16
    seed: int = 0
    augment: bool = True

    def validate(self) -> "TrainSchedule":
        s = list(self.patch_stages)
        if not s or any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigError(f"patch stages must be strictly increasing, got {s}")
        if self.steps_per_stage < 1 or min(s) < 1:
            raise ConfigError("stage sizes and steps must be positive")
        return self


def finetune_progressive(student: SRNet, ds: SRDataset, schedule: Optional[TrainSchedule] = None,
                         val: Optional[SRDataset] = None, on_stage: Optional[Callable] = None):
    """Finetune with ``|S(I_LR) - I_enh|_2^2`` while the patch size grows stage by stage.

    Returns ``(student, trace, stage_psnr)``; the input model is not modified.
    Sizes larger than the smallest LR image are clamped with a warning.
    """
    sched = (schedule or TrainSchedule()).validate()
    _require_enh(ds, "enh")
    seed_everything(sched.seed)
    model = copy.deepcopy(student)
    for p in model.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.parameters(), lr=sched.lr)
    trace, stage_psnr = [], []
    step = 0
    for k, size in enumerate(sched.patch_stages):
        patch = clamp_patch_size(size, ds)
        if on_stage is not None:
            on_stage(k, patch)
        sampler = make_sampler(ds, patch, sched.seed + 1000 * k, sched.augment, "enh")

        def loss_fn(x, y):
            r = pl_loss(model, (x, y))
            return r.total, r.as_row()

        fit(model.parameters(), loss_fn, sampler, sched.steps_per_stage, sched.lr, sched.halve_every,
            sched.batch_size, modules=(model,), trace=trace, step_offset=step, optimizer=opt,
            extra={"stage": k})
        step += sched.steps_per_stage
        if val is not None:
            stage_psnr.append({"stage": k, "patch_size": patch, "psnr": evaluate_psnr(model, val)})
    model.eval()
    return model, trace, stage_psnr


def teacher_fingerprint(teacher: nn.Module) -> bytes:
    return b"".join(t.detach().cpu().numpy().tobytes() for t in teacher.state_dict().values())


__all__ = [
    "DistillConfig", "LossReport", "ModelConfig", "ProjectionHeads", "TrainSchedule", "distill_loss",
    "distill_student", "finetune_progressive", "l1", "l2sq", "pl_loss", "teacher_fingerprint", "teacher_loss",
    "train_supervised", "train_teacher",
]
