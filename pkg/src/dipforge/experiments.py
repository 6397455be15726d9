"""Desk-scale ablation harness on the procedural toy set.

Runs the directional comparisons behind the acceptance suite: enhanced vs
original targets, distillation anchor ablation, the pruning recursion and
iterative vs one-stage pruning. Every run is seeded; conditions that share a
seed share their initialisation and patch stream.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from dipforge.data import SRDataset, ingest_dataset
from dipforge.distill import DistillConfig, TrainSchedule, distill_student, finetune_progressive, train_supervised, train_teacher
from dipforge.enhance import EnhancerConfig, enhance_dataset, train_enhancer
from dipforge.model import reparameterize
from dipforge.prune import PruneConfig, one_stage_prune, run_iterative_pruning
from dipforge.toyset import write_toyset
from dipforge.training import TrainConfig, bicubic_psnr, evaluate_psnr

log = logging.getLogger(__name__)

DEEP_ONLY = [0.0, 0.0, 0.0, 1.0]
DEEP_AND_SHALLOW = [1.0, 1.0, 1.0, 1.0]


@dataclass
class ToyProtocol:
    scale: int = 4
    width: int = 16
    blocks: int = 4
    image_size: int = 96
    train_images: int = 32
    val_images: int = 8
    data_seed: int = 0
    seeds: tuple = (0, 1, 2)
    batch_size: int = 8
    patch_size: int = 16
    student_steps: int = 3000
    student_lr: float = 1e-3
    teacher_width: int = 32
    teacher_blocks: int = 8
    teacher_taps: list = field(default_factory=lambda: [2, 4, 6, 8])
    teacher_steps: int = 4000
    teacher_lr: float = 1e-3
    enhancer: dict = field(default_factory=lambda: dict(width=16, blocks=2, steps=1500, lr=1e-3, batch_size=8,
                                                        patch_size=32, halve_every=750))
    finetune_stages: list = field(default_factory=lambda: [16, 24])
    finetune_steps: int = 300
    finetune_lr: float = 1e-4
    prune_steps: int = 1600
    prune_lr: float = 1e-4
    prune_patch: int = 24

    def train_cfg(self, seed: int, steps: Optional[int] = None, lr: Optional[float] = None) -> TrainConfig:
        steps = steps or self.student_steps
        return TrainConfig(steps=steps, lr=lr or self.student_lr, halve_every=max(1, steps // 2),
                           batch_size=self.batch_size, patch_size=self.patch_size, seed=seed)

    def distill_cfg(self, seed: int, lambdas) -> DistillConfig:
        t = self.train_cfg(seed)
        return DistillConfig(lambdas=list(lambdas), steps=t.steps, lr=t.lr, halve_every=t.halve_every,
                             batch_size=t.batch_size, patch_size=t.patch_size, seed=seed)

    def prune_cfg(self, seed: int) -> PruneConfig:
        return PruneConfig(rate=0.05, rounds=3, epsilon=0.10, finetune_steps=self.prune_steps, lr=self.prune_lr,
                           halve_every=max(1, self.prune_steps // 2), batch_size=self.batch_size,
                           patch_size=self.prune_patch, seed=seed)

    def student_config(self) -> dict:
        return dict(scale=self.scale, width=self.width, blocks=self.blocks)


class ToyBench:
    """Lazily computed, memoised toy experiments."""

    def __init__(self, root, protocol: Optional[ToyProtocol] = None):
        self.root = Path(root)
        self.p = protocol or ToyProtocol()
        self._cache = {}
        self.timings = {}

    def _memo(self, key, fn):
        if key not in self._cache:
            t0 = time.perf_counter()
            self._cache[key] = fn()
            self.timings[key] = time.perf_counter() - t0
            log.info("%s done in %.1fs", key, self.timings[key])
        return self._cache[key]

    # data ---------------------------------------------------------------
    @property
    def raw(self):
        def build():
            dirs = write_toyset(self.root / "toy", self.p.train_images, self.p.val_images, self.p.image_size,
                                self.p.data_seed)
            return ingest_dataset(dirs["train"], self.p.scale), ingest_dataset(dirs["val"], self.p.scale)
        return self._memo("data", build)

    @property
    def val(self) -> SRDataset:
        return self.raw[1]

    @property
    def enhancer(self):
        return self._memo("enhancer", lambda: train_enhancer(self.raw[0], EnhancerConfig(**self.p.enhancer))[0])

    @property
    def train(self) -> SRDataset:
        return self._memo("train_enh", lambda: enhance_dataset(self.raw[0], self.enhancer))

    @property
    def bicubic(self) -> float:
        return self._memo("bicubic", lambda: bicubic_psnr(self.val))

    @property
    def teacher(self):
        def build():
            cfg = dict(width=self.p.teacher_width, blocks=self.p.teacher_blocks, anchor_taps=self.p.teacher_taps)
            t, _ = train_teacher(self.train, cfg, self.p.train_cfg(100, self.p.teacher_steps, self.p.teacher_lr))
            return t
        return self._memo("teacher", build)

    # students -----------------------------------------------------------
    def plain_student(self, seed: int, target: str):
        def build():
            m, _ = train_supervised(self.train, model_config=self.p.student_config(), cfg=self.p.train_cfg(seed),
                                    target=target)
            return m
        return self._memo(("plain", target, seed), build)

    def distilled_student(self, seed: int, lambdas):
        def build():
            m, _ = distill_student(self.train, self.teacher, self.p.distill_cfg(seed, lambdas),
                                   model_config=self.p.student_config())
            return m
        return self._memo(("distill", tuple(lambdas), seed), build)

    def score(self, model) -> float:
        return evaluate_psnr(model, self.val)

    def scores(self, key, make) -> list:
        return self._memo(("score", key), lambda: [self.score(make(s)) for s in self.p.seeds])

    # pruning ------------------------------------------------------------
    @property
    def prune_base(self):
        def build():
            student = self.distilled_student(self.p.seeds[0], DEEP_AND_SHALLOW)
            sched = TrainSchedule(patch_stages=self.p.finetune_stages, steps_per_stage=self.p.finetune_steps,
                                  lr=self.p.finetune_lr, halve_every=10 ** 9, batch_size=self.p.batch_size, seed=7)
            tuned, _, _ = finetune_progressive(student, self.train, sched, val=self.val)
            return reparameterize(tuned)
        return self._memo("prune_base", build)

    def iterative(self, seed: int):
        return self._memo(("iterative", seed),
                          lambda: run_iterative_pruning(self.prune_base, self.train, self.p.prune_cfg(seed), self.val))

    def one_stage(self, seed: int):
        return self._memo(("one_stage", seed),
                          lambda: one_stage_prune(self.prune_base, self.train, cfg=self.p.prune_cfg(seed),
                                                  val=self.val, match_rounds=3))


def run_all(root, protocol: Optional[ToyProtocol] = None) -> dict:
    """Run every toy ablation and return a JSON-ready summary."""
    bench = ToyBench(root, protocol)
    seeds = bench.p.seeds
    out = {"bicubic": bench.bicubic, "teacher": bench.score(bench.teacher)}
    out["enh"] = bench.scores("enh", lambda s: bench.plain_student(s, "enh"))
    out["ori"] = bench.scores("ori", lambda s: bench.plain_student(s, "hr"))
    out["deep"] = bench.scores("deep", lambda s: bench.distilled_student(s, DEEP_ONLY))
    out["full"] = bench.scores("full", lambda s: bench.distilled_student(s, DEEP_AND_SHALLOW))
    out["iterative"] = [bench.iterative(s).history for s in seeds]
    out["one_stage"] = [bench.one_stage(s).history for s in seeds]
    out["timings"] = {str(k): v for k, v in bench.timings.items()}
    return out


if __name__ == "__main__":
    import sys

    logging.basicConfig(level=logging.INFO)
    res = run_all(sys.argv[1] if len(sys.argv) > 1 else "toy_bench")
    print(json.dumps(res, indent=1, default=float))
    for k in ("enh", "ori", "deep", "full"):
        print(k, np.mean(res[k]))
