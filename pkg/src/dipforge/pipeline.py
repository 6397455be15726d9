"""Stage runners for the end-to-end pipeline.

Every stage writes into ``work_dir/<stage>/`` and finishes by writing a
``stage.json`` manifest that records the full config hash, the hash of the
config slice the stage depends on, the hashes of its upstream manifests and
the hashes of every artifact it produced. Those links form the lineage chain
checked by :func:`validate_lineage`.
"""
from __future__ import annotations

import contextlib
import fcntl
import json
import logging
import shutil
import time
from pathlib import Path
from typing import Optional

import torch

from dipforge import __version__
from dipforge.checkpoint import file_sha256, load_checkpoint, save_checkpoint
from dipforge.config import canonical_hash, config_hash, stage_slice
from dipforge.data import SRDataset, bicubic_resize, ingest_dataset, save_png
from dipforge.distill import DistillConfig, TrainSchedule, distill_student, finetune_progressive, train_teacher
from dipforge.enhance import EnhancerConfig, enhance_dataset, train_enhancer
from dipforge.metrics import MetricsReport, TABLE_COLUMNS, efficiency_report, ssim
from dipforge.model import build_model, build_student, reparameterize
from dipforge.prune import PruneConfig, prune_report, run_iterative_pruning
from dipforge.training import TrainConfig, bicubic_psnr, evaluate_psnr, super_resolve, write_trace

log = logging.getLogger(__name__)

STAGES = ("enhance", "teacher", "distill", "finetune", "reparam", "prune", "eval")
UPSTREAM = {
    "enhance": (),
    "teacher": ("enhance",),
    "distill": ("enhance", "teacher"),
    "finetune": ("enhance", "distill"),
    "reparam": ("finetune",),
    "prune": ("enhance", "reparam"),
    "eval": (),
    "bench": (),
}
# stages folded into the lineage whenever their output exists
OPTIONAL_UPSTREAM = {"eval": ("teacher", "distill", "finetune", "reparam", "prune")}
MODEL_STAGES = ("teacher", "distill", "finetune", "reparam", "prune")
STAGE_MANIFEST = "stage.json"


class StageError(RuntimeError):
    pass


class MissingPrerequisite(StageError):
    pass


class ConfigDrift(StageError):
    pass


class Pipeline:
    def __init__(self, cfg: dict, device: str = "cpu", force: bool = False, random_init: bool = False):
        self.cfg = cfg
        self.work = Path(cfg["paths"]["work_dir"])
        self.force = force
        self.random_init = random_init
        if device in ("gpu", "cuda"):
            if not torch.cuda.is_available():
                raise StageError("--device gpu requested but CUDA is not available")
            device = "cuda"
        self.device = torch.device(device)
        self._train = None
        self._val = None

    # ----------------------------------------------------------- bookkeeping
    def stage_dir(self, stage: str) -> Path:
        return self.work / stage

    def manifest_path(self, stage: str) -> Path:
        return self.stage_dir(stage) / STAGE_MANIFEST

    def read_stage(self, stage: str) -> Optional[dict]:
        p = self.manifest_path(stage)
        return json.loads(p.read_text()) if p.exists() else None

    def upstream_hashes(self, stage: str) -> dict:
        out = {}
        for up in UPSTREAM[stage]:
            p = self.manifest_path(up)
            if not p.exists():
                raise MissingPrerequisite(
                    f"stage '{stage}' needs the '{up}' stage; run `dipforge {up} --config ...` first"
                )
            out[up] = file_sha256(p)
        for up in OPTIONAL_UPSTREAM.get(stage, ()):
            p = self.manifest_path(up)
            if p.exists():
                out[up] = file_sha256(p)
        return out

    def stage_hash(self, stage: str) -> str:
        blob = {"slice": stage_slice(self.cfg, stage), "upstream": self.upstream_hashes(stage)}
        if stage == "eval":
            blob["random_init"] = self.random_init
        return canonical_hash(blob)

    def is_current(self, stage: str) -> bool:
        m = self.read_stage(stage)
        if m is None:
            return False
        want = self.stage_hash(stage)
        if m.get("stage_hash") != want:
            if self.force:
                log.warning("config for stage %s changed; re-running because --force was given", stage)
                return False
            raise ConfigDrift(
                f"stage '{stage}' in {self.stage_dir(stage)} was produced with a different config; "
                "pass --force to overwrite it"
            )
        return _artifacts_intact(self.stage_dir(stage), m)

    def finish(self, stage: str, artifacts: list, extra: Optional[dict] = None) -> dict:
        d = self.stage_dir(stage)
        manifest = {
            "stage": stage,
            "dipforge_version": __version__,
            "config_hash": config_hash(self.cfg),
            "stage_hash": self.stage_hash(stage),
            "upstream": self.upstream_hashes(stage),
            "artifacts": {str(Path(a).relative_to(d)): file_sha256(a) for a in sorted(map(str, artifacts))},
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        manifest.update(extra or {})
        self.manifest_path(stage).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest

    def fresh_dir(self, stage: str) -> Path:
        d = self.stage_dir(stage)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return d

    @contextlib.contextmanager
    def lock(self):
        self.work.mkdir(parents=True, exist_ok=True)
        with open(self.work / ".lock", "w") as fh:
            try:
                fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise StageError(f"another dipforge stage is running in {self.work}") from None
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    # ---------------------------------------------------------------- data
    @property
    def scale(self) -> int:
        return self.cfg["model"]["scale"]

    def raw_train(self) -> SRDataset:
        if self._train is None:
            hr_dir = self.cfg["paths"]["hr_dir"]
            if hr_dir is None:
                raise StageError("paths.hr_dir is not set")
            self._train = ingest_dataset(hr_dir, self.scale)
        return self._train

    def train_set(self) -> SRDataset:
        enh_dir = self.stage_dir("enhance") / "enh"
        return ingest_dataset(self.cfg["paths"]["hr_dir"], self.scale, enh_dir=enh_dir)

    def val_set(self) -> SRDataset:
        if self._val is None:
            vd = self.cfg["paths"]["val_dir"]
            if vd is None:
                log.warning("paths.val_dir not set; validating on the training images")
                self._val = self.raw_train()
            else:
                self._val = ingest_dataset(vd, self.scale)
        return self._val

    def seed(self, offset: int = 0) -> int:
        return int(self.cfg["seed"]) + offset

    def load_model(self, stage: str, name: str = "model"):
        model, manifest = load_checkpoint(self.stage_dir(stage) / name)
        return model.to(self.device), manifest

    # -------------------------------------------------------------- stages
    def run(self, stage: str) -> dict:
        if stage == "all":
            return {s: self.run(s) for s in STAGES}
        if stage == "bench":
            return self.bench()
        runner = getattr(self, f"_run_{stage}", None)
        if runner is None:
            raise StageError(f"unknown stage {stage!r}")
        with self.lock():
            self.upstream_hashes(stage)  # raises MissingPrerequisite naming the stage to run
            if self.is_current(stage):
                log.info("stage %s is up to date", stage)
                return self.read_stage(stage)
            log.info("running stage %s", stage)
            d = self.fresh_dir(stage)
            artifacts, extra = runner(d)
            return self.finish(stage, artifacts, extra)

    def _run_enhance(self, d: Path):
        c = self.cfg["enhancer"]
        ds = self.raw_train()
        if self.cfg["paths"]["enh_dir"]:
            src = Path(self.cfg["paths"]["enh_dir"])
            enh_ds = ingest_dataset(self.cfg["paths"]["hr_dir"], self.scale, enh_dir=src)
            for name, e in zip(enh_ds.names, enh_ds.enh):
                save_png(e, d / "enh" / name)
            return sorted((d / "enh").glob("*.png")), {"enh_source": str(src)}
        ecfg = EnhancerConfig(**c, seed=self.seed(11))
        model, trace = train_enhancer(ds, ecfg)
        enhance_dataset(ds, model, out_dir=d / "enh")
        save_checkpoint(model.net, d / "enhancer", role="enhancer")
        write_trace(trace, d / "loss.csv")
        arts = sorted((d / "enh").glob("*.png")) + [d / "enhancer" / "weights.safetensors", d / "loss.csv"]
        return arts, {"enhancer_hash": model.fingerprint(), "strength": model.strength}

    def _run_teacher(self, d: Path):
        c = dict(self.cfg["teacher"])
        arch = {k: c.pop(k) for k in ("width", "blocks", "anchor_taps")}
        target = c.pop("target")
        ds = self.train_set()
        teacher = build_model(dict(scale=self.scale, mode="fused", **arch), role="teacher").to(self.device)
        teacher, trace = train_teacher(ds, cfg=TrainConfig(**c, seed=self.seed(23)), target=target,
                                       teacher=teacher)
        save_checkpoint(teacher, d / "model", role="teacher")
        write_trace(trace, d / "loss.csv")
        return [d / "model" / "weights.safetensors", d / "loss.csv"], {"target": target}

    def _run_distill(self, d: Path):
        teacher, _ = self.load_model("teacher")
        c = self.cfg["distill"]
        arch = {k: v for k, v in self.cfg["model"].items()}
        student = build_student(arch).to(self.device)
        dcfg = DistillConfig(**c, seed=self.seed(31))
        student, trace = distill_student(self.train_set(), teacher, dcfg, student=student)
        save_checkpoint(student, d / "model")
        write_trace(trace, d / "loss.csv")
        return [d / "model" / "weights.safetensors", d / "loss.csv"], {}

    def _run_finetune(self, d: Path):
        student, _ = self.load_model("distill")
        sched = TrainSchedule(**self.cfg["finetune"], seed=self.seed(41))
        tuned, trace, stages = finetune_progressive(student, self.train_set(), sched, val=self.val_set())
        save_checkpoint(tuned, d / "model")
        write_trace(trace, d / "loss.csv")
        (d / "val_psnr.json").write_text(json.dumps(stages, indent=2))
        return [d / "model" / "weights.safetensors", d / "loss.csv", d / "val_psnr.json"], {}

    def _run_reparam(self, d: Path):
        student, _ = self.load_model("finetune")
        fused = reparameterize(student)
        save_checkpoint(fused, d / "model")
        return [d / "model" / "weights.safetensors"], {}

    def _run_prune(self, d: Path):
        fused, _ = self.load_model("reparam")
        pcfg = PruneConfig(**self.cfg["prune"], seed=self.seed(53))
        state = run_iterative_pruning(fused, self.train_set(), pcfg, self.val_set())
        save_checkpoint(state.model, d / "model")
        (d / "prune_report.json").write_text(json.dumps(prune_report(state), indent=2, default=float))
        return [d / "model" / "weights.safetensors", d / "prune_report.json"], {"iterations": state.iteration}

    def _run_eval(self, d: Path):
        models = self.available_models()
        rows = self.evaluate_models(models, with_quality=True)
        arts = self.write_reports(d, rows)
        if self.cfg["metrics"]["save_images"]:
            arts += self.save_sr_images(d, models)
        return arts, {"columns": list(TABLE_COLUMNS), "models": list(models)}

    def bench(self) -> dict:
        d = self.stage_dir("bench")
        d.mkdir(parents=True, exist_ok=True)
        rows = self.evaluate_models(self.available_models(), with_quality=False)
        arts = self.write_reports(d, rows)
        return {"stage": "bench", "artifacts": [str(a) for a in arts]}

    # ------------------------------------------------------------ reporting
    def available_models(self) -> dict:
        models = {}
        for stage in MODEL_STAGES:
            if self.manifest_path(stage).exists():
                models[stage] = self.load_model(stage)[0]
        if not models and not self.random_init:
            raise MissingPrerequisite(
                "no trained model found; run `dipforge reparam --config ...` (or `all`) first, "
                "or pass --random-init to evaluate an untrained student"
            )
        if self.random_init:
            torch.manual_seed(self.seed())
            models["random_init"] = build_student(dict(self.cfg["model"])).to(self.device).eval()
        return models

    def evaluate_models(self, models: dict, with_quality: bool = True) -> list:
        m = self.cfg["metrics"]
        hw = tuple(m["input_size"])
        rows = []
        val = self.val_set() if with_quality else None
        if with_quality:
            rows.append(self._bicubic_row(val))
        for name, model in models.items():
            eff = efficiency_report(model, hw, reps=m["reps"], device=str(self.device))
            q_psnr, q_ssim = float("nan"), float("nan")
            if with_quality:
                q_psnr = evaluate_psnr(model, val, crop_border=m["crop_border"])
                q_ssim = _mean_ssim(model, val, m["crop_border"])
            rows.append(MetricsReport(name=name, psnr_db=q_psnr, ssim=q_ssim, **eff).to_dict())
        return rows

    def _bicubic_row(self, val) -> dict:
        crop = self.cfg["metrics"]["crop_border"]
        vals = [ssim(bicubic_resize(lr, val.scale), hr, crop_border=crop) for lr, hr in zip(val.lr, val.hr)]
        return MetricsReport(name="bicubic", psnr_db=bicubic_psnr(val, crop), ssim=sum(vals) / len(vals),
                             params_m=0.0, gflops=0.0, activations_m=0.0, runtime_ms=0.0, memory_mb=0.0,
                             protocol={"note": "interpolation baseline; efficiency columns not applicable"}
                             ).to_dict()

    def write_reports(self, d: Path, rows: list) -> list:
        import csv

        report = d / "report.json"
        report.write_text(json.dumps({"rows": rows, "config_hash": config_hash(self.cfg)}, indent=2))
        table = d / "table.csv"
        with open(table, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["name", *TABLE_COLUMNS, "ssim"])
            for r in rows:
                w.writerow([r["name"], *(r[c] for c in TABLE_COLUMNS), r["ssim"]])
        arts = [report, table]
        m = self.cfg["metrics"]
        if m.get("plot"):
            arts.append(_scatter(rows, d / "efficiency.png"))
        return arts

    def save_sr_images(self, d: Path, models: dict) -> list:
        """Write SR outputs of the most advanced available model (pruned first)."""
        name = next(reversed(models))
        model, val = models[name], self.val_set()
        arts = []
        for img_name, lr in zip(val.names, val.lr):
            p = d / "sr" / img_name
            save_png(super_resolve(model, lr), p)
            arts.append(p)
        return arts


def _mean_ssim(model, val: SRDataset, crop: int) -> float:
    vals = []
    for lr, hr in zip(val.lr, val.hr):
        vals.append(ssim(super_resolve(model, lr), hr, crop_border=crop))
    return sum(vals) / len(vals)


def _scatter(rows: list, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = [r for r in rows if isinstance(r["psnr_db"], float) and r["runtime_ms"] > 0]
    fig, ax = plt.subplots(figsize=(5, 4))
    for r in pts:
        ax.scatter(r["runtime_ms"], r["psnr_db"], s=max(10.0, 400 * r["params_m"]))
        ax.annotate(r["name"], (r["runtime_ms"], r["psnr_db"]))
    ax.set_xlabel("runtime (ms)")
    ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _artifacts_intact(d: Path, manifest: dict) -> bool:
    for rel, digest in manifest.get("artifacts", {}).items():
        p = d / rel
        if not p.exists() or file_sha256(p) != digest:
            return False
    return True


def validate_lineage(work_dir) -> list:
    """Return a list of problems; empty means every manifest and link verifies."""
    work = Path(work_dir)
    problems = []
    for stage in STAGES:
        mp = work / stage / STAGE_MANIFEST
        if not mp.exists():
            continue
        m = json.loads(mp.read_text())
        if not _artifacts_intact(work / stage, m):
            problems.append(f"{stage}: artifact hash mismatch")
        for up, digest in m.get("upstream", {}).items():
            up_path = work / up / STAGE_MANIFEST
            if not up_path.exists():
                problems.append(f"{stage}: upstream {up} manifest missing")
            elif file_sha256(up_path) != digest:
                problems.append(f"{stage}: upstream {up} manifest changed since this stage ran")
    return problems
