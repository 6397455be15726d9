"""Declarative pipeline configuration.

One YAML file describes an experiment. Unknown keys are rejected at every
level, and each stage hashes the config slices it depends on so that resumed
runs can detect drift.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from dipforge.model import ConfigError

DEFAULTS = {
    "seed": 0,
    "paths": {"hr_dir": None, "val_dir": None, "enh_dir": None, "work_dir": "work"},
    "model": {"scale": 4, "width": 16, "blocks": 4, "inner_width": None, "activation": "relu", "attention": True},
    "enhancer": {"width": 16, "blocks": 2, "steps": 2000, "lr": 1e-4, "halve_every": 100_000, "batch_size": 16,
                 "patch_size": 48, "strength": 1.0, "blur_sigma": 0.6},
    "teacher": {"width": 64, "blocks": 8, "anchor_taps": [2, 4, 6, 8], "steps": 5000, "lr": 1e-4,
                "halve_every": 100_000, "batch_size": 16, "patch_size": 48, "target": "enh"},
    "distill": {"lambdas": [1.0, 1.0, 1.0, 1.0], "steps": 5000, "lr": 1e-4, "halve_every": 100_000,
                "batch_size": 16, "patch_size": 48, "head_init_std": 1e-2},
    "finetune": {"patch_stages": [64, 128, 256, 384], "steps_per_stage": 1000, "lr": 2e-5, "halve_every": 20_000,
                 "batch_size": 16},
    "prune": {"rate": 0.05, "rounds": 3, "epsilon": 0.10, "criterion": "l2", "finetune_steps": 20_000, "lr": 2e-5,
              "halve_every": 20_000, "batch_size": 16, "patch_size": 384},
    "metrics": {"input_size": [256, 256], "reps": 20, "device": "cpu", "crop_border": 0, "plot": False,
                "save_images": True},
}

# config slices each stage depends on (upstream lineage covers the rest)
STAGE_SECTIONS = {
    "enhance": ("seed", "paths.hr_dir", "paths.enh_dir", "model.scale", "enhancer"),
    "teacher": ("seed", "model.scale", "teacher"),
    "distill": ("seed", "model", "distill"),
    "finetune": ("seed", "finetune", "paths.val_dir"),
    "reparam": (),
    "prune": ("seed", "prune", "paths.val_dir"),
    "eval": ("metrics", "paths.val_dir"),
    "bench": ("metrics",),
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def _nest(key: str, value) -> dict:
    out = value
    for part in reversed(key.split(".")):
        out = {part: out}
    return out


def load_config(path=None, overrides=(), seed=None) -> dict:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
    cfg = _merge(DEFAULTS, data)
    for item in overrides:
        key, value = parse_override(item)
        cfg = _merge(cfg, _nest(key, value))
    if seed is not None:
        cfg["seed"] = int(seed)
    if path is not None:
        base = Path(path).resolve().parent
        for k in ("hr_dir", "val_dir", "enh_dir", "work_dir"):
            v = cfg["paths"][k]
            if v is not None and not Path(v).is_absolute():
                cfg["paths"][k] = str(base / v)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    m = cfg["model"]
    if m["scale"] not in (2, 3, 4):
        raise ConfigError(f"model.scale must be 2, 3 or 4, got {m['scale']}")
    if len(cfg["distill"]["lambdas"]) != m["blocks"]:
        raise ConfigError("distill.lambdas needs one weight per student block")
    if len(cfg["teacher"]["anchor_taps"]) != m["blocks"]:
        raise ConfigError("teacher.anchor_taps needs one tap per student block")
    stages = cfg["finetune"]["patch_stages"]
    if any(b <= a for a, b in zip(stages, stages[1:])):
        raise ConfigError("finetune.patch_stages must be strictly increasing")
    if not 0 < cfg["prune"]["rate"] < 1:
        raise ConfigError("prune.rate must lie in (0, 1)")
    if cfg["teacher"]["target"] not in ("enh", "hr"):
        raise ConfigError("teacher.target must be 'enh' or 'hr'")


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _lookup(cfg: dict, dotted: str):
    cur = cfg
    for part in dotted.split("."):
        cur = cur[part]
    return cur


def stage_slice(cfg: dict, stage: str) -> dict:
    return {key: _lookup(cfg, key) for key in STAGE_SECTIONS[stage]}


def config_hash(cfg: dict) -> str:
    return canonical_hash(cfg)
