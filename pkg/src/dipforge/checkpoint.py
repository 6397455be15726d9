"""Named-tensor checkpoints with a JSON manifest.

A checkpoint is a directory holding ``weights.safetensors`` (flat map of
``blocks.{i}.conv{j}.{branch}.{weight|bias}``-style names to arrays) and
``manifest.json`` (schema version, architecture, mode, prune masks, lineage).
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from dipforge.model import ModelConfig, SRNet, build_model

SCHEMA_VERSION = 1
WEIGHTS = "weights.safetensors"
MANIFEST = "manifest.json"


class CheckpointError(RuntimeError):
    pass


class SchemaVersionError(CheckpointError):
    pass


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(model: SRNet, path, role: str = "student", extra: Optional[dict] = None) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    save_file(state, str(path / WEIGHTS))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "role": role,
        "model": model.config.to_dict(),
        "scale": model.scale,
        "width": model.config.width,
        "blocks": len(model.blocks),
        "mode": model.mode,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "prune_masks": getattr(model, "prune_masks", None),
        "tensors": {k: list(v.shape) for k, v in state.items()},
        "weights_sha256": file_sha256(path / WEIGHTS),
    }
    manifest.update(extra or {})
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(path) -> dict:
    f = Path(path) / MANIFEST
    if not f.exists():
        raise CheckpointError(f"no manifest at {f}")
    manifest = json.loads(f.read_text())
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"checkpoint {path} has schema version {version}; this build reads version {SCHEMA_VERSION}. "
            "Re-export it with a matching dipforge release or migrate the manifest."
        )
    return manifest


def load_checkpoint(path, verify_hash: bool = True):
    """Return ``(model, manifest)``; nothing is returned unless every tensor loads."""
    from dipforge.prune import apply_masks

    path = Path(path)
    manifest = read_manifest(path)
    wfile = path / WEIGHTS
    if verify_hash and file_sha256(wfile) != manifest.get("weights_sha256"):
        raise CheckpointError(f"weights file {wfile} does not match the manifest hash")
    try:
        state = load_file(str(wfile))
    except (SafetensorError, OSError, ValueError) as e:
        raise CheckpointError(f"cannot read tensors from {wfile}: {e}") from e
    model = build_model(ModelConfig(**manifest["model"]), role="teacher" if manifest["role"] == "teacher" else "student")
    dtype = getattr(torch, manifest.get("dtype", "float32"))
    model = model.to(dtype)
    if manifest.get("prune_masks"):
        model = apply_masks(model, manifest["prune_masks"])
    expected = {k: list(v.shape) for k, v in model.state_dict().items()}
    got = {k: list(v.shape) for k, v in state.items()}
    if expected != got:
        missing = sorted(set(expected) ^ set(got)) or [k for k in expected if expected[k] != got.get(k)]
        raise CheckpointError(f"tensor layout mismatch in {wfile}: {missing[:5]}")
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, manifest
