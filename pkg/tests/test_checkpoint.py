import json

import pytest
import torch

from dipforge.checkpoint import (
    SCHEMA_VERSION, CheckpointError, SchemaVersionError, load_checkpoint, read_manifest, save_checkpoint,
)
from dipforge.model import build_student, build_teacher, reparameterize
from dipforge.prune import prune_once


def same_outputs(a, b):
    dtype = next(a.parameters()).dtype
    x = torch.rand(2, 3, 7, 9, generator=torch.Generator().manual_seed(0), dtype=dtype)
    with torch.no_grad():
        return a.eval()(x).numpy().tobytes() == b.eval()(x).numpy().tobytes()


@pytest.mark.parametrize("kind", ["train", "fused", "pruned", "teacher", "double"])
def test_roundtrip_is_bit_identical(tmp_path, kind):
    torch.manual_seed(1)
    if kind == "teacher":
        m, role = build_teacher(width=8, blocks=4, anchor_taps=[1, 2, 3, 4], scale=3), "teacher"
    else:
        m, role = build_student(width=8, blocks=2, scale=2), "student"
        if kind == "double":
            m = m.double()
        if kind in ("fused", "pruned"):
            m = reparameterize(m)
        if kind == "pruned":
            m = prune_once(prune_once(m, 0.2), 0.2)
    save_checkpoint(m, tmp_path / "ck", role=role)
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert same_outputs(m, loaded)
    for (ka, va), (kb, vb) in zip(m.state_dict().items(), loaded.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    assert manifest["schema_version"] == SCHEMA_VERSION and manifest["mode"] == m.mode
    assert manifest["scale"] == m.scale and manifest["blocks"] == len(m.blocks)
    if kind == "pruned":
        assert manifest["prune_masks"] == m.prune_masks and loaded.prune_masks == m.prune_masks


def test_tensor_names(tmp_path):
    save_checkpoint(build_student(width=4, blocks=1), tmp_path / "ck")
    names = read_manifest(tmp_path / "ck")["tensors"]
    assert "blocks.0.conv2.seq_3x3.weight" in names and "upsampler.bias" in names


def test_loaded_fused_checkpoint_can_be_pruned(tmp_path):
    save_checkpoint(reparameterize(build_student(width=8, blocks=1)), tmp_path / "ck")
    m, _ = load_checkpoint(tmp_path / "ck")
    p = prune_once(m, 0.05)
    assert p(torch.rand(1, 3, 5, 5)).shape == (1, 3, 20, 20)


def test_truncated_tensor_data_fails_cleanly(tmp_path):
    save_checkpoint(build_student(width=4, blocks=1), tmp_path / "ck")
    f = tmp_path / "ck" / "weights.safetensors"
    f.write_bytes(f.read_bytes()[:-64])
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck", verify_hash=False)


def test_flipped_byte_detected(tmp_path):
    save_checkpoint(build_student(width=4, blocks=1), tmp_path / "ck")
    f = tmp_path / "ck" / "weights.safetensors"
    data = bytearray(f.read_bytes())
    data[-5] ^= 0xFF
    f.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_layout_mismatch(tmp_path):
    save_checkpoint(build_student(width=4, blocks=1), tmp_path / "ck")
    mf = tmp_path / "ck" / "manifest.json"
    m = json.loads(mf.read_text())
    m["model"]["width"] = 6
    mf.write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="layout"):
        load_checkpoint(tmp_path / "ck")


def test_schema_version_mismatch(tmp_path):
    save_checkpoint(build_student(width=4, blocks=1), tmp_path / "ck")
    mf = tmp_path / "ck" / "manifest.json"
    m = json.loads(mf.read_text())
    m["schema_version"] = SCHEMA_VERSION + 1
    mf.write_text(json.dumps(m))
    with pytest.raises(SchemaVersionError, match="migrate"):
        load_checkpoint(tmp_path / "ck")


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
