import json
import shutil
from pathlib import Path

import pytest
import yaml

from dipforge.cli import main
from dipforge.config import DEFAULTS, config_hash, load_config, parse_override, stage_slice
from dipforge.metrics import TABLE_COLUMNS
from dipforge.model import ConfigError
from dipforge.pipeline import STAGES, Pipeline, StageError, validate_lineage

FAST = {
    "model": {"scale": 4, "width": 8, "blocks": 4},
    "enhancer": {"width": 8, "blocks": 1, "steps": 20, "batch_size": 2, "patch_size": 16, "lr": 1e-3},
    "teacher": {"width": 8, "blocks": 4, "anchor_taps": [1, 2, 3, 4], "steps": 20, "batch_size": 2,
                "patch_size": 8, "lr": 1e-3},
    "distill": {"steps": 20, "batch_size": 2, "patch_size": 8, "lr": 1e-3},
    "finetune": {"patch_stages": [8, 12], "steps_per_stage": 5, "batch_size": 2, "lr": 1e-4},
    "prune": {"rate": 0.2, "rounds": 1, "finetune_steps": 5, "batch_size": 2, "patch_size": 12, "epsilon": 100.0,
              "lr": 1e-5},
    "metrics": {"input_size": [32, 32], "reps": 2, "plot": True},
}


def write_config(path: Path, dirs, work, **extra):
    data = json.loads(json.dumps(FAST))
    data["paths"] = {"hr_dir": str(dirs["train"]), "val_dir": str(dirs["val"]), "work_dir": str(work)}
    for k, v in extra.items():
        data.setdefault(k, {}).update(v)
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture(scope="module")
def finished_run(tiny_dirs, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "run.yaml", tiny_dirs, root / "work")
    assert main(["all", "--config", str(cfg)]) == 0
    return cfg, root / "work"


# ------------------------------------------------------------------ config

def test_defaults_validate():
    load_config()
    assert DEFAULTS["finetune"]["patch_stages"] == [64, 128, 256, 384]
    assert DEFAULTS["prune"]["rate"] == 0.05 and DEFAULTS["prune"]["rounds"] == 3


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("model: {width: 8, depth: 3}\n")
    with pytest.raises(ConfigError, match="model.depth"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(overrides=["nonsense.key=1"])


def test_overrides_and_seed(tmp_path):
    cfg = load_config(overrides=["prune.rate=0.1", "distill.lambdas=[0,0,0,1]"], seed=7)
    assert cfg["prune"]["rate"] == 0.1 and cfg["distill"]["lambdas"] == [0, 0, 0, 1] and cfg["seed"] == 7
    assert parse_override("a.b=hello") == ("a.b", "hello")
    with pytest.raises(ConfigError):
        parse_override("no-equals")


def test_relative_paths_resolve_against_config(tmp_path):
    p = tmp_path / "sub" / "c.yaml"
    p.parent.mkdir()
    p.write_text("paths: {hr_dir: data, work_dir: out}\n")
    cfg = load_config(p)
    assert cfg["paths"]["hr_dir"] == str(tmp_path / "sub" / "data")


@pytest.mark.parametrize("override", ["model.scale=5", "distill.lambdas=[1,1]", "prune.rate=1.5",
                                      "finetune.patch_stages=[64,32]", "teacher.target=lr"])
def test_invalid_values(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_stage_slices_isolate_hashes():
    a = load_config()
    b = load_config(overrides=["prune.rate=0.1"])
    assert config_hash(a) != config_hash(b)
    assert stage_slice(a, "teacher") == stage_slice(b, "teacher")
    assert stage_slice(a, "prune") != stage_slice(b, "prune")


def test_shipped_configs_load():
    root = Path(__file__).resolve().parents[1] / "configs"
    for name in ("toy.yaml", "full.yaml"):
        load_config(root / name)


# --------------------------------------------------------------------- cli

def test_all_produces_every_stage(finished_run):
    cfg, work = finished_run
    for stage in STAGES:
        m = json.loads((work / stage / "stage.json").read_text())
        assert m["stage"] == stage and len(m["config_hash"]) == 64
    assert validate_lineage(work) == []
    report = json.loads((work / "eval" / "report.json").read_text())
    names = [r["name"] for r in report["rows"]]
    assert names == ["bicubic", "teacher", "distill", "finetune", "reparam", "prune"]
    assert all(set(TABLE_COLUMNS) <= set(r) for r in report["rows"])
    header = (work / "eval" / "table.csv").read_text().splitlines()[0].split(",")
    assert set(TABLE_COLUMNS) <= set(header)
    assert (work / "eval" / "efficiency.png").exists() and list((work / "eval" / "sr").glob("*.png"))
    for stage in ("enhance", "teacher", "distill", "finetune"):
        assert (work / stage / "loss.csv").stat().st_size > 0
    assert (work / "prune" / "prune_report.json").exists()


def test_reparam_preserves_psnr(finished_run):
    _, work = finished_run
    rows = {r["name"]: r for r in json.loads((work / "eval" / "report.json").read_text())["rows"]}
    assert abs(rows["reparam"]["psnr_db"] - rows["finetune"]["psnr_db"]) < 1e-3
    assert rows["reparam"]["params_m"] < rows["finetune"]["params_m"]
    assert rows["prune"]["params_m"] < rows["reparam"]["params_m"]


def test_rerun_is_idempotent(finished_run, capsys):
    cfg, work = finished_run
    before = (work / "teacher" / "stage.json").read_text()
    assert main(["teacher", "--config", str(cfg)]) == 0
    assert (work / "teacher" / "stage.json").read_text() == before


def test_drift_refused_unless_forced(finished_run, tmp_path, capsys):
    cfg, work = finished_run
    copy = tmp_path / "work"
    shutil.copytree(work, copy)
    args = ["prune", "--config", str(cfg), "--override", f"paths.work_dir={copy}", "--override", "prune.rate=0.3"]
    assert main(args) == 2
    assert "--force" in capsys.readouterr().err
    assert main(args + ["--force"]) == 0
    assert json.loads((copy / "prune" / "stage.json").read_text())["stage_hash"] != \
        json.loads((work / "prune" / "stage.json").read_text())["stage_hash"]
    # the old eval now points at a replaced prune manifest
    assert any("eval" in p for p in validate_lineage(copy))


def test_deleting_later_stage_keeps_earlier_valid(finished_run, tmp_path):
    _, work = finished_run
    copy = tmp_path / "work"
    shutil.copytree(work, copy)
    shutil.rmtree(copy / "eval")
    shutil.rmtree(copy / "prune")
    assert validate_lineage(copy) == []


def test_tampered_artifact_detected(finished_run, tmp_path, capsys):
    _, work = finished_run
    copy = tmp_path / "work"
    shutil.copytree(work, copy)
    with open(copy / "distill" / "loss.csv", "a") as f:
        f.write("junk\n")
    assert main(["verify", str(copy)]) == 1
    assert "distill" in capsys.readouterr().err


def test_missing_prerequisite_names_stage(tiny_dirs, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", tiny_dirs, tmp_path / "w")
    assert main(["distill", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "'enhance'" in err and "dipforge enhance" in err


def test_eval_random_init_below_bicubic(tiny_dirs, tmp_path):
    cfg = write_config(tmp_path / "c.yaml", tiny_dirs, tmp_path / "w", metrics={"plot": False})
    assert main(["eval", "--config", str(cfg), "--random-init"]) == 0
    rows = {r["name"]: r for r in json.loads((tmp_path / "w" / "eval" / "report.json").read_text())["rows"]}
    assert rows["random_init"]["psnr_db"] < rows["bicubic"]["psnr_db"]


def test_eval_without_models_is_actionable(tiny_dirs, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", tiny_dirs, tmp_path / "w")
    assert main(["eval", "--config", str(cfg)]) == 2
    assert "--random-init" in capsys.readouterr().err


def test_lock_excludes_concurrent_stage(tiny_dirs, tmp_path):
    cfg = load_config(write_config(tmp_path / "c.yaml", tiny_dirs, tmp_path / "w"))
    a, b = Pipeline(cfg), Pipeline(cfg)
    with a.lock():
        with pytest.raises(StageError, match="another"):
            with b.lock():
                pass


def test_gpu_request_without_cuda(tiny_dirs, tmp_path, capsys):
    import torch

    if torch.cuda.is_available():
        pytest.skip("CUDA present")
    cfg = write_config(tmp_path / "c.yaml", tiny_dirs, tmp_path / "w")
    assert main(["enhance", "--config", str(cfg), "--device", "gpu"]) == 2
    assert "CUDA" in capsys.readouterr().err


def test_toyset_command(tmp_path, capsys):
    assert main(["toyset", str(tmp_path / "t"), "--count", "2", "--val-count", "1", "--size", "32"]) == 0
    assert len(list((tmp_path / "t" / "train").glob("*.png"))) == 2
