import json

import pytest
import yaml

from mmdistill.cli import main
from mmdistill.config import build_config
from mmdistill.data import Dataset
from mmdistill.model import TransformerLM, save_checkpoint

TINY = {
    "model": {"teacher": {"num_layers": 2, "hidden_dim": 16, "num_heads": 2},
              "student": {"num_layers": 1, "hidden_dim": 8, "num_heads": 2}},
    "data": {"train_size": 16, "eval_size": 8, "pretrain_size": 8},
    "train": {"teacher": {"batch_size": 8}, "pretrain": {"batch_size": 8}, "finetune": {"batch_size": 8}},
    "distill": {"logit_loss": "forward_kl"},
    "ablation": {"seeds": [0], "rows": [{"name": "forward_kl", "distill": {"logit_loss": "forward_kl"}}]},
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def run(*args):
    return main([str(a) for a in args])


def test_gen_data(tmp_path, cfg_path, capsys):
    assert run("gen-data", "--config", cfg_path, "--out", tmp_path / "d", "--seed", 3) == 0
    train = Dataset.load(tmp_path / "d" / "train.jsonl")
    assert len(train) == 16 and len(Dataset.load(tmp_path / "d" / "eval.jsonl")) == 8
    assert "train: 16 conversations" in capsys.readouterr().out


def test_full_pipeline(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert run("gen-data", "--config", cfg_path, "--out", out) == 0
    assert run("train", "--role", "teacher", "--config", cfg_path, "--out", out / "t",
               "--data", out / "train.jsonl") == 0
    teacher = out / "t" / "teacher.npz"
    assert teacher.exists() and (out / "t" / "teacher.runlog.jsonl").exists()
    assert run("pretrain", "--config", cfg_path, "--out", out / "s1", "--data", out / "pretrain.jsonl") == 0
    stage1 = out / "s1" / "stage1.npz"
    assert run("distill", "--config", cfg_path, "--out", out / "s2", "--teacher", teacher, "--init", stage1,
               "--steps", 1) == 0
    assert run("distill", "--config", cfg_path, "--out", out / "s2b", "--teacher", teacher,
               "--resume", out / "s2" / "distill.npz") == 0
    records = [json.loads(line) for line in (out / "s2b" / "distill.runlog.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records if r["kind"] == "step"] == [1, 2]
    assert all(set(r["components"]) == {"ce", "logit"} for r in records if r["kind"] == "step")
    capsys.readouterr()
    assert run("eval", out / "s2b" / "distill.npz", "--config", cfg_path, "--out", out / "ev",
               "--data", out / "eval.jsonl", "--teacher", teacher) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n"] == 8 and report["agreement"] is not None


def test_ablate(tmp_path, cfg_path, capsys):
    assert run("ablate", "--config", cfg_path, "--out", tmp_path / "a") == 0
    text = capsys.readouterr().out
    assert "| config" in text and "forward_kl" in text and "baseline" in text
    assert (tmp_path / "a" / "ablation.md").exists() and (tmp_path / "a" / "ablation.jsonl").exists()


def test_gradcheck(capsys):
    assert run("gradcheck") == 0
    assert "FAIL" not in capsys.readouterr().out


def test_show_config(cfg_path, capsys):
    assert run("show-config", "--config", cfg_path) == 0
    shown = yaml.safe_load(capsys.readouterr().out)
    assert shown["model"]["student"]["hidden_dim"] == 8


def test_config_errors_exit_with_code_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("distill:\n  temprature: 0.5\n")
    assert run("show-config", "--config", bad) == 2
    assert "temprature" in capsys.readouterr().err
    assert run("show-config", "--config", tmp_path / "missing.yaml") == 2


def test_distill_needs_teacher(tmp_path, cfg_path):
    assert run("distill", "--config", cfg_path, "--out", tmp_path) == 1


def test_resume_needs_a_finetune_trainer_checkpoint(tmp_path, cfg_path):
    out = tmp_path / "s1"
    assert run("pretrain", "--config", cfg_path, "--out", out) == 0
    assert run("train", "--config", cfg_path, "--out", tmp_path, "--resume", out / "stage1.npz") == 2
    bare = save_checkpoint(tmp_path / "bare.npz", TransformerLM(build_config(TINY).model.student))
    assert run("train", "--config", cfg_path, "--out", tmp_path, "--resume", bare) == 2


def test_missing_checkpoint_is_an_io_error(tmp_path, cfg_path):
    assert run("eval", tmp_path / "nope.npz", "--config", cfg_path, "--out", tmp_path) == 9
