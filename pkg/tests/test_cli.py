from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from loracl.arithmetic import compute_task_vector
from loracl.checkpoint import load_checkpoint, save_checkpoint
from loracl.cli import git_blob_hash, main
from loracl.model import ViTConfig, init_model

SMALL_DATA = ["--classes", "4", "--image-size", "8", "--train-per-class", "6", "--test-per-class", "4",
              "--pretrain-per-class", "6", "--noise", "30"]
SMALL_MODEL = ["--patch-size", "4", "--dim", "8", "--depth", "1", "--heads", "2", "--lora-rank", "2"]
FAST = ["--epochs", "1", "--batch-size", "8"]


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth-data", "--out", root / "data", *SMALL_DATA) == 0
    assert run("pretrain", "--data", root / "data", "--out", root / "pre", *SMALL_MODEL, *FAST) == 0
    return root


def test_synth_data_default_sizes(tmp_path):
    assert run("synth-data", "--out", tmp_path / "d") == 0
    summary = json.loads((tmp_path / "d" / "summary.json").read_text())
    assert summary == {"sizes": {"pretrain": 480, "train": 480, "test": 800}, "shape": [3, 16, 16]}


def test_synth_data_is_deterministic(tmp_path):
    run("synth-data", "--out", tmp_path / "a", "--seed", "3", *SMALL_DATA)
    run("synth-data", "--out", tmp_path / "b", "--seed", "3", *SMALL_DATA)
    for split in ("pretrain", "train", "test"):
        assert git_blob_hash(tmp_path / "a" / f"{split}.lcds") == git_blob_hash(tmp_path / "b" / f"{split}.lcds")


def test_synth_data_rejects_one_class(tmp_path, capsys):
    assert run("synth-data", "--out", tmp_path / "d", "--classes", "1") == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("synth-data", "--out", tmp_path, "--colour", "red")
    assert exc.value.code == 2


def test_env_var_sets_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv("LORACL_OUT_DIR", str(tmp_path / "runs"))
    assert run("synth-data", *SMALL_DATA) == 0
    assert (tmp_path / "runs" / "synth-data" / "manifest.json").exists()


def test_manifest_contents(pipeline):
    man = json.loads((pipeline / "pre" / "manifest.json").read_text())
    assert man["command"] == "pretrain"
    assert set(man["outputs"]) == {"theta_pre.ckpt", "pretrain_report.json"}
    assert all(len(h) == 40 for h in man["inputs"].values())
    assert man["config"]["dim"] == 8 and man["seeds"]["seed"] == 0


def test_config_file_and_flag_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"classes": 3, "noise": 5.0, "image_size": 8}))
    assert run("synth-data", "--config", tmp_path / "c.json", "--classes", "5", "--out", tmp_path / "d") == 0
    cfg = json.loads((tmp_path / "d" / "manifest.json").read_text())["config"]
    assert cfg["classes"] == 5 and cfg["noise"] == 5.0


def test_config_file_unknown_key(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"colour": "red"}))
    assert run("synth-data", "--config", tmp_path / "c.json", "--out", tmp_path / "d") == 2


def test_pretrain_output_is_store(pipeline):
    assert load_checkpoint(pipeline / "pre" / "theta_pre.ckpt", "store").config.dim == 8
    report = json.loads((pipeline / "pre" / "pretrain_report.json").read_text())
    assert report["holdout_n"] + report["train_n"] == 24


def test_pretrain_rejects_zero_epochs(pipeline, tmp_path):
    assert run("pretrain", "--data", pipeline / "data", "--out", tmp_path, "--epochs", "0") == 2


def test_missing_input_is_runtime_error(tmp_path, capsys):
    assert run("pretrain", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 1
    assert "nope" in capsys.readouterr().err


def test_train_task_emit_vector_and_kl_echo(pipeline, tmp_path):
    assert run("train-task", "--pre", pipeline / "pre" / "theta_pre.ckpt", "--data", pipeline / "data",
               "--tasks", "2", "--task-id", "1", "--kl", "--emit-vector", "--out", tmp_path, *FAST) == 0
    pre = load_checkpoint(pipeline / "pre" / "theta_pre.ckpt")
    theta = load_checkpoint(tmp_path / "theta_task1.ckpt")
    tau = load_checkpoint(tmp_path / "tau_task1.ckpt", "task-vector")
    assert tau.equals(compute_task_vector(theta, pre))
    cfg = json.loads((tmp_path / "manifest.json").read_text())["config"]
    assert cfg["kl"] is True and (cfg["cls_weight"], cfg["kl_weight"]) == (0.6, 0.4)


def test_train_task_unknown_id(pipeline, tmp_path):
    assert run("train-task", "--pre", pipeline / "pre" / "theta_pre.ckpt", "--data", pipeline / "data",
               "--tasks", "2", "--task-id", "7", "--out", tmp_path, *FAST) == 1


def test_train_task_with_plan_file(pipeline, tmp_path):
    (tmp_path / "plan.txt").write_text("task 0: class_0, class_3\ntask 1: class_1, class_2\n")
    assert run("train-task", "--pre", pipeline / "pre" / "theta_pre.ckpt", "--data", pipeline / "data",
               "--plan", tmp_path / "plan.txt", "--task-id", "0", "--out", tmp_path / "o", *FAST) == 0


def test_merge_single_input_lambda_one(pipeline, tmp_path):
    pre = pipeline / "pre" / "theta_pre.ckpt"
    run("train-task", "--pre", pre, "--data", pipeline / "data", "--tasks", "2", "--task-id", "0",
        "--out", tmp_path / "t", *FAST)
    assert run("merge", "--pre", pre, tmp_path / "t" / "theta_task0.ckpt", "--lambda", "1", "--out", tmp_path / "m") == 0
    assert git_blob_hash(tmp_path / "m" / "theta_final.ckpt") == git_blob_hash(tmp_path / "t" / "theta_task0.ckpt")
    man = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert man["config"]["lam"] == 1.0


def test_merge_default_lambda(pipeline, tmp_path):
    pre = pipeline / "pre" / "theta_pre.ckpt"
    assert run("merge", "--pre", pre, pre, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["config"]["lam"] == 0.25


def test_merge_mixed_schemas_names_files(pipeline, tmp_path, capsys):
    other = ViTConfig(image_size=8, patch_size=4, dim=8, depth=2, heads=2, num_classes=4, lora_rank=2)
    save_checkpoint(tmp_path / "deep.ckpt", init_model(other, 0))
    assert run("merge", "--pre", pipeline / "pre" / "theta_pre.ckpt", tmp_path / "deep.ckpt", "--out", tmp_path / "m") == 1
    assert "deep.ckpt" in capsys.readouterr().err


def test_memft_report_and_rejection(pipeline, tmp_path):
    pre = pipeline / "pre" / "theta_pre.ckpt"
    assert run("memft", "--model", pre, "--data", pipeline / "data", "--per-class", "0", "--out", tmp_path / "x") == 2
    assert run("memft", "--model", pre, "--data", pipeline / "data", "--per-class", "3", "--out", tmp_path / "m", *FAST) == 0
    mem = json.loads((tmp_path / "m" / "memory.json").read_text())
    assert mem["size"] == 12 and mem["counts"] == {"0": 3, "1": 3, "2": 3, "3": 3}
    assert json.loads((tmp_path / "m" / "manifest.json").read_text())["config"]["per_class"] == 3


def test_memft_default_per_class(pipeline, tmp_path):
    assert run("memft", "--model", pipeline / "pre" / "theta_pre.ckpt", "--data", pipeline / "data",
               "--out", tmp_path, *FAST) == 0
    mem = json.loads((tmp_path / "memory.json").read_text())
    assert mem["per_class"] == 10 and mem["clamped_classes"] == [0, 1, 2, 3]


def test_eval_csv_and_json(pipeline, tmp_path):
    assert run("eval", "--model", pipeline / "pre" / "theta_pre.ckpt", "--data", pipeline / "data",
               "--tasks", "2", "--out", tmp_path) == 0
    rows = list(csv.reader((tmp_path / "eval.csv").open()))
    assert rows[0] == ["task_id", "accuracy", "n"] and [r[0] for r in rows[1:]] == ["0", "1", "all"]
    body = json.loads((tmp_path / "eval.json").read_text())
    assert body["overall_n"] == 16 and body["chance_accuracy"] == 0.25
    assert float(rows[-1][1]) == pytest.approx(body["overall_accuracy"], abs=1e-6)


def test_eval_without_plan_is_overall_only(pipeline, tmp_path):
    assert run("eval", "--model", pipeline / "pre" / "theta_pre.ckpt", "--data", pipeline / "data", "--out", tmp_path) == 0
    rows = list(csv.reader((tmp_path / "eval.csv").open()))
    assert [r[0] for r in rows[1:]] == ["all"]


def test_eval_random_model_near_chance(tmp_path):
    run("synth-data", "--out", tmp_path / "d", "--test-per-class", "60")
    save_checkpoint(tmp_path / "rand.ckpt", init_model(ViTConfig(), 5))
    assert run("eval", "--model", tmp_path / "rand.ckpt", "--data", tmp_path / "d", "--out", tmp_path / "e") == 0
    body = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert abs(body["overall_accuracy"] - body["chance_accuracy"]) < 0.1


def test_bench_unknown_method(tmp_path):
    assert run("bench", "--method", "agem", "--out", tmp_path) == 2


def test_commands_do_not_touch_inputs(pipeline, tmp_path):
    files = sorted((pipeline / "data").glob("*.lcds")) + [pipeline / "pre" / "theta_pre.ckpt"]
    before = {f: git_blob_hash(f) for f in files}
    run("memft", "--model", pipeline / "pre" / "theta_pre.ckpt", "--data", pipeline / "data", "--out", tmp_path, *FAST)
    assert before == {f: git_blob_hash(f) for f in files}


def test_git_blob_hash_matches_git(tmp_path):
    (tmp_path / "f").write_bytes(b"hello\n")
    # `git hash-object` of "hello\n"
    assert git_blob_hash(tmp_path / "f") == "ce013625030ba8dba906f756967f9e9ca394464a"


@pytest.mark.parametrize("method", ["ours_xent", "replay"])
def test_bench_and_rerun(pipeline, tmp_path, method, capsys):
    out = tmp_path / method
    args = ["bench", "--method", method, "--data", pipeline / "data", "--pre", pipeline / "pre" / "theta_pre.ckpt",
            "--tasks", "2", "--per-class", "2", "--replay-memory", "8", "--memft-epochs", "1", "--out", out, *FAST]
    assert run(*args) == 0
    flops = json.loads((out / "flops.json").read_text())
    stages = [s["stage"] for s in json.loads((out / "eval.json").read_text())["stages"]]
    if method == "ours_xent":
        assert flops["reference"] == "replay" and flops["reduction_factor"] > 1
        assert stages == ["task_0", "task_1", "merge_through_task_0", "tarv", "tarv+memft"]
    else:
        assert stages == ["after_task_0", "after_task_1"]
    assert run("rerun", out / "manifest.json") == 0
    assert "outputs identical" in capsys.readouterr().out


def test_rerun_detects_changed_input(pipeline, tmp_path):
    data = tmp_path / "data"
    run("synth-data", "--out", data, *SMALL_DATA)
    run("eval", "--model", pipeline / "pre" / "theta_pre.ckpt", "--data", data, "--out", tmp_path / "e")
    (data / "test.lcds").unlink()
    run("synth-data", "--out", data, *SMALL_DATA, "--seed", "9")
    assert run("rerun", tmp_path / "e" / "manifest.json") == 1


def test_pretrain_default_holdout_accuracy(tmp_path):
    # pinned reference run: default synthetic data and pretraining, seed 0
    assert run("synth-data", "--out", tmp_path / "d") == 0
    assert run("pretrain", "--data", tmp_path / "d", "--seed", "0", "--out", tmp_path / "p") == 0
    report = json.loads((tmp_path / "p" / "pretrain_report.json").read_text())
    assert report["holdout_n"] == 96 and report["holdout_accuracy"] >= 0.9
