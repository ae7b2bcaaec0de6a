"""Command-line pipeline: synthetic data, pretraining, per-task LoRA training,
task-vector merging, memory fine-tuning, evaluation and full benchmarks.

Every command writes into an output directory (``--out``; default
``$LORACL_OUT_DIR/<command>``, or ``runs/<command>``) and finishes with a
``manifest.json`` listing the resolved config, seeds, and content hashes of
all inputs and outputs. ``loracl rerun manifest.json`` re-executes a run
from its manifest and compares hashes.

Settings resolve as: command-line flag > ``--config`` JSON file > built-in
default. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .arithmetic import MergeConfig, TaskVector, apply, check_compatible, compute_task_vector, scale_and_sum
from .checkpoint import load_checkpoint, save_checkpoint, scan_checkpoint
from .data import SPLITS, SyntheticSpec, exclusive_write, generate_pools, load_dataset, save_dataset
from .flops import protocol_flops
from .harness import (
    DESK_PRETRAIN,
    METHODS,
    ProtocolConfig,
    SplitPlan,
    TrainConfig,
    build_memory,
    derive_seed,
    evaluate,
    make_split,
    memory_finetune,
    parse_split_plan,
    pretrain,
    run_protocol,
    train_task,
)
from .losses import LossWeights
from .model import ViTConfig

log = logging.getLogger("loracl")

OUT_ENV = "LORACL_OUT_DIR"
MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- defaults

_SPEC = SyntheticSpec()
_VIT = ViTConfig()
_PROTO = ProtocolConfig()

MODEL_DEFAULTS = {
    "patch_size": _VIT.patch_size,
    "dim": _VIT.dim,
    "depth": _VIT.depth,
    "heads": _VIT.heads,
    "mlp_ratio": _VIT.mlp_ratio,
    "lora_rank": _VIT.lora_rank,
    "lora_alpha": _VIT.lora_alpha,
}


def _train_defaults(cfg: TrainConfig, prefix: str = "") -> dict:
    return {
        prefix + "lr": cfg.learning_rate,
        prefix + "weight_decay": cfg.weight_decay,
        prefix + "batch_size": cfg.batch_size,
        prefix + "epochs": cfg.epochs,
    }


DEFAULTS: dict[str, dict] = {
    "synth-data": {
        "classes": _SPEC.num_classes,
        "image_size": _SPEC.image_size,
        "channels": _SPEC.channels,
        "noise": _SPEC.noise_std,
        "train_per_class": _SPEC.train_per_class,
        "test_per_class": _SPEC.test_per_class,
        "pretrain_per_class": _SPEC.pretrain_per_class,
        "seed": 0,
    },
    "pretrain": {
        "data": None,
        "holdout": 0.2,
        "seed": 0,
        **MODEL_DEFAULTS,
        **_train_defaults(DESK_PRETRAIN),
    },
    "train-task": {
        "pre": None,
        "data": None,
        "plan": None,
        "tasks": 4,
        "task_id": None,
        "kl": False,
        "cls_weight": LossWeights().cls,
        "kl_weight": LossWeights().kl,
        "emit_vector": False,
        "seed": 0,
        **_train_defaults(_PROTO.task),
    },
    "merge": {"pre": None, "inputs": None, "lam": MergeConfig().lam},
    "memft": {
        "model": None,
        "data": None,
        "per_class": _PROTO.per_class,
        "lora_only": False,
        "seed": 0,
        **_train_defaults(_PROTO.memft),
    },
    "eval": {"model": None, "data": None, "plan": None, "tasks": None},
    "bench": {
        "method": "ours_xent",
        "data": None,
        "pre": None,
        "plan": None,
        "tasks": 4,
        "workers": None,
        "seed": 0,
        "lam": MergeConfig().lam,
        "per_class": _PROTO.per_class,
        "replay_memory": _PROTO.replay_memory,
        "cls_weight": LossWeights().cls,
        "kl_weight": LossWeights().kl,
        "holdout": 0.2,
        **MODEL_DEFAULTS,
        **_train_defaults(_PROTO.task),
        **_train_defaults(_PROTO.memft, "memft_"),
        **_train_defaults(DESK_PRETRAIN, "pretrain_"),
    },
}

# settings that name input files (hashed into the manifest)
INPUT_KEYS = ("data", "pre", "model", "plan", "inputs")


# ---------------------------------------------------------------- hashing / manifest


def git_blob_hash(path: Path) -> str:
    """Content hash as ``git hash-object`` computes it."""
    raw = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def _input_files(cfg: dict) -> list[Path]:
    files = []
    for key in INPUT_KEYS:
        val = cfg.get(key)
        if val is None:
            continue
        for p in val if isinstance(val, list) else [val]:
            p = Path(p)
            files += sorted(p.glob("*.lcds")) if p.is_dir() else [p]
    return files


def write_manifest(out: Path, command: str, cfg: dict, seeds: dict, outputs: list[Path]) -> Path:
    inputs = {str(p): git_blob_hash(p) for p in _input_files(cfg)}
    outs = {p.relative_to(out).as_posix(): git_blob_hash(p) for p in sorted(outputs)}
    ident = json.dumps({"command": command, "config": cfg, "inputs": inputs}, sort_keys=True)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "run_id": hashlib.sha256(ident.encode()).hexdigest()[:16],
        "command": command,
        "config": cfg,
        "seeds": seeds,
        "inputs": inputs,
        "out_dir": str(out),
        "outputs": outs,
    }
    path = out / MANIFEST
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_text(path: Path, text: str) -> None:
    if path.exists():
        path.unlink()
    with exclusive_write(path) as tmp:
        tmp.write_text(text)


def _write_json(path: Path, obj) -> Path:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, rows) -> Path:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    _write_text(path, buf.getvalue())
    return path


def _save_ckpt(path: Path, obj, meta=None) -> Path:
    if path.exists():
        path.unlink()
    save_checkpoint(path, obj, meta)
    return path


# ---------------------------------------------------------------- shared helpers


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, [])]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _positive(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg[k] is not None and cfg[k] < 1:
            raise UsageError(f"--{k.replace('_', '-')} must be >= 1, got {cfg[k]}")


def _train_cfg(cfg: dict, prefix: str = "", seed: int | None = None, weights: LossWeights | None = None) -> TrainConfig:
    _positive(cfg, prefix + "epochs", prefix + "batch_size")
    try:
        return TrainConfig(
            learning_rate=float(cfg[prefix + "lr"]),
            weight_decay=float(cfg[prefix + "weight_decay"]),
            batch_size=int(cfg[prefix + "batch_size"]),
            epochs=int(cfg[prefix + "epochs"]),
            loss_weights=weights or LossWeights(),
            seed=int(cfg["seed"] if seed is None else seed),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _weights(cfg: dict) -> LossWeights:
    try:
        return LossWeights(float(cfg["cls_weight"]), float(cfg["kl_weight"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _model_cfg(cfg: dict, ds) -> ViTConfig:
    c, s = ds.images.shape[1], ds.images.shape[2]
    try:
        return ViTConfig(
            image_size=s,
            patch_size=int(cfg["patch_size"]),
            channels=c,
            dim=int(cfg["dim"]),
            depth=int(cfg["depth"]),
            heads=int(cfg["heads"]),
            mlp_ratio=float(cfg["mlp_ratio"]),
            num_classes=ds.num_classes,
            lora_rank=int(cfg["lora_rank"]),
            lora_alpha=float(cfg["lora_alpha"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _dataset(path, split: str):
    """Load a dataset file, or ``<split>.lcds`` inside a synth-data directory."""
    p = Path(path)
    return load_dataset(p / f"{split}.lcds" if p.is_dir() else p)


def _plan(cfg: dict, ds, required: bool = True) -> SplitPlan | None:
    if cfg.get("plan"):
        return parse_split_plan(Path(cfg["plan"]).read_text(), ds.num_classes, ds.class_names)
    if cfg.get("tasks") is None:
        if required:
            raise UsageError("give --plan or --tasks")
        return None
    _positive(cfg, "tasks")
    if cfg["tasks"] > ds.num_classes:
        raise UsageError(f"--tasks {cfg['tasks']} exceeds the {ds.num_classes} classes in the data")
    return SplitPlan.round_robin(ds.num_classes, int(cfg["tasks"]))


def _holdout_split(ds, fraction: float, seed: int):
    if not 0 <= fraction < 1:
        raise UsageError(f"--holdout must be in [0, 1), got {fraction}")
    order = np.random.default_rng(derive_seed(seed, 21)).permutation(len(ds))
    cut = len(ds) - int(round(fraction * len(ds)))
    return ds.subset(np.sort(order[:cut])), ds.subset(np.sort(order[cut:]))


def _pretrain(cfg: dict, ds, prefix: str = ""):
    config = _model_cfg(cfg, ds)
    tcfg = _train_cfg(cfg, prefix)
    fit_set, held = _holdout_split(ds, float(cfg["holdout"]), tcfg.seed)
    theta_pre, trained = pretrain(config, fit_set, tcfg)
    report = {
        "train_n": len(fit_set),
        "holdout_n": len(held),
        "holdout_accuracy": evaluate(trained, held).overall_accuracy if len(held) else None,
        "train_accuracy": evaluate(trained, fit_set).overall_accuracy,
    }
    return theta_pre, report


# ---------------------------------------------------------------- commands


def cmd_synth_data(cfg: dict, out: Path) -> tuple[list[Path], dict]:
    try:
        spec = SyntheticSpec(
            num_classes=int(cfg["classes"]),
            image_size=int(cfg["image_size"]),
            channels=int(cfg["channels"]),
            noise_std=float(cfg["noise"]),
            seed=int(cfg["seed"]),
            train_per_class=int(cfg["train_per_class"]),
            test_per_class=int(cfg["test_per_class"]),
            pretrain_per_class=int(cfg["pretrain_per_class"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    files, sizes = [], {}
    for split, ds in generate_pools(spec).items():
        path = out / f"{split}.lcds"
        if path.exists():
            path.unlink()
        save_dataset(path, ds)
        files.append(path)
        sizes[split] = len(ds)
    files.append(_write_json(out / "summary.json", {"sizes": sizes, "shape": [spec.channels, spec.image_size, spec.image_size]}))
    print(f"synth-data: {sizes} -> {out}")
    return files, {"seed": spec.seed}


def cmd_pretrain(cfg: dict, out: Path) -> tuple[list[Path], dict]:
    _require(cfg, "data")
    ds = _dataset(cfg["data"], "pretrain")
    theta_pre, report = _pretrain(cfg, ds)
    files = [_save_ckpt(out / "theta_pre.ckpt", theta_pre), _write_json(out / "pretrain_report.json", report)]
    print(f"pretrain: holdout accuracy {report['holdout_accuracy']}")
    return files, {"seed": cfg["seed"], "init": derive_seed(cfg["seed"], 0), "head": derive_seed(cfg["seed"], 3)}


def cmd_train_task(cfg: dict, out: Path) -> tuple[list[Path], dict]:
    _require(cfg, "pre", "data", "task_id")
    theta_pre = load_checkpoint(cfg["pre"], expect_kind="store")
    ds = _dataset(cfg["data"], "train")
    plan = _plan(cfg, ds)
    tid = int(cfg["task_id"])
    task = plan.task(tid)
    idx = make_split(ds.labels, plan)[plan.tasks.index(task)]
    tcfg = _train_cfg(cfg, weights=_weights(cfg))
    model = train_task(theta_pre, ds.subset(idx), tcfg, bool(cfg["kl"]), tid)
    files = [_save_ckpt(out / f"theta_task{tid}.ckpt", model)]
    if cfg["emit_vector"]:
        files.append(_save_ckpt(out / f"tau_task{tid}.ckpt", compute_task_vector(model, theta_pre, tid)))
    print(f"train-task: task {tid} ({len(idx)} samples, classes {list(task.classes)}) -> {files[0]}")
    return files, {"seed": cfg["seed"], "adapters": derive_seed(cfg["seed"], tid, 1), "batches": derive_seed(cfg["seed"], tid, 2)}


def cmd_merge(cfg: dict, out: Path) -> tuple[list[Path], dict]:
    _require(cfg, "pre", "inputs")
    theta_pre = load_checkpoint(cfg["pre"], expect_kind="store")
    paths = [str(p) for p in cfg["inputs"]]
    headers = [scan_checkpoint(p) for p in paths]
    bad = [p for p, h in zip(paths, headers) if h.kind not in ("store", "task-vector")]
    if bad:
        raise UsageError(f"merge inputs must be stores or task vectors: {bad}")
    loaded = [load_checkpoint(p) for p in paths]
    check_compatible(theta_pre, *loaded, labels=[str(cfg["pre"])] + paths)
    vectors = []
    for i, obj in enumerate(loaded):
        if isinstance(obj, TaskVector):
            vectors.append(obj)
        else:
            vectors.append(compute_task_vector(obj, theta_pre, headers[i].meta.get("task_id", i)))
    try:
        merge = MergeConfig(float(cfg["lam"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if merge.lam == 1.0 and len(loaded) == 1 and not isinstance(loaded[0], TaskVector):
        # pre + (theta_i - pre) can miss theta_i by an ulp where a weight changed sign
        final = loaded[0]
    else:
        final = apply(theta_pre, scale_and_sum(vectors, merge))
    # no metadata: a merge that reproduces an input store yields the same file
    path = _save_ckpt(out / "theta_final.ckpt", final)
    print(f"merge: {len(vectors)} vector(s), lambda={merge.lam} -> {path}")
    return [path], {}


def cmd_memft(cfg: dict, out: Path) -> tuple[list[Path], dict]:
    _require(cfg, "model", "data")
    _positive(cfg, "per_class")
    theta = load_checkpoint(cfg["model"], expect_kind="store")
    ds = _dataset(cfg["data"], "train")
    mem = build_memory(ds, int(cfg["per_class"]), derive_seed(cfg["seed"], 12))
    tcfg = _train_cfg(cfg, seed=derive_seed(cfg["seed"], 13))
    final = memory_finetune(theta, mem, tcfg, lora_only=bool(cfg["lora_only"]))
    report = {
        "per_class": mem.per_class,
        "size": len(mem),
        "counts": {str(k): v for k, v in mem.counts.items()},
        "clamped_classes": mem.clamped,
        "indices": mem.indices.tolist(),
    }
    files = [_save_ckpt(out / "theta_memft.ckpt", final), _write_json(out / "memory.json", report)]
    print(f"memft: {len(mem)} memory samples ({mem.per_class}/class) -> {files[0]}")
    return files, {"seed": cfg["seed"], "memory": derive_seed(cfg["seed"], 12), "batches": tcfg.seed}


def _report_files(out: Path, report, extra: dict | None = None) -> list[Path]:
    body = report.to_dict()
    body.update(extra or {})
    return [_write_csv(out / "eval.csv", report.csv_rows()), _write_json(out / "eval.json", body)]


def cmd_eval(cfg: dict, out: Path) -> tuple[list[Path], dict]:
    _require(cfg, "model", "data")
    theta = load_checkpoint(cfg["model"], expect_kind="store")
    ds = _dataset(cfg["data"], "test")
    plan = _plan(cfg, ds, required=False)
    report = evaluate(theta, ds, plan)
    files = _report_files(out, report, {"chance_accuracy": 1.0 / ds.num_classes})
    print(f"eval: overall accuracy {report.overall_accuracy:.4f} on {report.overall_n} samples")
    return files, {}


def cmd_bench(cfg: dict, out: Path) -> tuple[list[Path], dict]:
    method = cfg["method"]
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    seed = int(cfg["seed"])
    if cfg.get("data"):
        pools = {s: _dataset(cfg["data"], s) for s in SPLITS if s != "pretrain" or not cfg.get("pre")}
    else:
        pools = generate_pools(replace(SyntheticSpec(), seed=seed))
    train, test = pools["train"], pools["test"]
    plan = _plan(cfg, train)
    files: list[Path] = []
    if cfg.get("pre"):
        theta_pre = load_checkpoint(cfg["pre"], expect_kind="store")
    else:
        theta_pre, pre_report = _pretrain(cfg, pools["pretrain"], "pretrain_")
        files.append(_save_ckpt(out / "theta_pre.ckpt", theta_pre))
        files.append(_write_json(out / "pretrain_report.json", pre_report))
    weights = _weights(cfg)
    try:
        pcfg = ProtocolConfig(
            task=_train_cfg(cfg, weights=weights),
            memft=_train_cfg(cfg, "memft_"),
            merge=MergeConfig(float(cfg["lam"])),
            per_class=int(cfg["per_class"]),
            replay_memory=int(cfg["replay_memory"]),
            seed=seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    workers = int(cfg["workers"] or len(plan.tasks))
    ckpt_dir = out / "checkpoints"
    for stale in ckpt_dir.glob("*.ckpt") if ckpt_dir.exists() else []:
        stale.unlink()
    result = run_protocol(theta_pre, train, test, plan, pcfg, method, ckpt_dir, workers)
    files += sorted(result.artifacts.values())

    sizes = [len(ix) for ix in make_split(train.labels, plan)]
    mem_size = len(result.memory) if result.memory is not None else 0
    reference = "replay" if method.startswith("ours") else None
    flops = protocol_flops(
        theta_pre.config, sizes, method, pcfg.task.epochs, pcfg.memft.epochs, mem_size,
        "lora_only" if pcfg.memft_lora_only else "all", reference=reference,
    )
    flop_body = flops.to_dict()
    flop_body["measured_training_flops"] = result.flops_measured
    flop_body["measured_eval_flops"] = result.flops_eval
    files += _report_files(out, result.report, {"stages": [s.to_dict() for s in result.stages], "method": method})
    files.append(_write_json(out / "flops.json", flop_body))
    if result.memory is not None:
        files.append(_write_json(out / "memory.json", {
            "per_class": result.memory.per_class,
            "counts": {str(k): v for k, v in result.memory.counts.items()},
            "clamped_classes": result.memory.clamped,
        }))
    files.append(_write_text_file(out / "plan.txt", plan.to_text(train.class_names)))
    rf = flops.reduction_factor
    print(
        f"bench[{method}]: overall {result.report.overall_accuracy:.4f}, "
        f"per task {[round(a, 4) for a in result.report.per_task_accuracy]}, "
        f"train FLOPs {flops.total:.3e}" + (f", {rf:.2f}x fewer than {reference}" if rf else "")
    )
    seeds = {
        "seed": seed,
        "tasks": derive_seed(seed, 11),
        "memory": derive_seed(seed, 12),
        "memft": derive_seed(seed, 13),
        "replay": derive_seed(seed, 14),
    }
    return files, seeds


def _write_text_file(path: Path, text: str) -> Path:
    _write_text(path, text)
    return path


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "train-task": cmd_train_task,
    "merge": cmd_merge,
    "memft": cmd_memft,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------- argument parsing


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--patch-size", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--depth", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--mlp-ratio", type=float)
    g.add_argument("--lora-rank", type=int)
    g.add_argument("--lora-alpha", type=float)


def _add_train_flags(p: argparse.ArgumentParser, prefix: str = "", title: str = "training") -> None:
    g = p.add_argument_group(title)
    flag = "--" + prefix.replace("_", "-")
    g.add_argument(flag + "lr", type=float, dest=prefix + "lr")
    g.add_argument(flag + "weight-decay", type=float, dest=prefix + "weight_decay")
    g.add_argument(flag + "batch-size", type=int, dest=prefix + "batch_size")
    g.add_argument(flag + "epochs", type=int, dest=prefix + "epochs")


def _add_loss_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cls-weight", type=float, help="cross-entropy weight when --kl is on (default 0.6)")
    p.add_argument("--kl-weight", type=float, help="feature-KL weight when --kl is on (default 0.4)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loracl", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="JSON file of settings (flags override it)")
        p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV}/{name} or runs/{name})")
        return p

    p = command("synth-data", "generate the synthetic grating dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--noise", type=float, help="Gaussian pixel noise std (0-255 scale)")
    p.add_argument("--train-per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--pretrain-per-class", type=int)
    p.add_argument("--seed", type=int)

    p = command("pretrain", "train the backbone on the pretrain pool")
    p.add_argument("--data", help="pretrain dataset file or synth-data directory")
    p.add_argument("--holdout", type=float, help="fraction held out for the accuracy report")
    p.add_argument("--seed", type=int)
    _add_model_flags(p)
    _add_train_flags(p)

    p = command("train-task", "train LoRA adapters + head on one task and merge them")
    p.add_argument("--pre", help="theta_pre checkpoint")
    p.add_argument("--data", help="train dataset file or synth-data directory")
    p.add_argument("--plan", help="split plan text file ('task N: classes' lines)")
    p.add_argument("--tasks", type=int, help="round-robin split into this many tasks")
    p.add_argument("--task-id", type=int)
    p.add_argument("--kl", action="store_true", default=None, help="add the feature-KL term")
    p.add_argument("--emit-vector", action="store_true", default=None, help="also write the task vector")
    p.add_argument("--seed", type=int)
    _add_loss_flags(p)
    _add_train_flags(p)

    p = command("merge", "add the scaled sum of task vectors to theta_pre")
    p.add_argument("--pre", help="theta_pre checkpoint")
    p.add_argument("inputs", nargs="*", help="task checkpoints or task-vector checkpoints")
    p.add_argument("--lambda", type=float, dest="lam", help="scaling factor (default 0.25)")

    p = command("memft", "fine-tune on a class-balanced memory sample")
    p.add_argument("--model", help="checkpoint to fine-tune")
    p.add_argument("--data", help="train dataset file or synth-data directory")
    p.add_argument("--per-class", type=int, help="memory samples per class (default 10)")
    p.add_argument("--lora-only", action="store_true", default=None)
    p.add_argument("--seed", type=int)
    _add_train_flags(p)

    p = command("eval", "per-task and overall top-1 accuracy")
    p.add_argument("--model", help="checkpoint to evaluate")
    p.add_argument("--data", help="test dataset file or synth-data directory")
    p.add_argument("--plan")
    p.add_argument("--tasks", type=int)

    p = command("bench", "run one continual-learning method end to end")
    p.add_argument("--method", help=f"one of {', '.join(METHODS)}")
    p.add_argument("--data", help="synth-data directory (default: generate from --seed)")
    p.add_argument("--pre", help="theta_pre checkpoint (default: pretrain first)")
    p.add_argument("--plan")
    p.add_argument("--tasks", type=int)
    p.add_argument("--workers", type=int, help="concurrent task trainings (default: task count)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--per-class", type=int)
    p.add_argument("--replay-memory", type=int)
    p.add_argument("--holdout", type=float)
    _add_loss_flags(p)
    _add_model_flags(p)
    _add_train_flags(p, title="task training")
    _add_train_flags(p, "memft_", "memory fine-tuning")
    _add_train_flags(p, "pretrain_", "pretraining")

    p = sub.add_parser("rerun", help="re-execute a run from its manifest and compare output hashes")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, help="where to write the re-run (default: <out_dir>.rerun)")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Flags > --config file > defaults. Unknown config-file keys are a usage error."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None) is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"config {args.config}: unknown setting(s) {unknown} for {command}")
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None and val != []:
            cfg[key] = val
    return cfg


def _jsonable(cfg: dict) -> dict:
    """Input paths become absolute so a manifest can be re-run from anywhere."""
    out = dict(cfg)
    for k in INPUT_KEYS:
        v = out.get(k)
        if isinstance(v, list):
            out[k] = [str(Path(x).resolve()) for x in v]
        elif v is not None:
            out[k] = str(Path(v).resolve())
    return out


def default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def execute(command: str, cfg: dict, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    outputs, seeds = COMMANDS[command](cfg, out)
    return write_manifest(out, command, cfg, seeds, outputs)


def rerun(manifest_path: Path, out: Path | None) -> int:
    manifest = json.loads(Path(manifest_path).read_text())
    for path, digest in manifest["inputs"].items():
        if not Path(path).exists() or git_blob_hash(Path(path)) != digest:
            print(f"error: input {path} is missing or changed since the recorded run", file=sys.stderr)
            return 1
    out = out or Path(manifest["out_dir"] + ".rerun")
    new_path = execute(manifest["command"], manifest["config"], out)
    new = json.loads(new_path.read_text())
    diffs = sorted(
        k for k in set(manifest["outputs"]) | set(new["outputs"])
        if manifest["outputs"].get(k) != new["outputs"].get(k)
    )
    for k in diffs:
        print(f"MISMATCH {k}: {manifest['outputs'].get(k)} != {new['outputs'].get(k)}")
    print(f"rerun: {len(new['outputs']) - len(diffs)}/{len(new['outputs'])} outputs identical")
    return 1 if diffs else 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "rerun":
            return rerun(args.manifest, args.out)
        cfg = _jsonable(resolve_config(args.command, args))
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        path = execute(args.command, cfg, (args.out or default_out(args.command)).resolve())
        print(f"manifest: {path}")
        return 0
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, TypeError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
