"""Class-incremental protocol: task splits, per-task LoRA training, task-vector
merging, memory fine-tuning, evaluation, and the sequential baselines."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .arithmetic import MergeConfig, TaskVector, apply, compute_task_vector, scale_and_sum
from .checkpoint import save_checkpoint
from .data import Dataset
from .losses import LossWeights, XENT_ONLY, classification_loss, combined_loss, kl_feature_loss
from .model import (
    LoRAParams,
    ParamStore,
    ViTConfig,
    attach_lora,
    forward_tensors,
    init_model,
    merge_lora,
    predict,
    prepare_images,
)
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

METHODS = ("ours_xent", "ours_kl", "naive_seq", "replay")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    classes: tuple[int, ...]


@dataclass(frozen=True)
class SplitPlan:
    tasks: tuple[TaskSpec, ...]
    num_classes: int

    def __post_init__(self) -> None:
        seen: set[int] = set()
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate task ids in {ids}")
        for t in self.tasks:
            if not t.classes:
                raise ValueError(f"task {t.task_id} has no classes")
            overlap = seen & set(t.classes)
            if overlap:
                raise ValueError(f"class(es) {sorted(overlap)} assigned to more than one task")
            seen |= set(t.classes)
        if seen != set(range(self.num_classes)):
            missing = sorted(set(range(self.num_classes)) - seen)
            extra = sorted(seen - set(range(self.num_classes)))
            raise ValueError(f"tasks must partition classes 0..{self.num_classes - 1}: missing {missing}, out of range {extra}")

    @classmethod
    def round_robin(cls, num_classes: int, num_tasks: int, seed: int | None = None) -> "SplitPlan":
        """Deal ``C // N`` classes to each task round-robin; the ``C % N``
        leftover classes join the last task."""
        if num_tasks < 1 or num_tasks > num_classes:
            raise ContractError(f"need 1 <= tasks <= classes, got {num_tasks} tasks for {num_classes} classes")
        order = np.arange(num_classes)
        if seed is not None:
            order = np.random.default_rng(seed).permutation(num_classes)
        per = num_classes // num_tasks
        dealt = order[: per * num_tasks]
        groups = [sorted(int(c) for c in dealt[t::num_tasks]) for t in range(num_tasks)]
        groups[-1] = sorted(groups[-1] + [int(c) for c in order[per * num_tasks :]])
        return cls(tuple(TaskSpec(t, tuple(g)) for t, g in enumerate(groups)), num_classes)

    def task(self, task_id: int) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"unknown task id {task_id}; plan has {[t.task_id for t in self.tasks]}")

    def task_of_class(self) -> dict[int, int]:
        return {c: t.task_id for t in self.tasks for c in t.classes}

    def to_text(self, class_names: Sequence[str] | None = None) -> str:
        lines = []
        for t in self.tasks:
            names = [class_names[c] if class_names else str(c) for c in t.classes]
            lines.append(f"task {t.task_id}: {', '.join(names)}")
        return "\n".join(lines) + "\n"


_PLAN_LINE = re.compile(r"^\s*(?:task\s*)?(\d+)\s*:\s*(.*)$", re.IGNORECASE)


def parse_split_plan(text: str, num_classes: int, class_names: Sequence[str] | None = None) -> SplitPlan:
    """Parse ``task <id>: name, name, ...`` lines (``#`` starts a comment).

    Entries are looked up in ``class_names`` first, then read as integers.
    """
    lookup = {n: i for i, n in enumerate(class_names or [])}
    tasks = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        m = _PLAN_LINE.match(line)
        if not m:
            raise ValueError(f"split plan line {lineno}: expected 'task <id>: classes', got {line!r}")
        classes = []
        for item in (s.strip() for s in m.group(2).split(",")):
            if not item:
                continue
            if item in lookup:
                classes.append(lookup[item])
            elif item.lstrip("-").isdigit():
                classes.append(int(item))
            else:
                raise ValueError(f"split plan line {lineno}: unknown class {item!r}")
        tasks.append(TaskSpec(int(m.group(1)), tuple(classes)))
    return SplitPlan(tuple(tasks), num_classes)


def make_split(labels, plan: SplitPlan | int, seed: int | None = None, num_classes: int | None = None) -> list[np.ndarray]:
    """Per-task sorted sample indices. ``plan`` may be a task count, in which
    case classes are dealt with :meth:`SplitPlan.round_robin`."""
    labels = np.asarray(labels)
    if isinstance(plan, int):
        c = num_classes if num_classes is not None else int(labels.max()) + 1
        plan = SplitPlan.round_robin(c, plan, seed)
    if len(labels) and labels.max() >= plan.num_classes:
        raise ContractError(f"label {labels.max()} has no task in the plan")
    return [np.flatnonzero(np.isin(labels, t.classes)) for t in plan.tasks]


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 32
    epochs: int = 20
    loss_weights: LossWeights = LossWeights()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    @classmethod
    def vit_base(cls, epochs: int = 50, seed: int = 0) -> "TrainConfig":
        """Adam 5e-6, weight decay 1e-6, batch 32 as used for ViT-Base."""
        return cls(5e-6, 1e-6, 32, epochs, LossWeights(), seed)


DESK_PRETRAIN = TrainConfig(epochs=10)


class Adam:
    """Adam with L2-style weight decay added to the gradient."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            if self.wd:
                g = g + self.wd * p
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# extra-batch hook for replay: (step, batch indices) -> extra (images, labels) or None
ExtraBatch = Callable[[np.ndarray], "tuple[np.ndarray, np.ndarray] | None"]


def fit(
    store: ParamStore,
    data: Dataset,
    cfg: TrainConfig,
    trainable: Sequence[str] | None = None,
    lora: LoRAParams | None = None,
    kl_reference: ParamStore | None = None,
    extra_batch: ExtraBatch | None = None,
    after_step: Callable[[np.ndarray], None] | None = None,
) -> tuple[ParamStore, LoRAParams | None]:
    """Minibatch Adam on the named store tensors (``None`` = all) plus every
    adapter factor. Frozen tensors are passed to the forward as plain
    constants, so they never enter the GradMap.

    With ``kl_reference`` the loss is the weighted cross-entropy + feature-KL
    mix from ``cfg.loss_weights``; otherwise plain cross-entropy.
    """
    if len(data) == 0:
        raise ContractError("cannot train on an empty dataset")
    config = store.config
    names = list(store) if trainable is None else list(trainable)
    opt_params = {k: store[k].data for k in names}
    if lora is not None:
        opt_params.update({k: lora[k].data for k in lora})
    opt = Adam(opt_params, cfg.learning_rate, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    weights = cfg.loss_weights if kl_reference is not None else XENT_ONLY
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images, labels = data.images[idx], data.labels[idx]
            if extra_batch is not None:
                extra = extra_batch(idx)
                if extra is not None:
                    images = np.concatenate([images, extra[0]])
                    labels = np.concatenate([labels, extra[1]])
            patches = prepare_images(images, config)
            leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in opt.params.items()}
            params = {k: leaves.get(k, t) for k, t in store.items()}
            lora_leaves = {k: leaves[k] for k in lora} if lora is not None else None
            feats, logits = forward_tensors(config, params, lora_leaves, patches)
            loss = classification_loss(logits, labels)
            if kl_reference is not None:
                with T.no_grad():
                    pre_feats, _ = forward_tensors(config, kl_reference, None, patches)
                loss = combined_loss(loss, kl_feature_loss(pre_feats, feats), weights)
            grads = T.backward(loss)
            opt.step(grads)
            if after_step is not None:
                after_step(idx)
    new_store = store.replace({k: opt.params[k] for k in names})
    new_lora = LoRAParams(config, {k: opt.params[k] for k in lora}) if lora is not None else None
    return new_store, new_lora


LORA_TRAINABLE = ("head.weight",)


def train_task(
    theta_pre: ParamStore,
    data: Dataset,
    cfg: TrainConfig,
    use_kl: bool = False,
    task_id: int = 0,
) -> ParamStore:
    """Fresh adapters on a frozen ``theta_pre``; Adam on (A, B, head weight);
    returns the merged task model. ``theta_pre`` is not modified."""
    lora = attach_lora(theta_pre.config, derive_seed(cfg.seed, task_id, 1))
    task_cfg = replace(cfg, seed=derive_seed(cfg.seed, task_id, 2))
    store, lora = fit(
        theta_pre, data, task_cfg, trainable=LORA_TRAINABLE, lora=lora,
        kl_reference=theta_pre if use_kl else None,
    )
    return merge_lora(store, lora)


def pretrain(config: ViTConfig, data: Dataset, cfg: TrainConfig, reset_head: bool = True) -> tuple[ParamStore, ParamStore]:
    """Full-parameter training from a seeded init; stands in for an
    off-the-shelf pretrained backbone.

    Returns ``(theta_pre, trained)``. ``theta_pre`` keeps the trained backbone
    but gets a freshly seeded classifier head (unless ``reset_head`` is off),
    like attaching a new head to a pretrained ViT. ``trained`` keeps the
    pretraining head and is what pretraining accuracy is measured on.
    """
    trained = fit(init_model(config, derive_seed(cfg.seed, 0)), data, cfg)[0]
    if not reset_head:
        return trained, trained
    fresh = init_model(config, derive_seed(cfg.seed, 3))
    return trained.replace({k: fresh[k] for k in ("head.weight", "head.bias")}), trained


# ---------------------------------------------------------------- memory


@dataclass
class MemoryReservoir:
    data: Dataset
    indices: np.ndarray
    per_class: int
    counts: dict[int, int]
    clamped: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.data)


def build_memory(data: Dataset, k: int = 10, seed: int = 0) -> MemoryReservoir:
    """First ``k`` samples of each class under a seeded shuffle. Classes with
    fewer than ``k`` samples contribute all of them and are listed in
    ``clamped``."""
    if k < 1:
        raise ContractError(f"samples per class must be >= 1, got {k}")
    order = np.random.default_rng(seed).permutation(len(data))
    chosen, counts, clamped = [], {}, []
    for c in range(data.num_classes):
        members = order[data.labels[order] == c]
        if members.size == 0:
            raise ContractError(f"class {c} has no samples to put in memory")
        if members.size < k:
            clamped.append(c)
        take = members[:k]
        chosen.append(take)
        counts[c] = int(take.size)
    idx = np.sort(np.concatenate(chosen))
    return MemoryReservoir(data.subset(idx), idx, k, counts, clamped)


def memory_finetune(
    theta_final: ParamStore,
    mem: MemoryReservoir,
    cfg: TrainConfig,
    lora_only: bool = False,
    kl_reference: ParamStore | None = None,
) -> ParamStore:
    """Plain minibatch fine-tuning on the balanced memory. All tensors train
    unless ``lora_only``, which trains fresh adapters + head weight and merges."""
    if len(mem) == 0:
        raise ContractError("memory reservoir is empty")
    if lora_only:
        lora = attach_lora(theta_final.config, derive_seed(cfg.seed, 7))
        store, lora = fit(theta_final, mem.data, cfg, LORA_TRAINABLE, lora, kl_reference)
        return merge_lora(store, lora)
    return fit(theta_final, mem.data, cfg, kl_reference=kl_reference)[0]


class Reservoir:
    """Uniform reservoir sampling (Algorithm R) over a stream of sample ids."""

    def __init__(self, capacity: int, seed: int) -> None:
        self.capacity = capacity
        self.items: list[tuple[int, int]] = []  # (task position, sample index)
        self.seen = 0
        self.rng = np.random.default_rng(seed)

    def add(self, key: tuple[int, int]) -> None:
        self.seen += 1
        if len(self.items) < self.capacity:
            self.items.append(key)
        else:
            j = int(self.rng.integers(0, self.seen))
            if j < self.capacity:
                self.items[j] = key

    def sample(self, n: int) -> list[tuple[int, int]]:
        if not self.items:
            return []
        take = self.rng.choice(len(self.items), size=min(n, len(self.items)), replace=False)
        return [self.items[i] for i in take]


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    task_ids: list[int]
    per_task_accuracy: list[float]
    per_task_n: list[int]
    overall_accuracy: float
    overall_n: int
    forgetting: list[float] | None = None
    stage: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_rows(self) -> list[list]:
        rows = [["task_id", "accuracy", "n"]]
        rows += [[t, f"{a:.6f}", n] for t, a, n in zip(self.task_ids, self.per_task_accuracy, self.per_task_n)]
        rows.append(["all", f"{self.overall_accuracy:.6f}", self.overall_n])
        return rows


def accuracy_report(preds: np.ndarray, labels: np.ndarray, plan: SplitPlan | None, stage: str = "") -> EvalReport:
    correct = preds == labels
    ids, accs, ns = [], [], []
    if plan is not None:
        for t in plan.tasks:
            mask = np.isin(labels, t.classes)
            ids.append(t.task_id)
            ns.append(int(mask.sum()))
            accs.append(float(correct[mask].mean()) if mask.any() else 0.0)
    overall = float(correct.mean()) if len(correct) else 0.0
    return EvalReport(ids, accs, ns, overall, int(len(labels)), stage=stage)


def evaluate(theta: ParamStore, test: Dataset, plan: SplitPlan | None = None, stage: str = "") -> EvalReport:
    """Top-1 accuracy with argmax over all classes; per task on the test
    samples of that task's classes."""
    if len(test) and test.labels.max() >= theta.config.num_classes:
        raise ContractError("test labels exceed the model's class count")
    return accuracy_report(predict(theta, test.images), test.labels, plan, stage)


def forgetting(history: Sequence[EvalReport], first_seen: Sequence[int]) -> list[float]:
    """Per task: best accuracy over stages at or after the task was learned,
    minus accuracy at the final stage."""
    final = history[-1].per_task_accuracy
    out = []
    for j, start in enumerate(first_seen):
        best = max(h.per_task_accuracy[j] for h in history[start:])
        out.append(best - final[j])
    return out


# ---------------------------------------------------------------- protocol


@dataclass(frozen=True)
class ProtocolConfig:
    task: TrainConfig = TrainConfig()
    memft: TrainConfig = TrainConfig(learning_rate=1e-4, epochs=15)
    merge: MergeConfig = MergeConfig()
    per_class: int = 10
    replay_memory: int = 200
    memft_lora_only: bool = False
    memft_kl: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProtocolResult:
    method: str
    report: EvalReport
    stages: list[EvalReport]
    artifacts: dict[str, Path] = field(default_factory=dict)
    memory: MemoryReservoir | None = None
    flops_measured: int = 0  # training only; evaluation passes are excluded
    flops_eval: int = 0

    def stage(self, name: str) -> EvalReport:
        for s in self.stages:
            if s.stage == name:
                return s
        raise KeyError(name)


def _save(out_dir: Path | None, artifacts: dict, key: str, obj, meta=None) -> None:
    if out_dir is None:
        return
    path = out_dir / f"{key}.ckpt"
    save_checkpoint(path, obj, meta)
    artifacts[key] = path


def train_task_vectors(
    theta_pre: ParamStore,
    train: Dataset,
    plan: SplitPlan,
    cfg: TrainConfig,
    use_kl: bool,
    workers: int = 1,
    task_order: Sequence[int] | None = None,
) -> dict[int, ParamStore]:
    """Train every task independently from ``theta_pre``; returns task id ->
    merged task model. Order and worker count do not affect results."""
    splits = dict(zip((t.task_id for t in plan.tasks), make_split(train.labels, plan)))
    order = list(task_order) if task_order is not None else list(splits)

    def job(tid: int) -> tuple[int, ParamStore]:
        log.info("training task %d on %d samples", tid, len(splits[tid]))
        return tid, train_task(theta_pre, train.subset(splits[tid]), cfg, use_kl, tid)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(job, order))
    else:
        results = dict(job(t) for t in order)
    return results


def merge_task_models(theta_pre: ParamStore, models: dict[int, ParamStore], merge: MergeConfig) -> tuple[ParamStore, list[TaskVector]]:
    vectors = [compute_task_vector(models[t], theta_pre, t) for t in sorted(models)]
    return apply(theta_pre, scale_and_sum(vectors, merge)), vectors


def run_protocol(
    theta_pre: ParamStore,
    train: Dataset,
    test: Dataset,
    plan: SplitPlan,
    cfg: ProtocolConfig = ProtocolConfig(),
    method: str = "ours_xent",
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> ProtocolResult:
    """Run one continual-learning method end to end and evaluate every stage.

    ours_*: independent LoRA task training, task-vector merge (TARV), memory
    fine-tuning. naive_seq: sequential full fine-tuning. replay: sequential
    fine-tuning with one reservoir minibatch appended to every task batch.
    Intermediate checkpoints are written to ``out_dir`` when given.

    Forgetting is best-minus-final over the learner's trajectory. For the
    sequential baselines that is the model after each task. For ours_* the
    learner is the merged model, so the trajectory is TARV then TARV+memft.
    Per-task experts and running partial merges are reported as stages only.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Path] = {}
    experts: list[EvalReport] = []
    interim: list[EvalReport] = []
    learner: list[EvalReport] = []
    memory = None
    eval_counter = T.FlopCounter()

    def stage_eval(theta: ParamStore, stage: str) -> EvalReport:
        with T.count_flops() as c:
            rep = evaluate(theta, test, plan, stage)
        eval_counter.forward += c.forward
        return rep

    with T.count_flops() as counter:
        if method.startswith("ours"):
            task_cfg = replace(cfg.task, seed=derive_seed(cfg.seed, 11))
            models = train_task_vectors(theta_pre, train, plan, task_cfg, method == "ours_kl", workers)
            for t in plan.tasks:
                experts.append(stage_eval(models[t.task_id], f"task_{t.task_id}"))
                _save(out, artifacts, f"theta_task{t.task_id}", models[t.task_id], {"task_id": t.task_id})
            theta_final, vectors = merge_task_models(theta_pre, models, cfg.merge)
            for v in vectors:
                _save(out, artifacts, f"tau_task{v.task_id}", v)
            by_id = {v.task_id: v for v in vectors}
            arrived = [by_id[t.task_id] for t in plan.tasks]
            for k, t in enumerate(plan.tasks[:-1], 1):
                partial = apply(theta_pre, scale_and_sum(arrived[:k], cfg.merge))
                interim.append(stage_eval(partial, f"merge_through_task_{t.task_id}"))
            learner.append(stage_eval(theta_final, "tarv"))
            _save(out, artifacts, "theta_tarv", theta_final, {"lambda": cfg.merge.lam})
            memory = build_memory(train, cfg.per_class, derive_seed(cfg.seed, 12))
            mem_cfg = replace(cfg.memft, seed=derive_seed(cfg.seed, 13))
            final = memory_finetune(
                theta_final, memory, mem_cfg, cfg.memft_lora_only, theta_pre if cfg.memft_kl else None
            )
            learner.append(stage_eval(final, "tarv+memft"))
            _save(out, artifacts, "theta_final", final)
        else:
            splits = make_split(train.labels, plan)
            model = theta_pre
            reservoir = Reservoir(cfg.replay_memory, derive_seed(cfg.seed, 14)) if method == "replay" else None
            for pos, (t, idx) in enumerate(zip(plan.tasks, splits)):
                task_data = train.subset(idx)
                extra = after = None
                if reservoir is not None:
                    extra, after = _replay_hooks(reservoir, pos, cfg.task.batch_size, train, splits)
                step_cfg = replace(cfg.task, seed=derive_seed(cfg.seed, 15, t.task_id))
                model, _ = fit(model, task_data, step_cfg, extra_batch=extra, after_step=after)
                learner.append(stage_eval(model, f"after_task_{t.task_id}"))
                _save(out, artifacts, f"theta_after_task{t.task_id}", model)

    first_seen = [0] * len(plan.tasks) if method.startswith("ours") else list(range(len(plan.tasks)))
    report = replace(learner[-1], forgetting=forgetting(learner, first_seen), stage="final")
    return ProtocolResult(
        method, report, experts + interim + learner, artifacts, memory,
        counter.total - eval_counter.total, eval_counter.total,
    )


def _replay_hooks(reservoir: Reservoir, pos: int, batch: int, train: Dataset, splits):
    def extra(idx: np.ndarray):
        keys = reservoir.sample(batch)
        if not keys:
            return None
        rows = np.array([splits[p][i] for p, i in keys])
        return train.images[rows], train.labels[rows]

    def after(idx: np.ndarray) -> None:
        for i in idx:
            reservoir.add((pos, int(i)))

    return extra, after
