"""Task vectors: per-tensor deltas from the pretrained store, their scaled sum,
and application back onto the pretrained weights."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .model import CompatibilityError, ParamStore, _TensorMap
from .tensor import ContractError, Tensor

DEFAULT_LAMBDA = 0.25


class TaskVector(_TensorMap):
    kind = "task-vector"

    def __init__(self, config, tensors: Mapping[str, object], task_id: str | int | None = None) -> None:
        super().__init__(config, tensors)
        self.task_id = task_id

    def __neg__(self) -> "TaskVector":
        return TaskVector(self.config, {k: -v.data for k, v in self.items()}, self.task_id)

    def is_zero(self) -> bool:
        return all(not v.data.any() for v in self.values())


@dataclass(frozen=True)
class MergeConfig:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self) -> None:
        if not np.isfinite(self.lam):
            raise ValueError(f"lambda must be finite, got {self.lam}")


def check_compatible(*maps: _TensorMap, labels: Sequence[str] | None = None) -> None:
    """Raise CompatibilityError unless all maps share config, names and shapes."""
    labels = list(labels) if labels is not None else [f"#{i}" for i in range(len(maps))]
    ref = maps[0]
    problems = []
    for label, m in zip(labels[1:], maps[1:]):
        if m.config != ref.config:
            problems.append(f"{label}: config differs from {labels[0]}")
            continue
        bad = sorted(set(ref) ^ set(m))
        bad += [k for k in ref if k in m and ref[k].shape != m[k].shape]
        if bad:
            problems.append(f"{label}: mismatched names {bad}")
    if problems:
        raise CompatibilityError("; ".join(problems))


def compute_task_vector(theta_i: ParamStore, theta_pre: ParamStore, task_id=None) -> TaskVector:
    check_compatible(theta_pre, theta_i, labels=["theta_pre", "theta_i"])
    deltas = {k: theta_i[k].data - theta_pre[k].data for k in theta_pre}
    return TaskVector(theta_pre.config, deltas, task_id)


def scale_and_sum(vectors: Sequence[TaskVector], cfg: MergeConfig = MergeConfig()) -> TaskVector:
    """``lam * sum(vectors)``, accumulated in list order for bit reproducibility."""
    if not vectors:
        raise ContractError("scale_and_sum needs at least one task vector")
    check_compatible(*vectors, labels=[f"vector[{i}]" for i in range(len(vectors))])
    out = {}
    for name in vectors[0]:
        acc = np.zeros_like(vectors[0][name].data)
        for v in vectors:
            acc = acc + cfg.lam * v[name].data
        out[name] = acc
    return TaskVector(vectors[0].config, out, "merged")


def apply(theta_pre: ParamStore, tau: TaskVector) -> ParamStore:
    check_compatible(theta_pre, tau, labels=["theta_pre", "tau"])
    return ParamStore(theta_pre.config, {k: Tensor(theta_pre[k].data + tau[k].data, name=k) for k in theta_pre})
