"""Analytic FLOP accounting for the ViT forward/backward and whole protocols.

Uses the same convention as the runtime counter in :mod:`loracl.tensor`:
multiply-add = 2 FLOPs, elementwise ops 1 per element, softmax / layernorm /
GELU at fixed per-element constants, shape ops free. Input normalisation and
patchify happen outside the model graph and are not charged; neither are the
loss and optimizer update (both O(batch * classes) or O(params) per step).

Backward cost is split into an activation-gradient part (gradients w.r.t.
intermediate values, needed along every path from a trainable tensor to the
loss) and a weight-gradient part (gradients w.r.t. trainable leaves only).
Freezing a weight removes exactly its weight-gradient term.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .model import ViTConfig, lora_shapes, param_shapes
from .tensor import GELU_FLOPS, LAYERNORM_FLOPS, SOFTMAX_FLOPS

MASKS = ("none", "lora_only", "all")
LORA_HEAD = ("head.weight",)


@dataclass
class _Tally:
    forward: int = 0
    act_grad: int = 0
    weight_grad: int = 0


class _Val:
    __slots__ = ("numel", "needs", "leaf")

    def __init__(self, numel: int, needs: bool, leaf: bool = False) -> None:
        self.numel, self.needs, self.leaf = numel, needs, leaf


class _Tracer:
    """Replays the model's op sequence on sizes instead of arrays."""

    def __init__(self, trainable: set[str]) -> None:
        self.trainable = trainable
        self.t = _Tally()

    def param(self, name: str, numel: int) -> _Val:
        return _Val(numel, name in self.trainable, leaf=True)

    def _bwd(self, inp: _Val, cost: int) -> None:
        if inp.needs:
            if inp.leaf:
                self.t.weight_grad += cost
            else:
                self.t.act_grad += cost

    def op(self, out_numel: int, inputs: Sequence[_Val], fwd: int, bwd: Sequence[int]) -> _Val:
        self.t.forward += fwd
        out = _Val(out_numel, any(i.needs for i in inputs))
        if out.needs:
            for i, c in zip(inputs, bwd):
                self._bwd(i, c)
        return out

    def matmul(self, a: _Val, b: _Val, rows: int, inner: int, cols: int) -> _Val:
        c = 2 * rows * inner * cols
        return self.op(rows * cols, (a, b), c, (c, c))

    def binary(self, a: _Val, b: _Val) -> _Val:
        n = max(a.numel, b.numel)
        return self.op(n, (a, b), n, (n, n))

    def unary(self, x: _Val, per_elem: int) -> _Val:
        return self.op(x.numel, (x,), per_elem * x.numel, (per_elem * x.numel,))

    def layernorm(self, x: _Val, g: _Val, b: _Val) -> _Val:
        n = x.numel
        return self.op(n, (x, g, b), LAYERNORM_FLOPS * n, (LAYERNORM_FLOPS * n, n, n))

    def linear(self, x: _Val, rows: int, fan_in: int, fan_out: int, name: str, bias: bool = True) -> _Val:
        y = self.matmul(x, self.param(name + ".weight", fan_in * fan_out), rows, fan_in, fan_out)
        if bias:
            y = self.binary(y, self.param(name + ".bias", fan_out))
        return y


def _trace(cfg: ViTConfig, batch: int, trainable: set[str], lora: bool) -> _Tally:
    tr = _Tracer(trainable)
    m, heads, T = cfg.dim, cfg.heads, cfg.tokens
    rows = batch * T
    const = _Val(0, False)

    def proj(h: _Val, prefix: str, adapted: bool) -> _Val:
        y = tr.linear(h, rows, m, m, prefix)
        if lora and adapted:
            down = tr.matmul(h, tr.param(prefix + ".lora_A", cfg.lora_rank * m), rows, m, cfg.lora_rank)
            up = tr.matmul(down, tr.param(prefix + ".lora_B", m * cfg.lora_rank), rows, cfg.lora_rank, m)
            up = tr.binary(up, const)
            y = tr.binary(y, up)
        return y

    x = tr.linear(_Val(batch * cfg.num_patches * cfg.patch_dim, False), batch * cfg.num_patches, cfg.patch_dim, m, "patch_embed")
    cls = tr.param("cls_token", m)
    x = _Val(rows * m, x.needs or cls.needs)
    x = tr.binary(x, tr.param("pos_embed", T * m))
    for i in range(cfg.depth):
        p = f"block.{i}"
        h = tr.layernorm(x, tr.param(f"{p}.norm1.weight", m), tr.param(f"{p}.norm1.bias", m))
        q = proj(h, f"{p}.attn.q", True)
        k = proj(h, f"{p}.attn.k", False)
        v = proj(h, f"{p}.attn.v", True)
        d = m // heads
        scores = tr.matmul(q, k, batch * heads * T, d, T)
        scores = tr.binary(scores, const)
        att = tr.unary(scores, SOFTMAX_FLOPS)
        o = tr.matmul(att, v, batch * heads * T, T, d)
        x = tr.binary(x, proj(o, f"{p}.attn.proj", False))
        h = tr.layernorm(x, tr.param(f"{p}.norm2.weight", m), tr.param(f"{p}.norm2.bias", m))
        h = tr.unary(tr.linear(h, rows, m, cfg.hidden, f"{p}.mlp.fc1"), GELU_FLOPS)
        x = tr.binary(x, tr.linear(h, rows, cfg.hidden, m, f"{p}.mlp.fc2"))
    x = tr.layernorm(x, tr.param("norm.weight", m), tr.param("norm.bias", m))
    feats = _Val(batch * m, x.needs)
    tr.linear(feats, batch, m, cfg.num_classes, "head")
    return tr.t


def trainable_names(cfg: ViTConfig, mask: str) -> set[str]:
    if mask not in MASKS:
        raise ValueError(f"unknown trainable mask {mask!r}; expected one of {MASKS}")
    if mask == "none":
        return set()
    if mask == "all":
        return set(param_shapes(cfg))
    return set(lora_shapes(cfg)) | set(LORA_HEAD)


def forward_flops(config: ViTConfig, batch: int = 1, lora: bool = False) -> int:
    """Closed-form forward FLOPs for ``batch`` images.

    Per block, with ``R = batch * tokens`` rows and width ``M``: four M x M
    projections (``8 R M^2``), two attention products (``4 batch T^2 M``),
    the MLP (``4 R M H``), plus elementwise terms. Adapters add
    ``4 R M K + 2 R M`` for each of q and v.
    """
    c = config
    T, M, H, K, C = c.tokens, c.dim, c.hidden, c.lora_rank, c.num_classes
    R = batch * T
    P = batch * c.num_patches
    embed = 2 * P * c.patch_dim * M + P * M + R * M  # matmul, bias, pos_embed
    attn_elem = batch * c.heads * T * T  # score entries
    block = (
        2 * LAYERNORM_FLOPS * R * M  # two norms
        + 4 * (2 * R * M * M + R * M)  # q, k, v, proj (+bias)
        + 2 * (2 * batch * T * T * M)  # scores and value mix
        + attn_elem * (1 + SOFTMAX_FLOPS)  # scale + softmax
        + 2 * R * M  # residual adds
        + 2 * R * M * H + R * H + GELU_FLOPS * R * H  # fc1 + bias + gelu
        + 2 * R * H * M + R * M  # fc2 + bias
    )
    if lora:
        block += 2 * (2 * R * M * K + 2 * R * K * M + 2 * R * M)
    head = LAYERNORM_FLOPS * R * M + 2 * batch * M * C + batch * C
    return embed + c.depth * block + head


def traced_forward_flops(config: ViTConfig, batch: int = 1, lora: bool = False) -> int:
    """Same quantity as :func:`forward_flops`, summed op by op."""
    return _trace(config, batch, set(), lora).forward


@dataclass(frozen=True)
class BackwardFlops:
    activation_grad: int
    weight_grad: int

    @property
    def total(self) -> int:
        return self.activation_grad + self.weight_grad


def backward_flops(config: ViTConfig, batch: int = 1, trainable_mask: str = "all", lora: bool | None = None) -> BackwardFlops:
    """Backward FLOPs for one pass. Adapters are present in the graph when
    ``lora`` is true (default: only for the ``lora_only`` mask)."""
    names = trainable_names(config, trainable_mask)
    if lora is None:
        lora = trainable_mask == "lora_only"
    t = _trace(config, batch, names, lora)
    return BackwardFlops(t.act_grad, t.weight_grad)


def train_step_flops(config: ViTConfig, batch: int, trainable_mask: str) -> int:
    lora = trainable_mask == "lora_only"
    return forward_flops(config, batch, lora) + backward_flops(config, batch, trainable_mask, lora).total


@dataclass
class FlopReport:
    method: str
    forward_flops_per_sample: int
    backward_flops_per_sample: int
    activation_grad_per_sample: int
    weight_grad_per_sample: int
    phases: dict[str, int] = field(default_factory=dict)
    reference: str | None = None
    reference_total: int | None = None

    @property
    def total(self) -> int:
        return sum(self.phases.values())

    @property
    def reduction_factor(self) -> float | None:
        if self.reference_total is None or self.total == 0:
            return None
        return self.reference_total / self.total

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        d["pflops"] = self.total / 1e15
        d["reduction_factor"] = self.reduction_factor
        return d


def protocol_flops(
    config: ViTConfig,
    task_sizes: Sequence[int],
    method: str,
    epochs: int,
    memft_epochs: int = 0,
    memory_size: int = 0,
    memft_mask: str = "all",
    use_kl: bool = False,
    reference: str | None = None,
) -> FlopReport:
    """Training FLOPs of a protocol, summed sample by sample (costs are
    linear in batch, so partial last batches need no special case).

    ours_*: every task trains adapters + head for ``epochs``, then the merged
    model trains on ``memory_size`` samples for ``memft_epochs``. ours_kl adds
    a no-grad forward of the frozen pretrained model per sample. naive_seq:
    full fine-tuning per task. replay: full fine-tuning where every task
    sample is paired with one memory sample, i.e. twice the per-step work.
    """
    if method not in ("ours_xent", "ours_kl", "naive_seq", "replay"):
        raise ValueError(f"unknown method {method!r}")
    per_lora = train_step_flops(config, 1, "lora_only")
    per_full = train_step_flops(config, 1, "all")
    phases: dict[str, int] = {}
    if method.startswith("ours"):
        extra = forward_flops(config, 1) if (use_kl or method == "ours_kl") else 0
        for i, n in enumerate(task_sizes):
            phases[f"task_{i}"] = epochs * n * (per_lora + extra)
        phases["memft"] = memft_epochs * memory_size * train_step_flops(config, 1, memft_mask)
        mask, lora = "lora_only", True
    else:
        factor = 2 if method == "replay" else 1
        for i, n in enumerate(task_sizes):
            phases[f"task_{i}"] = epochs * n * factor * per_full
        mask, lora = "all", False
    bwd = backward_flops(config, 1, mask, lora)
    report = FlopReport(method, forward_flops(config, 1, lora), bwd.total, bwd.activation_grad, bwd.weight_grad, phases)
    if reference is not None:
        ref = protocol_flops(config, task_sizes, reference, epochs, memft_epochs, memory_size, memft_mask, use_kl)
        report.reference, report.reference_total = reference, ref.total
    return report
