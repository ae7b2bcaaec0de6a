"""Small Vision Transformer with LoRA adapters on the query/value projections.

Canonical parameter names (``depth`` blocks indexed from 0)::

    patch_embed.weight        (dim, channels * patch * patch)
    patch_embed.bias          (dim,)
    cls_token                 (1, dim)
    pos_embed                 (num_patches + 1, dim)
    block.<i>.norm1.weight    (dim,)          block.<i>.norm1.bias  (dim,)
    block.<i>.attn.<p>.weight (dim, dim)      block.<i>.attn.<p>.bias (dim,)
                              for <p> in q, k, v, proj
    block.<i>.norm2.weight    (dim,)          block.<i>.norm2.bias  (dim,)
    block.<i>.mlp.fc1.weight  (hidden, dim)   block.<i>.mlp.fc1.bias (hidden,)
    block.<i>.mlp.fc2.weight  (dim, hidden)   block.<i>.mlp.fc2.bias (dim,)
    norm.weight, norm.bias    (dim,)
    head.weight               (num_classes, dim)
    head.bias                 (num_classes,)

with ``hidden = int(dim * mlp_ratio)``. Adapter names append ``.lora_A``
(rank, dim) and ``.lora_B`` (dim, rank) to ``block.<i>.attn.q`` and
``block.<i>.attn.v``. Weights use the (out, in) layout, so a projection is
``x @ W.T + b``.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

INIT_STD = 0.02
LORA_TARGETS = ("q", "v")


class ConfigError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 8
    lora_rank: int = 4
    lora_alpha: float = 4.0

    def __post_init__(self) -> None:
        for field in ("image_size", "patch_size", "channels", "dim", "heads", "num_classes", "lora_rank"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.lora_rank >= self.dim:
            raise ConfigError(f"lora_rank {self.lora_rank} must be < dim {self.dim}")
        if self.mlp_ratio <= 0 or self.lora_alpha <= 0:
            raise ConfigError("mlp_ratio and lora_alpha must be positive")

    @classmethod
    def vit_base(cls, num_classes: int = 37) -> "ViTConfig":
        """ViT-Base/16 at 224px with r=16, alpha=16 adapters."""
        return cls(224, 16, 3, 768, 12, 12, 4.0, num_classes, 16, 16.0)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def lora_scaling(self) -> float:
        return self.lora_alpha / self.lora_rank

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ViTConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor of a store built from ``cfg``, sorted by name."""
    m, h = cfg.dim, cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (m, cfg.patch_dim),
        "patch_embed.bias": (m,),
        "cls_token": (1, m),
        "pos_embed": (cfg.tokens, m),
        "norm.weight": (m,),
        "norm.bias": (m,),
        "head.weight": (cfg.num_classes, m),
        "head.bias": (cfg.num_classes,),
    }
    for i in range(cfg.depth):
        p = f"block.{i}"
        for n in ("norm1", "norm2"):
            shapes[f"{p}.{n}.weight"] = (m,)
            shapes[f"{p}.{n}.bias"] = (m,)
        for n in ("q", "k", "v", "proj"):
            shapes[f"{p}.attn.{n}.weight"] = (m, m)
            shapes[f"{p}.attn.{n}.bias"] = (m,)
        shapes[f"{p}.mlp.fc1.weight"] = (h, m)
        shapes[f"{p}.mlp.fc1.bias"] = (h,)
        shapes[f"{p}.mlp.fc2.weight"] = (m, h)
        shapes[f"{p}.mlp.fc2.bias"] = (m,)
    return dict(sorted(shapes.items()))


def lora_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i in range(cfg.depth):
        for t in LORA_TARGETS:
            shapes[f"block.{i}.attn.{t}.lora_A"] = (cfg.lora_rank, cfg.dim)
            shapes[f"block.{i}.attn.{t}.lora_B"] = (cfg.dim, cfg.lora_rank)
    return dict(sorted(shapes.items()))


def is_bias(name: str) -> bool:
    return name.endswith(".bias")


class _TensorMap(Mapping):
    """Read-only, name-sorted map of tensors tied to a config and a schema."""

    kind = "store"

    def __init__(self, config: ViTConfig, tensors: Mapping[str, object]) -> None:
        expected = self._schema(config)
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise CompatibilityError(f"{self.kind} schema mismatch: missing={missing} unexpected={extra}")
        items = {}
        for name in sorted(tensors):
            t = tensors[name]
            if not isinstance(t, Tensor) or t.requires_grad:
                t = Tensor(t.data if isinstance(t, Tensor) else t, name=name)
            if t.shape != expected[name]:
                raise CompatibilityError(f"{name}: shape {t.shape} != expected {expected[name]}")
            items[name] = t
        self.config = config
        self._items = items

    @staticmethod
    def _schema(config: ViTConfig) -> dict[str, tuple[int, ...]]:
        return param_shapes(config)

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._items.items()}

    def numel(self) -> int:
        return sum(t.size for t in self._items.values())

    def equals(self, other: Mapping) -> bool:
        """Bit-exact equality of names, shapes and values."""
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({len(self)} tensors, {self.numel()} values)"


class ParamStore(_TensorMap):
    kind = "store"

    def replace(self, updates: Mapping[str, object]) -> "ParamStore":
        merged = dict(self._items)
        merged.update(updates)
        return ParamStore(self.config, merged)


class LoRAParams(_TensorMap):
    """Adapter factors for every query and value projection.

    ``A`` is (rank, dim) and projects down, ``B`` is (dim, rank) and projects
    up, so ``scaling * B @ A`` is a dim x dim update of rank <= ``rank``.
    """

    kind = "adapters"

    def __init__(self, config: ViTConfig, tensors: Mapping[str, object]) -> None:
        super().__init__(config, tensors)
        self.scaling = config.lora_scaling
        self.consumed = False

    @staticmethod
    def _schema(config: ViTConfig) -> dict[str, tuple[int, ...]]:
        return lora_shapes(config)

    def targets(self) -> list[str]:
        """Names of the adapted weight matrices."""
        return [f"block.{i}.attn.{t}.weight" for i in range(self.config.depth) for t in LORA_TARGETS]

    def delta(self, target: str) -> np.ndarray:
        prefix = target[: -len(".weight")]
        return self.scaling * (self[prefix + ".lora_B"].data @ self[prefix + ".lora_A"].data)


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_model(config: ViTConfig, seed: int) -> ParamStore:
    """Seeded init: truncated normal (std 0.02, cut at 2 std) for weights and
    embeddings, ones for norm gains, zeros for biases."""
    if not isinstance(config, ViTConfig):
        raise ConfigError("init_model needs a ViTConfig")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if is_bias(name):
            arr = np.zeros(shape)
        elif "norm" in name:
            arr = np.ones(shape)
        else:
            arr = _truncated_normal(rng, shape, INIT_STD)
        tensors[name] = Tensor(arr, name=name)
    return ParamStore(config, tensors)


def attach_lora(config: ViTConfig, seed: int) -> LoRAParams:
    """Fresh adapters: ``A ~ N(0, 0.02^2)``, ``B = 0``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in lora_shapes(config).items():
        if name.endswith("lora_A"):
            arr = rng.normal(0.0, INIT_STD, shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = Tensor(arr, name=name)
    return LoRAParams(config, tensors)


def prepare_images(images, config: ViTConfig) -> np.ndarray:
    """Pixel values in [0, 255] -> flattened patches in [-1, 1], (b, n, c*p*p)."""
    x = images.data if isinstance(images, Tensor) else np.asarray(images)
    c, s, p = config.channels, config.image_size, config.patch_size
    if x.ndim != 4 or x.shape[1:] != (c, s, s):
        raise T.ShapeError(f"expected images of shape (b, {c}, {s}, {s}), got {x.shape}")
    x = x.astype(np.float64) / 127.5 - 1.0
    b, g = x.shape[0], s // p
    x = x.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * p * p)


def forward_tensors(
    config: ViTConfig,
    params: Mapping[str, Tensor],
    lora: Mapping[str, Tensor] | None,
    patches: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Forward on already-patchified input; ``params``/``lora`` may hold tape leaves."""
    b = patches.shape[0]
    m, heads = config.dim, config.heads
    d = m // heads
    scaling = config.lora_scaling

    def proj(h: Tensor, prefix: str) -> Tensor:
        y = T.linear(h, params[prefix + ".weight"], params[prefix + ".bias"])
        if lora is not None and prefix + ".lora_A" in lora:
            down = T.linear(h, lora[prefix + ".lora_A"])
            up = T.linear(down, lora[prefix + ".lora_B"])
            y = y + up * scaling
        return y

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape(b, config.tokens, heads, d).transpose(0, 2, 1, 3)

    x = T.linear(Tensor(patches, _copy=False), params["patch_embed.weight"], params["patch_embed.bias"])
    cls = T.broadcast_to(T.reshape(params["cls_token"], (1, 1, m)), (b, 1, m))
    x = T.concat([cls, x], axis=1) + params["pos_embed"]

    for i in range(config.depth):
        p = f"block.{i}"
        h = T.layernorm(x, params[f"{p}.norm1.weight"], params[f"{p}.norm1.bias"])
        q = split_heads(proj(h, f"{p}.attn.q"))
        k = split_heads(proj(h, f"{p}.attn.k"))
        v = split_heads(proj(h, f"{p}.attn.v"))
        att = T.softmax(T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(d)), axis=-1)
        o = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, config.tokens, m)
        x = x + proj(o, f"{p}.attn.proj")
        h = T.layernorm(x, params[f"{p}.norm2.weight"], params[f"{p}.norm2.bias"])
        h = T.gelu(T.linear(h, params[f"{p}.mlp.fc1.weight"], params[f"{p}.mlp.fc1.bias"]))
        x = x + T.linear(h, params[f"{p}.mlp.fc2.weight"], params[f"{p}.mlp.fc2.bias"])

    x = T.layernorm(x, params["norm.weight"], params["norm.bias"])
    features = x[:, 0, :]
    logits = T.linear(features, params["head.weight"], params["head.bias"])
    return features, logits


def forward(params: ParamStore, lora: LoRAParams | None, images) -> tuple[Tensor, Tensor]:
    """Returns ``(features, logits)``: class-token backbone output (b, dim) and
    head output (b, num_classes)."""
    if lora is not None and lora.config != params.config:
        raise CompatibilityError("adapters were built for a different config")
    patches = prepare_images(images, params.config)
    return forward_tensors(params.config, params, lora, patches)


def predict(params: ParamStore, images, batch_size: int = 256) -> np.ndarray:
    """Argmax class predictions, evaluated in batches without the tape."""
    preds = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            _, logits = forward(params, None, images[start : start + batch_size])
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def merge_lora(params: ParamStore, lora: LoRAParams) -> ParamStore:
    """Fold adapters into the dense weights: ``W* = W + scaling * B @ A``.

    The adapters are marked consumed; merging them a second time raises.
    """
    if lora.config != params.config:
        raise CompatibilityError("adapters were built for a different config")
    if lora.consumed:
        raise ContractError("these adapters were already merged")
    updates = {}
    for target in lora.targets():
        updates[target] = Tensor(params[target].data + lora.delta(target), name=target)
    lora.consumed = True
    return params.replace(updates)


class ParamCount(NamedTuple):
    total: int
    trainable: int
    fraction: float


def param_count(
    params: ParamStore | ViTConfig, lora: LoRAParams | None = None, head_trainable: bool = False
) -> ParamCount:
    """Enumerate parameters. ``params`` may be a config to count without allocating.

    Trainable = adapter factors (+ head weight when ``head_trainable``); with
    no adapters everything counts as frozen.
    """
    cfg = params if isinstance(params, ViTConfig) else params.config
    shapes = param_shapes(cfg)
    total = sum(math.prod(s) for s in shapes.values())
    trainable = 0
    if lora is not None:
        n_lora = sum(t.size for t in lora.values())
        total += n_lora
        trainable = n_lora + (math.prod(shapes["head.weight"]) if head_trainable else 0)
    return ParamCount(total, trainable, trainable / total)
