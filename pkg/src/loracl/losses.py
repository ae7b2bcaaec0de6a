"""Training objectives: cross-entropy, feature KL against the frozen backbone,
and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    cls: float = 0.6
    kl: float = 0.4

    def __post_init__(self) -> None:
        if self.cls < 0 or self.kl < 0:
            raise ValueError(f"loss weights must be >= 0, got {self}")


XENT_ONLY = LossWeights(1.0, 0.0)


def classification_loss(logits, labels) -> Tensor:
    return T.cross_entropy(logits, labels)


def kl_feature_loss(pre_features, ft_features) -> Tensor:
    """KL(softmax(pre) || softmax(ft)) over the feature axis, batch mean.

    The pretrained features are the reference distribution and are detached,
    so only ``ft_features`` receives gradient.
    """
    pre = T.as_tensor(pre_features)
    ft = T.as_tensor(ft_features)
    if pre.shape != ft.shape:
        raise T.ShapeError(f"feature shape mismatch: {pre.shape} vs {ft.shape}")
    p = T.softmax(pre.detach(), axis=-1)
    return T.kl_div(p, T.softmax(ft, axis=-1))


def combined_loss(cls, kl, w: LossWeights = LossWeights()) -> Tensor:
    return T.add(T.mul(cls, w.cls), T.mul(kl, w.kl))
