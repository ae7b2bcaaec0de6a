from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from loracl import tensor as T
from loracl.losses import LossWeights, XENT_ONLY, classification_loss, combined_loss, kl_feature_loss
from loracl.model import attach_lora, forward, forward_tensors, init_model, prepare_images
from loracl.tensor import Tensor


def test_default_weights():
    assert LossWeights() == LossWeights(0.6, 0.4)
    assert XENT_ONLY.kl == 0.0


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 1.0)


def test_classification_loss_uniform_logits():
    loss = classification_loss(np.zeros((3, 5)), np.array([0, 2, 4]))
    assert loss.item() == pytest.approx(np.log(5))


def test_kl_of_identical_features_is_zero():
    f = np.random.default_rng(0).normal(size=(4, 6))
    assert abs(kl_feature_loss(f, f).item()) < 1e-15


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-20, 20)), arrays(np.float64, (3, 5), elements=st.floats(-20, 20)))
def test_kl_non_negative(a, b):
    assert kl_feature_loss(a, b).item() >= -1e-12


def test_kl_gradient_only_reaches_finetuned_side():
    rng = np.random.default_rng(1)
    pre = Tensor(rng.normal(size=(2, 4)), requires_grad=True, name="pre")
    ft = Tensor(rng.normal(size=(2, 4)), requires_grad=True, name="ft")
    grads = T.backward(kl_feature_loss(pre, ft))
    assert set(grads) == {"ft"}


def test_kl_shape_mismatch():
    with pytest.raises(T.ShapeError):
        kl_feature_loss(np.zeros((2, 4)), np.zeros((2, 5)))


def test_kl_gradient_finite_differences():
    rng = np.random.default_rng(2)
    pre = rng.normal(size=(3, 6))
    assert T.grad_check(lambda t: kl_feature_loss(pre, t), rng.normal(size=(3, 6))) < 1e-6


def test_combined_loss_is_weighted_sum():
    c, k = Tensor(np.array(2.0)), Tensor(np.array(5.0))
    assert combined_loss(c, k).item() == pytest.approx(0.6 * 2 + 0.4 * 5)
    assert combined_loss(c, k, LossWeights(1.0, 0.0)).item() == 2.0


def test_kl_zero_at_first_lora_step(tiny_config):
    store = init_model(tiny_config, 0)
    x = np.random.default_rng(3).integers(0, 256, (4, 3, 8, 8)).astype(np.uint8)
    pre_feats, _ = forward(store, None, x)
    ft_feats, _ = forward(store, attach_lora(tiny_config, 1), x)
    assert kl_feature_loss(pre_feats, ft_feats).item() == 0.0


def test_combined_loss_gradient_through_model(tiny_config):
    store, lora = init_model(tiny_config, 0), attach_lora(tiny_config, 1)
    lora = lora.__class__(tiny_config, {k: v.data + 0.05 for k, v in lora.items()})
    x = np.random.default_rng(4).integers(0, 256, (2, 3, 8, 8)).astype(np.uint8)
    patches, labels = prepare_images(x, tiny_config), np.array([0, 3])
    pre_feats, _ = forward(store, None, x)
    name = "block.0.attn.v.lora_B"

    def f(t):
        adapters = dict(lora.items())
        adapters[name] = t
        feats, logits = forward_tensors(tiny_config, dict(store.items()), adapters, patches)
        return combined_loss(classification_loss(logits, labels), kl_feature_loss(pre_feats.data, feats))

    assert T.grad_check(f, lora[name].data) < 1e-5


def test_kl_direction_matters():
    a = np.array([[3.0, 0.0, -1.0, 0.5]])
    b = np.array([[0.0, 1.0, 0.0, -2.0]])
    assert abs(kl_feature_loss(a, b).item() - kl_feature_loss(b, a).item()) > 1e-3
    p = np.exp(a) / np.exp(a).sum()
    q = np.exp(b) / np.exp(b).sum()
    assert kl_feature_loss(a, b).item() == pytest.approx(float((p * np.log(p / q)).sum()))


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.0, 10.0), cls=st.floats(0.0, 5.0), kl=st.floats(0.0, 5.0))
def test_combined_loss_scales_linearly(c, cls, kl):
    ce, kd = Tensor(np.array(1.7)), Tensor(np.array(0.3))
    base = combined_loss(ce, kd, LossWeights(cls, kl)).item()
    assert combined_loss(ce, kd, LossWeights(c * cls, c * kl)).item() == pytest.approx(c * base, abs=1e-12)
