"""Training objectives. Each returns a scalar Tensor recorded on the active trace."""

from __future__ import annotations

import numpy as np

from iat import ops
from iat.autodiff import Tensor, no_trace
from iat.models import Classifier

KINDS = ("natural", "sat", "trades", "iat", "uiat", "uiat-oneoff", "singlestep", "singlestep-uiat")


def natural_loss(model: Classifier, x, y) -> Tensor:
    return ops.softmax_cross_entropy(model(x).logits, y)


def sat_loss(model: Classifier, x_adv, y) -> Tensor:
    return ops.softmax_cross_entropy(model(x_adv).logits, y)


def trades_loss(model: Classifier, x, x_adv, y, omega: float) -> Tensor:
    """CE(f(x), y) + omega * KL(f(x) || f(x_adv)), gradients through both sides."""
    nat = model(x).logits
    adv = model(x_adv).logits
    kl = ops.kl_divergence(ops.softmax(nat), ops.softmax(adv))
    return ops.softmax_cross_entropy(nat, y) + kl * omega


def _target(p, like: Tensor) -> Tensor:
    # a fresh leaf, so nothing upstream of the target is ever differentiated
    data = p.data if isinstance(p, Tensor) else np.asarray(p)
    return Tensor(data, dtype=like.dtype)


def uiat_loss(model: Classifier, x_adv, y, target, lam: float) -> Tensor:
    """CE(f(x_adv), y) + lam * KL(target || f(x_adv)).

    ``target`` is a probability array or Tensor; it is detached and
    receives no gradient.
    """
    logits = model(x_adv).logits
    loss = ops.softmax_cross_entropy(logits, y)
    return loss + ops.kl_divergence(_target(target, logits), ops.softmax(logits)) * lam


def singlestep_uiat_loss(model: Classifier, x_sgl, y, x_inv, lam: float, detach: bool = True, inverse_probs=None) -> Tensor:
    """CE(f(x_sgl), y) + lam * KL(f(x_inv) || f(x_sgl)).

    With ``detach`` the prediction on the inverse example is a constant
    target; ``inverse_probs`` may supply it when it was already computed.
    """
    if detach:
        if inverse_probs is None:
            with no_trace():
                inverse_probs = ops.softmax(model(x_inv).logits)
        return uiat_loss(model, x_sgl, y, inverse_probs, lam)
    p_inv = ops.softmax(model(x_inv).logits)
    logits = model(x_sgl).logits
    return ops.softmax_cross_entropy(logits, y) + ops.kl_divergence(p_inv, ops.softmax(logits)) * lam
