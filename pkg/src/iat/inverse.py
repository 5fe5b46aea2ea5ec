"""Inverse adversarial examples: loss-minimizing perturbations in a small ball.

Both generation paths work in perturbation space so that an instance step
started from ``delta = z_c`` and a universal step on ``z_c`` share one
update rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from iat import ops
from iat.attacks import clamp_to_domain
from iat.autodiff import NonFiniteError, ShapeError, Tensor, Trace, backward, no_trace
from iat.models import Classifier

INIT_NOISE = 0.001


@dataclass(frozen=True)
class InverseConfig:
    epsilon: float
    step_size: float
    steps: int = 5
    beta: float = 1.0
    clamp_domain: tuple[float, float] | None = None

    def __post_init__(self):
        if self.epsilon < 0 or self.step_size < 0 or self.steps < 0 or self.beta < 0:
            raise ValueError(f"invalid inverse config {self}")


def inverse_loss(model: Classifier, x_inv: Tensor, x, x_adv, y, beta: float) -> Tensor:
    """CE(f(x_inv), y) + beta * [L1(F(x_inv), F(x)) - L1(F(x_inv), F(x_adv))].

    Features of ``x`` and ``x_adv`` are treated as constants.
    """
    return _inverse_loss(model, x_inv, x, x_adv, y, beta)[0]


def _inverse_loss(model, x_inv, x, x_adv, y, beta):
    out = model(x_inv)
    loss = ops.softmax_cross_entropy(out.logits, y)
    if beta == 0:
        return loss, out
    if x_adv is None:
        raise ValueError("inverse_loss: beta > 0 requires the adversarial example")
    with no_trace():
        f_nat = model(np.asarray(getattr(x, "data", x), dtype=x_inv.dtype)).features
        f_adv = model(np.asarray(getattr(x_adv, "data", x_adv), dtype=x_inv.dtype)).features
    triplet = ops.l1_feature_distance(out.features, f_nat) - ops.l1_feature_distance(out.features, f_adv)
    return loss + triplet * beta, out


def per_example_inverse_loss(model: Classifier, x_inv, x, x_adv, y, beta: float, batch_size: int = 1024) -> np.ndarray:
    """Unreduced inverse loss, one value per example (no trace recorded)."""
    y = np.asarray(y, dtype=np.int64)
    out = np.empty(len(y), dtype=np.float64)
    with no_trace():
        for i in range(0, len(y), batch_size):
            sl = slice(i, i + batch_size)
            o = model(np.asarray(x_inv[sl], dtype=np.float32))
            loss = ops.per_example_cross_entropy(o.logits.data, y[sl]).astype(np.float64)
            if beta:
                f = o.features.data.reshape(len(loss), -1)
                f_nat = model(np.asarray(x[sl], dtype=np.float32)).features.data.reshape(len(loss), -1)
                f_adv = model(np.asarray(x_adv[sl], dtype=np.float32)).features.data.reshape(len(loss), -1)
                loss += beta * (np.abs(f - f_nat).mean(axis=1) - np.abs(f - f_adv).mean(axis=1))
            out[sl] = loss
    return out


def _inverse_gradient(model, x_inv, x, x_adv, y, beta):
    with Trace() as tape:
        xt = tape.watch(Tensor(x_inv))
        loss = inverse_loss(model, xt, x, x_adv, y, beta)
    return backward(tape, loss)[xt].data


def descend(delta: np.ndarray, grad: np.ndarray, step_size: float, epsilon: float) -> np.ndarray:
    """delta - step * sign(grad), projected to the eps-ball around zero."""
    eps = np.float32(epsilon)
    return np.clip(delta - np.float32(step_size) * np.sign(grad), -eps, eps)


def _domain_delta(x: np.ndarray, delta: np.ndarray, domain) -> np.ndarray:
    # Only coordinates the domain actually cuts are rewritten.
    if domain is None:
        return delta
    xi = x + delta
    clipped = clamp_to_domain(xi, domain)
    return np.where(clipped != xi, clipped - x, delta)


def inverse_step(model: Classifier, x, y, x_adv, delta, cfg: InverseConfig) -> np.ndarray:
    """One projected signed-gradient descent step; returns the new perturbation."""
    x = np.asarray(x, dtype=np.float32)
    g = _inverse_gradient(model, x + delta, x, x_adv, y, cfg.beta)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("inverse_step: non-finite gradient")
    return _domain_delta(x, descend(delta, g, cfg.step_size, cfg.epsilon), cfg.clamp_domain)


def instance_inverse(model: Classifier, x, y, x_adv, cfg: InverseConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Instance-wise inverse adversaries, started from x + 0.001 * N(0, 1)."""
    x = np.asarray(x, dtype=np.float32)
    if cfg.epsilon == 0:
        return x.copy()
    rng = rng if rng is not None else np.random.default_rng(0)
    eps = np.float32(cfg.epsilon)
    delta = np.clip(np.float32(INIT_NOISE) * rng.standard_normal(x.shape).astype(np.float32), -eps, eps)
    delta = _domain_delta(x, delta, cfg.clamp_domain)
    for k in range(cfg.steps):
        try:
            delta = inverse_step(model, x, y, x_adv, delta, cfg)
        except FloatingPointError as e:
            raise NonFiniteError(f"instance_inverse: non-finite gradient at iteration {k}") from e
    return x + delta


@dataclass
class UniversalBank:
    """One input-shaped perturbation per class, kept inside the eps'-ball."""

    z: np.ndarray
    epsilon: float
    seed: int = 0

    @classmethod
    def init(cls, num_classes: int, input_shape, epsilon: float, seed: int = 0) -> "UniversalBank":
        rng = np.random.default_rng(seed)
        z = INIT_NOISE * rng.standard_normal((num_classes, *input_shape))
        eps = np.float32(epsilon)
        return cls(np.clip(z.astype(np.float32), -eps, eps), float(epsilon), seed)

    @classmethod
    def zeros(cls, num_classes: int, input_shape, epsilon: float) -> "UniversalBank":
        return cls(np.zeros((num_classes, *input_shape), dtype=np.float32), float(epsilon))

    @property
    def num_classes(self) -> int:
        return self.z.shape[0]

    def max_norm(self) -> float:
        return float(np.abs(self.z).max()) if self.z.size else 0.0

    def copy(self) -> "UniversalBank":
        return UniversalBank(self.z.copy(), self.epsilon, self.seed)


def apply_universal(x, y, bank: UniversalBank, clamp_domain=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= bank.num_classes):
        raise ValueError(f"apply_universal: label out of range [0, {bank.num_classes})")
    if x.shape[1:] != bank.z.shape[1:]:
        raise ShapeError(f"apply_universal: inputs {x.shape[1:]} vs bank {bank.z.shape[1:]}")
    return clamp_to_domain(x + bank.z[y], clamp_domain)


@dataclass
class UniversalUpdate:
    bank: UniversalBank
    inverse_inputs: np.ndarray
    inverse_probs: np.ndarray = field(repr=False)


def universal_update(bank: UniversalBank, model: Classifier, x, y, x_adv, cfg: InverseConfig) -> UniversalUpdate:
    """One signed step per class on the summed inverse loss of its batch members.

    ``cfg.step_size`` is the universal step; ``cfg.steps`` is ignored. The
    returned probabilities are f(x + z_y) under the pre-update bank, taken
    from the same forward passes that produced the gradients.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("universal_update: empty batch")
    x_inv = apply_universal(x, y, bank, cfg.clamp_domain)
    probs = np.zeros((len(x), bank.num_classes), dtype=np.float32)
    members = []
    with Trace() as tape:
        total = None
        for c in np.unique(y):
            idx = np.flatnonzero(y == c)
            xc = tape.watch(Tensor(x_inv[idx]))
            adv = None if x_adv is None else np.asarray(x_adv)[idx]
            lc, out = _inverse_loss(model, xc, x[idx], adv, y[idx], cfg.beta)
            probs[idx] = ops.softmax_array(out.logits.data)
            members.append((int(c), xc))
            # per-class loss is a sum over members, not a mean
            lc = lc * float(len(idx))
            total = lc if total is None else total + lc
    grads = backward(tape, total)

    new_z = bank.z.copy()
    for c, xc in members:
        g = grads[xc].data.sum(axis=0)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"universal_update: non-finite gradient for class {c}")
        new_z[c] = descend(bank.z[c], g, cfg.step_size, cfg.epsilon)
    return UniversalUpdate(UniversalBank(new_z, bank.epsilon, bank.seed), x_inv, probs)

