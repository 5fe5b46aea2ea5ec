"""l-inf bounded adversaries: multi-step PGD and the single-step family."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from iat import ops
from iat.autodiff import NonFiniteError, ShapeError, Tensor, Trace, backward, no_trace
from iat.models import Classifier

LOSS_KINDS = ("ce", "cw", "kl")

# Step size relative to radius in the 8/255 image setting (alpha = 2/255).
EVAL_STEP_RATIO = 0.25


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_size: float
    steps: int
    rand_init: bool = True
    init_radius_factor: float = 1.0
    project_after_step: bool = True
    loss: str = "ce"
    clamp_domain: tuple[float, float] | None = None

    def __post_init__(self):
        if self.epsilon < 0 or self.step_size < 0 or self.steps < 0 or self.init_radius_factor < 0:
            raise ValueError(f"invalid attack config {self}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown attack loss {self.loss!r}")

    @classmethod
    def pgd(cls, epsilon: float, steps: int = 20, step_size: float | None = None, **kw) -> "AttackConfig":
        if step_size is None:
            step_size = EVAL_STEP_RATIO * epsilon
        return cls(epsilon, step_size, steps, **kw)

    @classmethod
    def fgsm(cls, epsilon: float, **kw) -> "AttackConfig":
        return cls(epsilon, epsilon, 1, rand_init=False, init_radius_factor=0.0, **kw)

    @classmethod
    def rs_fgsm(cls, epsilon: float, **kw) -> "AttackConfig":
        return cls(epsilon, 1.25 * epsilon, 1, init_radius_factor=1.0, project_after_step=True, **kw)

    @classmethod
    def n_fgsm(cls, epsilon: float, **kw) -> "AttackConfig":
        return cls(epsilon, epsilon, 1, init_radius_factor=2.0, project_after_step=False, **kw)

    def at_radius(self, epsilon: float) -> "AttackConfig":
        """Same attack at another radius, step size scaled proportionally."""
        ratio = self.step_size / self.epsilon if self.epsilon > 0 else EVAL_STEP_RATIO
        return replace(self, epsilon=epsilon, step_size=ratio * epsilon)


def clamp_to_domain(x: np.ndarray, domain) -> np.ndarray:
    if domain is None:
        return x
    return np.clip(x, domain[0], domain[1])


def linf_project(x_cand, x_ref, epsilon: float, clamp_domain=None) -> np.ndarray:
    x_cand = np.asarray(x_cand, dtype=np.float32)
    x_ref = np.asarray(x_ref, dtype=np.float32)
    if x_cand.shape != x_ref.shape:
        raise ShapeError(f"linf_project: shape mismatch {x_cand.shape} vs {x_ref.shape}")
    eps = np.float32(epsilon)
    out = np.clip(x_cand, x_ref - eps, x_ref + eps)
    return clamp_to_domain(out, clamp_domain)


def _objective(model: Classifier, x: Tensor, y, kind: str, ref_probs: Tensor | None) -> Tensor:
    logits = model(x).logits
    if kind == "ce":
        return ops.softmax_cross_entropy(logits, y)
    if kind == "cw":
        return ops.cw_margin_loss(logits, y)
    return ops.kl_divergence(ref_probs, ops.softmax(logits))


def input_gradient(model: Classifier, x: np.ndarray, y, kind: str = "ce", ref_probs=None):
    """(loss value, gradient of the batch loss with respect to x)."""
    with Trace() as tape:
        xt = tape.watch(Tensor(x))
        loss = _objective(model, xt, y, kind, ref_probs)
    g = backward(tape, loss)[xt]
    return loss.item(), g.data


def pgd_attack(model: Classifier, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Signed-gradient ascent on the configured loss inside the eps-ball.

    For ``loss="kl"`` the ascent objective is KL(f(x) || f(x')) and the start
    point is x + 0.001 * N(0, 1), since the KL gradient vanishes at x' = x.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if cfg.epsilon == 0 or (cfg.steps == 0 and not cfg.rand_init and cfg.loss != "kl"):
        return x.copy()
    rng = rng if rng is not None else np.random.default_rng(0)

    ref = None
    if cfg.loss == "kl":
        with no_trace():
            ref = ops.softmax(model(x).logits)
        x_adv = x + np.float32(0.001) * rng.standard_normal(x.shape).astype(np.float32)
    elif cfg.rand_init:
        r = cfg.epsilon * cfg.init_radius_factor
        x_adv = x + rng.uniform(-r, r, size=x.shape).astype(np.float32)
    else:
        x_adv = x.copy()
    x_adv = linf_project(x_adv, x, cfg.epsilon, cfg.clamp_domain)

    alpha = np.float32(cfg.step_size)
    for k in range(cfg.steps):
        try:
            _, g = input_gradient(model, x_adv, y, cfg.loss, ref)
        except FloatingPointError as e:
            raise NonFiniteError(f"pgd_attack: non-finite loss or gradient at iteration {k}") from e
        x_adv = linf_project(x_adv + alpha * np.sign(g), x, cfg.epsilon, cfg.clamp_domain)
    return x_adv


def single_step_attack(model: Classifier, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """x + psi(eta + alpha * sign(grad CE(f(x + eta)))), eta ~ U[-r, r], r = factor * eps."""
    x = np.asarray(x, dtype=np.float32)
    rng = rng if rng is not None else np.random.default_rng(0)
    r = cfg.epsilon * cfg.init_radius_factor
    eta = np.zeros_like(x)
    if r > 0:
        eta = rng.uniform(-r, r, size=x.shape).astype(np.float32)
    x_start = clamp_to_domain(x + eta, cfg.clamp_domain)
    try:
        _, g = input_gradient(model, x_start, y, "ce")
    except FloatingPointError as e:
        raise NonFiniteError("single_step_attack: non-finite loss or gradient at iteration 0") from e
    delta = eta + np.float32(cfg.step_size) * np.sign(g)
    if cfg.project_after_step:
        return linf_project(x + delta, x, cfg.epsilon, cfg.clamp_domain)
    return clamp_to_domain(x + delta, cfg.clamp_domain)


def cw_margin_loss(logits, labels) -> float:
    """Plain-value convenience wrapper around :func:`iat.ops.cw_margin_loss`."""
    with no_trace():
        return ops.cw_margin_loss(Tensor(logits), labels).item()
