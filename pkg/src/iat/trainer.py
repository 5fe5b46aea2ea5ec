"""Training loops for natural, SAT, TRADES, IAT, UIAT (momentum and one-off) and single-step AT."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from iat import objectives, ops
from iat.attacks import AttackConfig, pgd_attack, single_step_attack
from iat.autodiff import PassCounter, Tensor, Trace, backward, counting, no_trace
from iat.checkpoint import save_checkpoint
from iat.datasets import Dataset
from iat.evaluator import natural_accuracy, robust_accuracy
from iat.inverse import InverseConfig, UniversalBank, apply_universal, instance_inverse, universal_update
from iat.models import NetworkSpec, NetworkState, init
from iat.momentum import ProbStore, scaled_epoch

log = logging.getLogger(__name__)

BANK_OBJECTIVES = ("uiat", "uiat-oneoff", "singlestep-uiat")
SCHEDULES = ("cyclic", "constant")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, cause: Exception):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {cause}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    attack: AttackConfig
    inverse: InverseConfig
    objective: str = "uiat"
    lam: float = 3.5
    omega: float = 6.0
    universal_step_size: float | None = None
    single_step: AttackConfig | None = None
    gamma: float = 0.9
    momentum_start: int | None = None
    oneoff_epoch: int | None = None
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    schedule: str = "cyclic"
    seed: int = 0
    checkpoint_every: int = 0
    detach_inverse: bool = True
    post_update_inverse: bool = False
    report_examples: int = 2000

    def __post_init__(self):
        if self.objective not in objectives.KINDS:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if min(self.lr, self.weight_decay, self.momentum, self.lam, self.omega) < 0:
            raise ValueError("rates and weights must be non-negative")

    @classmethod
    def for_radius(cls, epsilon: float, objective: str = "uiat", clamp_domain=None, **kw) -> "TrainConfig":
        """Defaults scaled from the 8/255 image setting to radius ``epsilon``.

        PGD-10 with step eps/4, inverse radius eps/2, instance step eps/4 over
        5 iterations, universal step equal to the inverse radius.
        """
        inv_eps = epsilon / 2
        attack = AttackConfig.pgd(epsilon, steps=10, step_size=epsilon / 4, clamp_domain=clamp_domain)
        inverse = InverseConfig(inv_eps, inv_eps / 2, 5, beta=1.0, clamp_domain=clamp_domain)
        return cls(attack=attack, inverse=inverse, objective=objective, **kw)

    @property
    def start_epoch(self) -> int:
        return self.momentum_start if self.momentum_start is not None else scaled_epoch(75, 100, self.epochs)

    @property
    def one_off_epoch(self) -> int:
        return self.oneoff_epoch if self.oneoff_epoch is not None else scaled_epoch(80, 100, self.epochs)

    @property
    def universal(self) -> InverseConfig:
        step = self.universal_step_size if self.universal_step_size is not None else self.inverse.epsilon
        beta = 0.0 if self.objective == "singlestep-uiat" else self.inverse.beta
        return replace(self.inverse, step_size=step, beta=beta)

    @property
    def single_step_attack(self) -> AttackConfig:
        if self.single_step is not None:
            return self.single_step
        return AttackConfig.rs_fgsm(self.attack.epsilon, clamp_domain=self.attack.clamp_domain)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_nat_acc: float
    train_rob_acc: float
    loss: float
    seconds: float
    iterations: int
    forward_passes: float
    backward_passes: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return sum(e.iterations for e in self.epochs)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "lr", "train_nat_acc", "train_rob_acc", "loss", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.lr), repr(e.train_nat_acc), repr(e.train_rob_acc), repr(e.loss), f"{e.seconds:.3f}"])


@dataclass
class TrainResult:
    state: NetworkState
    report: TrainReport
    bank: UniversalBank | None = None
    store: ProbStore | None = None
    checkpoints: list[Path] = field(default_factory=list)


def cyclic_lr(iteration: float, total_iterations: int, peak: float) -> float:
    """Triangular one-cycle: 0 -> peak over the first half, peak -> 0 over the second."""
    if total_iterations <= 0:
        return 0.0
    if not 0 <= iteration <= total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations}]")
    return float(np.interp(iteration, [0, total_iterations / 2, total_iterations], [0.0, peak, 0.0]))


def nesterov_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray],
                    rate: float, momentum: float = 0.9, weight_decay: float = 0.0):
    """g = grad + wd*p; v' = mu*v + g; p' = p - rate*(g + mu*v')."""
    mu = np.float32(momentum)
    wd = np.float32(weight_decay)
    lr = np.float32(rate)
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch between parameter {p.shape}, gradient {g.shape}, velocity {v.shape}")
        g = g + wd * p
        v2 = mu * v + g
        p2 = p - lr * (g + mu * v2)
        if not (np.all(np.isfinite(p2)) and np.all(np.isfinite(v2))):
            raise FloatingPointError("sgd step produced non-finite values")
        new_p.append(p2.astype(np.float32))
        new_v.append(v2.astype(np.float32))
    return new_p, new_v


def sgd_nesterov_step(state, grads, velocity, rate: float, momentum: float = 0.9, weight_decay: float = 0.0):
    """Returns (updated state, updated velocity) for anything exposing ``params``/``with_params``."""
    params = [p.data for p in state.params]
    grads = [getattr(g, "data", g) for g in grads]
    new_p, new_v = nesterov_update(params, grads, velocity, rate, momentum, weight_decay)
    return state.with_params(Tensor(p) for p in new_p), new_v


def shuffle_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 0, epoch]).permutation(n)


def _probs(model, x) -> np.ndarray:
    with no_trace():
        return ops.softmax(model(x).logits).data


class _Loop:
    """Mutable per-run state; one instance per call to :func:`train`."""

    def __init__(self, data: Dataset, state: NetworkState, cfg: TrainConfig):
        self.data = data
        self.state = state
        self.cfg = cfg
        self.attack = cfg.attack
        if self.attack.clamp_domain is None and data.domain is not None:
            self.attack = replace(self.attack, clamp_domain=data.domain)
        self.inverse = cfg.inverse
        if self.inverse.clamp_domain is None and data.domain is not None:
            self.inverse = replace(self.inverse, clamp_domain=data.domain)
        self.universal = replace(cfg.universal, clamp_domain=self.inverse.clamp_domain)
        self.single = cfg.single_step_attack
        if self.single.clamp_domain is None and data.domain is not None:
            self.single = replace(self.single, clamp_domain=data.domain)
        self.bank = None
        if cfg.objective in BANK_OBJECTIVES:
            self.bank = UniversalBank.init(data.num_classes, data.input_shape, self.inverse.epsilon, seed=cfg.seed)
        self.store = None
        if cfg.objective == "uiat":
            self.store = ProbStore(len(data), data.num_classes, mode="momentum", gamma=cfg.gamma,
                                   start_epoch=cfg.start_epoch, oneoff_epoch=cfg.one_off_epoch)
        elif cfg.objective == "uiat-oneoff":
            self.store = ProbStore(len(data), data.num_classes, mode="one-off", gamma=cfg.gamma,
                                   start_epoch=cfg.start_epoch, oneoff_epoch=cfg.one_off_epoch)

    def _bank_step(self, x, y, x_adv) -> np.ndarray:
        upd = universal_update(self.bank, self.state, x, y, x_adv, self.universal)
        self.bank = upd.bank
        if self.cfg.post_update_inverse:
            x_inv = apply_universal(x, y, self.bank, self.universal.clamp_domain)
            return _probs(self.state, x_inv), x_inv
        return upd.inverse_probs, upd.inverse_inputs

    def loss_for_batch(self, idx: np.ndarray, epoch: int, batch: int):
        """Build adversaries/targets, then return the batch loss recorded on a fresh trace."""
        cfg = self.cfg
        kind = cfg.objective
        x, y = self.data.x[idx], self.data.y[idx]
        rng_attack = np.random.default_rng([cfg.seed, 1, epoch, batch])
        rng_inverse = np.random.default_rng([cfg.seed, 2, epoch, batch])
        model = self.state

        x_adv = None
        if kind in ("sat", "iat", "uiat", "uiat-oneoff"):
            x_adv = pgd_attack(model, x, y, self.attack, rng_attack)
        elif kind == "trades":
            x_adv = pgd_attack(model, x, y, replace(self.attack, loss="kl"), rng_attack)
        elif kind in ("singlestep", "singlestep-uiat"):
            x_adv = single_step_attack(model, x, y, self.single, rng_attack)

        target = None
        x_inv = None
        if kind == "iat":
            x_inv = instance_inverse(model, x, y, x_adv, self.inverse, rng_inverse)
            target = _probs(model, x_inv)
        elif kind == "uiat":
            current, x_inv = self._bank_step(x, y, x_adv)
            target = self.store.momentum_target(idx, current, epoch)
        elif kind == "uiat-oneoff":
            natural = _probs(model, x) if epoch < self.store.oneoff_epoch else None
            target = self.store.oneoff_target(idx, epoch, natural, lambda: self._bank_step(x, y, x_adv)[0])
        elif kind == "singlestep-uiat":
            target, x_inv = self._bank_step(x, y, None)

        with Trace() as tape:
            for p in model.params:
                tape.watch(p)
            if kind == "natural":
                loss = objectives.natural_loss(model, x, y)
            elif kind in ("sat", "singlestep"):
                loss = objectives.sat_loss(model, x_adv, y)
            elif kind == "trades":
                loss = objectives.trades_loss(model, x, x_adv, y, cfg.omega)
            elif kind == "singlestep-uiat":
                loss = objectives.singlestep_uiat_loss(model, x_adv, y, x_inv, cfg.lam,
                                                       detach=cfg.detach_inverse, inverse_probs=target)
            else:
                loss = objectives.uiat_loss(model, x_adv, y, target, cfg.lam)
        return tape, loss


def train(data: Dataset, spec: NetworkSpec, cfg: TrainConfig, out_dir=None, state: NetworkState | None = None) -> TrainResult:
    if state is None:
        state = init(spec, cfg.seed)
    loop = _Loop(data, state, cfg)
    report = TrainReport()
    result = TrainResult(state, report, loop.bank, loop.store)
    n = len(data)
    per_epoch = -(-n // cfg.batch_size)
    total = per_epoch * cfg.epochs
    velocity = [np.zeros_like(p.data) for p in state.params]
    report_idx = np.arange(min(n, cfg.report_examples) if cfg.report_examples > 0 else n)
    report_data = data.subset(report_idx)
    it = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_order(n, cfg.seed, epoch)
        losses = []
        counter = PassCounter()
        lr = 0.0
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            it += 1
            lr = cyclic_lr(it, total, cfg.lr) if cfg.schedule == "cyclic" else cfg.lr
            try:
                with counting(counter):
                    tape, loss = loop.loss_for_batch(idx, epoch, b)
                    grads = backward(tape, loss)
                loop.state, velocity = sgd_nesterov_step(
                    loop.state, [grads[p] for p in loop.state.params], velocity, lr, cfg.momentum, cfg.weight_decay)
            except FloatingPointError as e:
                raise TrainingDivergedError(epoch, b, e) from e
            losses.append(loss.item())
        nat = natural_accuracy(loop.state, report_data)
        rob = robust_accuracy(loop.state, report_data, loop.attack, seed=cfg.seed + 7919 * (epoch + 1))
        stats = EpochStats(epoch, lr, nat, rob, float(np.mean(losses)), time.perf_counter() - t0, per_epoch,
                           counter.forward_rows / n, counter.backward_calls / per_epoch)
        report.epochs.append(stats)
        log.info("epoch %d lr %.4f loss %.4f nat %.4f rob %.4f", epoch, lr, stats.loss, nat, rob)
        if out_dir is not None and cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
            path = Path(out_dir) / f"epoch_{epoch + 1:04d}.ckpt"
            save_checkpoint(loop.state, path, loop.bank)
            result.checkpoints.append(path)
    result.state = loop.state
    result.bank = loop.bank
    return result
