"""Robust accuracy, accuracy-vs-epsilon curves, and group-split analysis.

A negative epsilon on a curve means an inverse perturbation of radius
|epsilon|: cross-entropy descent instead of ascent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from iat import ops
from iat.attacks import AttackConfig, pgd_attack
from iat.datasets import Dataset
from iat.inverse import InverseConfig, instance_inverse
from iat.models import Classifier, predict


class CurveError(ValueError):
    pass


@dataclass(frozen=True)
class CurveSpec:
    epsilons: tuple[float, ...]
    attack: AttackConfig
    groups: bool = False

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if list(eps) != sorted(eps):
            raise CurveError("epsilon grid must be sorted ascending")
        object.__setattr__(self, "epsilons", eps)

    @property
    def steps(self) -> int:
        return self.attack.steps


class CurveRow(NamedTuple):
    epsilon: float
    accuracy: float
    top: float | None = None
    bottom: float | None = None


def parse_grid(text: str) -> tuple[float, ...]:
    """``start:stop:step``, both endpoints included when step divides the range."""
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError as e:
        raise CurveError(f"bad grid {text!r}; expected start:stop:step") from e
    if step <= 0 or stop < start:
        raise CurveError(f"bad grid {text!r}; need step > 0 and stop >= start")
    n = (stop - start) / step
    count = int(math.floor(n + 1e-9)) + 1
    return tuple(round(start + i * step, 12) for i in range(count))


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def _domain_attack(cfg: AttackConfig, data: Dataset) -> AttackConfig:
    if cfg.clamp_domain is None and data.domain is not None:
        return replace(cfg, clamp_domain=data.domain)
    return cfg


def correct_under_attack(model: Classifier, data: Dataset, cfg: AttackConfig, seed: int = 0, batch_size: int = 512) -> np.ndarray:
    """Boolean per-example correctness after attacking with ``cfg``."""
    cfg = _domain_attack(cfg, data)
    out = np.zeros(len(data), dtype=bool)
    for b, sl in enumerate(_batches(len(data), batch_size)):
        x, y = data.x[sl], data.y[sl]
        if cfg.epsilon > 0:
            x = pgd_attack(model, x, y, cfg, np.random.default_rng([seed, b]))
        out[sl] = predict(model, x).argmax(axis=1) == y
    return out


def correct_under_inverse(model: Classifier, data: Dataset, epsilon: float, steps: int, step_size: float,
                          seed: int = 0, batch_size: int = 512) -> np.ndarray:
    cfg = InverseConfig(epsilon, step_size, steps, beta=0.0, clamp_domain=data.domain)
    out = np.zeros(len(data), dtype=bool)
    for b, sl in enumerate(_batches(len(data), batch_size)):
        x, y = data.x[sl], data.y[sl]
        x_inv = instance_inverse(model, x, y, None, cfg, np.random.default_rng([seed, b]))
        out[sl] = predict(model, x_inv).argmax(axis=1) == y
    return out


def natural_accuracy(model: Classifier, data: Dataset) -> float:
    return float(np.mean(predict(model, data.x).argmax(axis=1) == data.y))


def robust_accuracy(model: Classifier, data: Dataset, cfg: AttackConfig, seed: int = 0) -> float:
    return float(np.mean(correct_under_attack(model, data, cfg, seed)))


def _correct_at(model, data, eps: float, spec: CurveSpec, seed: int) -> np.ndarray:
    if eps > 0:
        return correct_under_attack(model, data, spec.attack.at_radius(eps), seed)
    if eps < 0:
        cfg = spec.attack.at_radius(-eps)
        return correct_under_inverse(model, data, -eps, cfg.steps, cfg.step_size, seed)
    return predict(model, data.x).argmax(axis=1) == data.y


def accuracy_curve(model: Classifier, data: Dataset, spec: CurveSpec, seed: int = 0) -> list[CurveRow]:
    top = bottom = None
    if spec.groups:
        top, bottom = group_split(model, data)
    rows = []
    for eps in spec.epsilons:
        ok = _correct_at(model, data, eps, spec, seed)
        if spec.groups:
            rows.append(CurveRow(eps, float(ok.mean()), float(ok[top].mean()), float(ok[bottom].mean())))
        else:
            rows.append(CurveRow(eps, float(ok.mean())))
    return rows


def group_split(model: Classifier, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Rank by natural cross-entropy (ties by index); first ceil(N/2) are the top half."""
    if len(data) < 2:
        raise CurveError("group_split needs at least two examples")
    losses = ops.per_example_cross_entropy(predict(model, data.x), data.y)
    order = np.argsort(losses, kind="stable")
    half = (len(data) + 1) // 2
    return np.sort(order[:half]), np.sort(order[half:])


def curve_difference(curve_a, curve_b) -> list[tuple[float, float]]:
    eps_a = [r[0] for r in curve_a]
    eps_b = [r[0] for r in curve_b]
    if len(eps_a) != len(eps_b) or any(abs(a - b) > 1e-12 for a, b in zip(eps_a, eps_b)):
        raise CurveError("curve grids differ")
    return [(ra[0], ra[1] - rb[1]) for ra, rb in zip(curve_a, curve_b)]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_curve_csv(path, rows: list[CurveRow]) -> None:
    """Long format: ``epsilon,accuracy[,group]``."""
    grouped = any(r.top is not None for r in rows)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if grouped:
            w.writerow(["epsilon", "accuracy", "group"])
            for r in rows:
                w.writerow([_fmt(r.epsilon), _fmt(r.accuracy), "all"])
                w.writerow([_fmt(r.epsilon), _fmt(r.top), "top"])
                w.writerow([_fmt(r.epsilon), _fmt(r.bottom), "bottom"])
        else:
            w.writerow(["epsilon", "accuracy"])
            for r in rows:
                w.writerow([_fmt(r.epsilon), _fmt(r.accuracy)])


def write_difference_csv(path, diff) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epsilon", "delta"])
        for eps, d in diff:
            w.writerow([_fmt(eps), _fmt(d)])
