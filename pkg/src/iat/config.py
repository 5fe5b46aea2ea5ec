"""Flat ``section.key = value`` run configuration with a fixed schema."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from iat.attacks import AttackConfig
from iat.datasets import Dataset, gaussian_blobs, load_idx, two_moons
from iat.inverse import InverseConfig
from iat.models import NetworkSpec
from iat.objectives import KINDS
from iat.trainer import TrainConfig

SEED_ENV = "IAT_SEED"


class ConfigError(ValueError):
    pass


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        return None if text.lower() in ("auto", "none", "") else parse(text)

    return inner


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def inner(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return inner


# key -> (parser, default). Defaults are stored as text so echoing is uniform.
SCHEMA: dict[str, tuple[Callable[[str], Any], str]] = {
    "data.kind": (_choice("two-moons", "blobs", "idx"), "two-moons"),
    "data.n": (int, "2000"),
    "data.noise": (float, "0.3"),
    "data.seed": (int, "100"),
    "data.test_n": (int, "1000"),
    "data.test_seed": (int, "200"),
    "data.blob_sd": (float, "0.5"),
    "data.train_images": (str, ""),
    "data.train_labels": (str, ""),
    "data.test_images": (str, ""),
    "data.test_labels": (str, ""),
    "model.kind": (_choice("mlp", "small-cnn"), "mlp"),
    "model.hidden": (_ints, "64,64"),
    "model.channels": (_ints, "16,32"),
    "model.kernel": (int, "3"),
    "attack.epsilon": (float, "0.1"),
    "attack.steps": (int, "10"),
    "attack.step_size": (_optional(float), "auto"),
    "attack.eval_steps": (int, "20"),
    "attack.loss": (_choice("ce", "cw"), "ce"),
    "inverse.epsilon": (_optional(float), "auto"),
    "inverse.step_size": (_optional(float), "auto"),
    "inverse.steps": (int, "5"),
    "inverse.beta": (float, "1.0"),
    "inverse.universal_step_size": (_optional(float), "auto"),
    "objective.kind": (_choice(*KINDS), "uiat"),
    "objective.lambda": (float, "3.5"),
    "objective.omega": (float, "6.0"),
    "objective.gamma": (float, "0.9"),
    "objective.momentum_start": (_optional(int), "auto"),
    "objective.oneoff_epoch": (_optional(int), "auto"),
    "objective.single_step": (_choice("rs-fgsm", "n-fgsm", "fgsm"), "rs-fgsm"),
    "train.epochs": (int, "40"),
    "train.batch_size": (int, "128"),
    "train.lr": (float, "0.1"),
    "train.weight_decay": (float, "5e-4"),
    "train.momentum": (float, "0.9"),
    "train.schedule": (_choice("cyclic", "constant"), "cyclic"),
    "train.seed": (int, "0"),
    "train.checkpoint_every": (int, "0"),
    "train.report_examples": (int, "2000"),
    "output.dir": (str, "runs/latest"),
}


def _split(line: str, where: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"{where}: expected 'section.key = value', got {line!r}")
    key, value = (s.strip() for s in line.split("=", 1))
    if key.count(".") != 1:
        raise ConfigError(f"{where}: key {key!r} must have exactly one dot")
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown key {key!r}")
    return key, value


@dataclass
class RunConfig:
    raw: dict[str, str] = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __post_init__(self):
        self.values: dict[str, Any] = {}
        for key, text in self.raw.items():
            self._parse(key, text, "config")

    def _parse(self, key: str, text: str, where: str) -> None:
        parse = SCHEMA[key][0]
        try:
            self.values[key] = parse(text)
        except ValueError as e:
            raise ConfigError(f"{where}: bad value for {key}: {e}") from e
        self.raw[key] = text

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, text: str, where: str = "override") -> None:
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        self._parse(key, text, where)

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if line:
                key, value = _split(line, f"{source}:{n}")
                cfg.set(key, value, f"{source}:{n}")
        return cfg

    @classmethod
    def load(cls, path=None, overrides=(), env=None) -> "RunConfig":
        """File (optional), then ``--set key=value`` overrides, then $IAT_SEED."""
        if path is None:
            cfg = cls()
        else:
            try:
                text = Path(path).read_text()
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from e
            cfg = cls.parse(text, str(path))
        for item in overrides:
            key, value = _split(item, "--set")
            cfg.set(key, value, "--set")
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            cfg.set("train.seed", env[SEED_ENV], SEED_ENV)
        return cfg

    def to_text(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in SCHEMA)

    # -- builders -----------------------------------------------------------

    def datasets(self) -> tuple[Dataset, Dataset]:
        kind = self["data.kind"]
        if kind == "two-moons":
            return (two_moons(self["data.n"], self["data.noise"], self["data.seed"]),
                    two_moons(self["data.test_n"], self["data.noise"], self["data.test_seed"]))
        if kind == "blobs":
            centers = [[-1.0, 0.0], [1.0, 0.0], [0.0, 1.5]]
            sd = self["data.blob_sd"]
            return (gaussian_blobs(self["data.n"], centers, sd, self["data.seed"]),
                    gaussian_blobs(self["data.test_n"], centers, sd, self["data.test_seed"]))
        paths = [self[f"data.{k}"] for k in ("train_images", "train_labels", "test_images", "test_labels")]
        if not all(paths):
            raise ConfigError("data.kind = idx needs train/test image and label paths")
        train = load_idx(paths[0], paths[1])
        test = load_idx(paths[2], paths[3], train.num_classes)
        return train, test

    def network(self, data: Dataset) -> NetworkSpec:
        try:
            return NetworkSpec(self["model.kind"], data.input_shape, data.num_classes, hidden=self["model.hidden"],
                               channels=self["model.channels"], kernel=self["model.kernel"])
        except ValueError as e:
            raise ConfigError(f"model: {e}") from e

    def attack(self, domain=None) -> AttackConfig:
        eps = self["attack.epsilon"]
        step = self["attack.step_size"]
        return AttackConfig(eps, step if step is not None else eps / 4, self["attack.steps"],
                            loss=self["attack.loss"], clamp_domain=domain)

    def eval_attack(self, domain=None) -> AttackConfig:
        return AttackConfig.pgd(self["attack.epsilon"], steps=self["attack.eval_steps"], clamp_domain=domain)

    def train_config(self, domain=None) -> TrainConfig:
        eps = self["attack.epsilon"]
        inv_eps = self["inverse.epsilon"] if self["inverse.epsilon"] is not None else eps / 2
        inv_step = self["inverse.step_size"] if self["inverse.step_size"] is not None else inv_eps / 2
        single = {"rs-fgsm": AttackConfig.rs_fgsm, "n-fgsm": AttackConfig.n_fgsm, "fgsm": AttackConfig.fgsm}
        try:
            return TrainConfig(
                attack=self.attack(domain),
                inverse=InverseConfig(inv_eps, inv_step, self["inverse.steps"], self["inverse.beta"], domain),
                objective=self["objective.kind"],
                lam=self["objective.lambda"],
                omega=self["objective.omega"],
                universal_step_size=self["inverse.universal_step_size"],
                single_step=single[self["objective.single_step"]](eps, clamp_domain=domain),
                gamma=self["objective.gamma"],
                momentum_start=self["objective.momentum_start"],
                oneoff_epoch=self["objective.oneoff_epoch"],
                epochs=self["train.epochs"],
                batch_size=self["train.batch_size"],
                lr=self["train.lr"],
                weight_decay=self["train.weight_decay"],
                momentum=self["train.momentum"],
                schedule=self["train.schedule"],
                seed=self["train.seed"],
                checkpoint_every=self["train.checkpoint_every"],
                report_examples=self["train.report_examples"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e
