"""Command-line entry point: ``iat train|eval|compare|gradcheck``.

Exit codes: 0 success, 1 check failure, 2 usage/config/input error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from iat import gradcheck
from iat.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from iat.config import ConfigError, RunConfig
from iat.datasets import Dataset, DatasetError
from iat.evaluator import (CurveError, CurveSpec, accuracy_curve, curve_difference, natural_accuracy, parse_grid,
                           robust_accuracy, write_curve_csv, write_difference_csv)
from iat.trainer import TrainingDivergedError, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("iat")


class UsageError(Exception):
    pass


class Outputs:
    """Files written under ``--out``; the manifest lists each one."""

    def __init__(self, root):
        self.root = Path(root)
        self.paths: list[Path] = []

    def path(self, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.root / name
        self.paths.append(p)
        return p

    def add(self, p: Path) -> None:
        self.paths.append(Path(p))

    def write_manifest(self) -> Path:
        m = self.root / "manifest.txt"
        m.write_text("".join(f"{p.relative_to(self.root)}\n" for p in self.paths))
        return m


def _config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None), args.set or [])
    if getattr(args, "out", None):
        cfg.set("output.dir", args.out, "--out")
    return cfg


def _echo(cfg: RunConfig, args) -> None:
    print("# effective configuration")
    print(cfg.to_text(), end="")
    print(f"# threads = {args.threads}")
    sys.stdout.flush()


def _compatible(state, data: Dataset, what: str) -> None:
    if tuple(state.spec.input_shape) != tuple(data.input_shape) or state.spec.num_classes != data.num_classes:
        raise UsageError(f"{what}: model expects input {state.spec.input_shape} with {state.spec.num_classes} classes, "
                         f"data has {data.input_shape} with {data.num_classes}")


def cmd_train(args) -> int:
    cfg = _config(args)
    _echo(cfg, args)
    train_data, test_data = cfg.datasets()
    spec = cfg.network(train_data)
    tcfg = cfg.train_config(train_data.domain)
    out = Outputs(cfg["output.dir"])
    out.root.mkdir(parents=True, exist_ok=True)
    cfg_path = out.path("config.txt")
    cfg_path.write_text(cfg.to_text())
    result = train(train_data, spec, tcfg, out_dir=out.root)
    for p in result.checkpoints:
        out.add(p)
    save_checkpoint(result.state, out.path("model.ckpt"), result.bank)
    if result.bank is not None:
        np.save(out.path("bank.npy"), result.bank.z)
    result.report.write_csv(out.path("train.csv"))
    out.write_manifest()
    nat = natural_accuracy(result.state, test_data)
    rob = robust_accuracy(result.state, test_data, cfg.eval_attack(test_data.domain), seed=tcfg.seed)
    print(f"natural_accuracy {nat:.4f}")
    print(f"robust_accuracy {rob:.4f}")
    return EXIT_OK


def _curve_spec(cfg: RunConfig, grid: str, groups: bool, domain) -> CurveSpec:
    return CurveSpec(parse_grid(grid), cfg.eval_attack(domain), groups=groups)


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.eps is not None:
        cfg.set("attack.epsilon", str(args.eps), "--eps")
    _echo(cfg, args)
    state = load_checkpoint(args.checkpoint)
    _, data = cfg.datasets()
    _compatible(state, data, str(args.checkpoint))
    spec = _curve_spec(cfg, args.curve, args.groups, data.domain) if args.curve else None
    nat = natural_accuracy(state, data)
    eps = cfg["attack.epsilon"]
    rob = robust_accuracy(state, data, cfg.eval_attack(data.domain), seed=cfg["train.seed"]) if eps > 0 else nat
    print(f"natural_accuracy {nat:.4f}")
    print(f"robust_accuracy {rob:.4f} (eps={eps:g}, pgd-{cfg['attack.eval_steps']})")
    if spec is not None:
        rows = accuracy_curve(state, data, spec, seed=cfg["train.seed"])
        out = Outputs(cfg["output.dir"])
        write_curve_csv(out.path("curve.csv"), rows)
        out.write_manifest()
        for r in rows:
            extra = f" top {r.top:.4f} bottom {r.bottom:.4f}" if r.top is not None else ""
            print(f"eps {r.epsilon:+.4f} accuracy {r.accuracy:.4f}{extra}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    _echo(cfg, args)
    a = load_checkpoint(args.checkpoint_a)
    b = load_checkpoint(args.checkpoint_b)
    if tuple(a.spec.input_shape) != tuple(b.spec.input_shape) or a.spec.num_classes != b.spec.num_classes:
        raise UsageError("checkpoints disagree on input shape or class count")
    _, data = cfg.datasets()
    _compatible(a, data, str(args.checkpoint_a))
    spec = _curve_spec(cfg, args.curve, False, data.domain)
    curve_a = accuracy_curve(a, data, spec, seed=cfg["train.seed"])
    curve_b = accuracy_curve(b, data, spec, seed=cfg["train.seed"])
    diff = curve_difference(curve_a, curve_b)
    out = Outputs(cfg["output.dir"])
    write_curve_csv(out.path("curve_a.csv"), curve_a)
    write_curve_csv(out.path("curve_b.csv"), curve_b)
    path = out.path("difference.csv")
    write_difference_csv(path, diff)
    out.write_manifest()
    print("epsilon,accuracy_a,accuracy_b,delta")
    for ra, rb, (eps, d) in zip(curve_a, curve_b, diff):
        print(f"{eps:g},{ra.accuracy:.4f},{rb.accuracy:.4f},{d:+.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    print(f"# gradcheck seeds {args.seed}..{args.seed + args.seeds - 1} h={gradcheck.H} tolerance={args.tolerance}")
    worst: dict[str, gradcheck.CheckResult] = {}
    for s in range(args.seed, args.seed + args.seeds):
        for r in gradcheck.run_suite(s, args.tolerance):
            prev = worst.get(r.name)
            if prev is None:
                worst[r.name] = r
            else:
                worst[r.name] = gradcheck.CheckResult(r.name, max(prev.worst, r.worst), prev.checked + r.checked,
                                                      prev.skipped + r.skipped, args.tolerance)
    failed = []
    for name, r in worst.items():
        status = "ok" if r.passed else "FAIL"
        print(f"{name:32s} worst_rel_err {r.worst:.3e} checked {r.checked:5d} skipped {r.skipped:4d} {status}")
        if not r.passed:
            failed.append(name)
    if failed:
        print("failing ops: " + ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iat", description="Inverse adversarial training on small models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_config=True):
        if with_config:
            sp.add_argument("--config", help="flat 'section.key = value' file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        sp.add_argument("--out", metavar="DIR", help="artifact directory (overrides output.dir)")
        sp.add_argument("--threads", type=int, default=1, help="worker cap (default 1)")

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config")
    common(t, with_config=False)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="natural/robust accuracy of a checkpoint")
    e.add_argument("checkpoint")
    common(e)
    e.add_argument("--eps", type=float, help="attack radius (overrides attack.epsilon)")
    e.add_argument("--curve", metavar="START:STOP:STEP", help="accuracy-vs-epsilon grid; negative = inverse")
    e.add_argument("--groups", action="store_true", help="add top/bottom half group columns")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="accuracy-curve difference of two checkpoints")
    c.add_argument("checkpoint_a")
    c.add_argument("checkpoint_b")
    common(c)
    c.add_argument("--curve", metavar="START:STOP:STEP", default="0:0.2:0.05")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gradcheck", help="finite-difference check of every gradient rule")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    g.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE)
    g.add_argument("--threads", type=int, default=1, help="worker cap (default 1)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def _attach_negative_values(argv: list[str]) -> list[str]:
    # argparse reads "--curve -0.1:0.1:0.05" as two options; glue the value on
    out: list[str] = []
    for a in argv:
        if out and out[-1] in ("--curve", "--eps") and a.startswith("-"):
            out[-1] = f"{out[-1]}={a}"
        else:
            out.append(a)
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_attach_negative_values(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, CheckpointError, DatasetError, CurveError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
