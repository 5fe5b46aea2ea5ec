"""Shared toy-scale training runs and the per-criterion acceptance summary."""

from __future__ import annotations

from collections import OrderedDict

import pytest

from iat.config import RunConfig
from iat.evaluator import natural_accuracy, robust_accuracy
from iat.trainer import train

TOY_SEEDS = (0, 1, 2)

# criterion id -> list of (test name, outcome, detail)
_CRITERIA: "OrderedDict[str, list[tuple[str, str, str]]]" = OrderedDict()


class ToyRuns:
    """Two-moons runs (n=2000 / 1000, MLP 2-64-64-2, eps=0.1, 40 epochs), trained once per session."""

    def __init__(self):
        self._runs = {}
        base = RunConfig()
        self.train_data, self.test_data = base.datasets()

    def config(self, kind: str, seed: int) -> RunConfig:
        return RunConfig.load(None, [f"objective.kind={kind}", f"train.seed={seed}"], env={})

    def get(self, kind: str, seed: int):
        key = (kind, seed)
        if key not in self._runs:
            cfg = self.config(kind, seed)
            res = train(self.train_data, cfg.network(self.train_data), cfg.train_config())
            nat = natural_accuracy(res.state, self.test_data)
            rob = robust_accuracy(res.state, self.test_data, cfg.eval_attack(), seed=seed)
            self._runs[key] = (res, nat, rob)
        return self._runs[key]

    def mean_accuracies(self, kind: str) -> tuple[float, float]:
        runs = [self.get(kind, s) for s in TOY_SEEDS]
        return sum(r[1] for r in runs) / len(runs), sum(r[2] for r in runs) / len(runs)


@pytest.fixture(scope="session")
def toy():
    return ToyRuns()


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo is not None):
        return
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    outcome = "PASS" if call.excinfo is None else "FAIL"
    _CRITERIA.setdefault(str(marker.args[0]), []).append((item.name, outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: (int("".join(ch for ch in c if ch.isdigit())), c)):
        entries = _CRITERIA[cid]
        status = "PASS" if all(o == "PASS" for _, o, _ in entries) else "FAIL"
        tr.write_line(f"criterion {cid:>3}: {status}")
        for name, outcome, detail in entries:
            tr.write_line(f"    {outcome} {name}" + (f" ({detail})" if detail else ""))
