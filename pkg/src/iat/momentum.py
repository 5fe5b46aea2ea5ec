"""Per-example probability targets keyed by stable dataset index."""

from __future__ import annotations

import csv
from typing import Callable

import numpy as np

from iat.ops import ProbabilityError, check_probabilities

MODES = ("momentum", "one-off")


class StoreError(RuntimeError):
    pass


def scaled_epoch(reference: int, reference_total: int, epochs: int) -> int:
    """Scale an epoch index from a reference budget (e.g. 75 of 100) to ``epochs``."""
    return int(np.floor(reference * epochs / reference_total + 0.5))


class ProbStore:
    def __init__(self, size: int, num_classes: int, *, mode: str = "momentum", gamma: float = 0.9,
                 start_epoch: int = 75, oneoff_epoch: int = 80):
        if mode not in MODES:
            raise ValueError(f"unknown store mode {mode!r}")
        if not 0 <= gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        self.mode = mode
        self.gamma = float(gamma)
        self.start_epoch = int(start_epoch)
        self.oneoff_epoch = int(oneoff_epoch)
        self.probs = np.zeros((size, num_classes), dtype=np.float32)
        self.written_at = np.full(size, -1, dtype=np.int64)
        self.history: list[tuple[int, int, np.ndarray]] = []
        self.keep_history = False

    def __len__(self) -> int:
        return len(self.probs)

    def _index(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self.probs)):
            raise IndexError(f"store index out of range [0, {len(self.probs)})")
        return idx

    def put(self, idx, probs, epoch: int) -> None:
        idx = self._index(idx)
        probs = np.asarray(probs, dtype=np.float32).reshape(len(idx), -1)
        check_probabilities(probs, "stored probabilities")
        self.probs[idx] = probs
        self.written_at[idx] = epoch
        if self.keep_history:
            for i, p in zip(idx, probs):
                self.history.append((int(i), int(epoch), p.copy()))

    def get(self, idx) -> np.ndarray:
        idx = self._index(idx)
        if np.any(self.written_at[idx] < 0):
            raise StoreError("no stored vector for some indices")
        return self.probs[idx].copy()

    def momentum_target(self, idx, current, epoch: int) -> np.ndarray:
        """Returns current before the start epoch, else gamma*stored + (1-gamma)*current."""
        if self.mode != "momentum":
            raise StoreError("momentum_target called on a one-off store")
        idx = self._index(idx)
        current = np.asarray(current, dtype=np.float32).reshape(len(idx), -1)
        check_probabilities(current, "current probabilities")
        missing = self.written_at[idx] < 0
        if epoch < self.start_epoch or (epoch == 0 and np.all(missing)):
            out = current
        else:
            if np.any(missing):
                raise StoreError(f"epoch {epoch}: momentum requires a stored vector for every index")
            g = np.float32(self.gamma)
            out = g * self.probs[idx] + (np.float32(1) - g) * current
        self.put(idx, out, epoch)
        return out.copy()

    def oneoff_target(self, idx, epoch: int, natural_probs, inverse_probs_provider: Callable[[], np.ndarray]) -> np.ndarray:
        """Natural predictions before the one-off epoch, f(x_inv) at it, frozen after."""
        if self.mode != "one-off":
            raise StoreError("oneoff_target called on a momentum store")
        idx = self._index(idx)
        if epoch < self.oneoff_epoch:
            p = np.asarray(natural_probs, dtype=np.float32)
            check_probabilities(p, "natural probabilities")
            return p.copy()
        if epoch == self.oneoff_epoch:
            p = np.asarray(inverse_probs_provider(), dtype=np.float32)
            self.put(idx, p, epoch)
            return p.copy()
        if np.any(self.written_at[idx] != self.oneoff_epoch):
            raise StoreError(f"epoch {epoch}: one-off epoch {self.oneoff_epoch} was never stored for some indices")
        return self.probs[idx].copy()

    def dump_csv(self, path) -> None:
        """Audit trail of (index, epoch, probabilities); needs ``keep_history``."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "epoch", *[f"p{c}" for c in range(self.probs.shape[1])]])
            for i, e, p in self.history:
                w.writerow([i, e, *[repr(float(v)) for v in p]])


__all__ = ["ProbStore", "StoreError", "ProbabilityError", "scaled_epoch", "MODES"]
