"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"IATCKPT1"
    u64 descriptor length, descriptor bytes (UTF-8 JSON: network spec + init seed)
    for each parameter, in spec order:
        u64 rank, rank x u64 dims, prod(dims) x f32
    optional:
        b"UBANK", u64 class count, then one tensor record per class

Nothing else may follow.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from iat.autodiff import Tensor
from iat.models import NetworkSpec, NetworkState

MAGIC = b"IATCKPT1"
BANK_TAG = b"UBANK"


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _tensor_record(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    head = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def encode(state: NetworkState, bank=None) -> bytes:
    desc = json.dumps({"spec": json.loads(state.spec.to_json()), "seed": int(state.seed)}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<Q", len(desc)), desc]
    parts += [_tensor_record(p.data) for p in state.params]
    if bank is not None:
        parts += [BANK_TAG, struct.pack("<Q", len(bank.z))]
        parts += [_tensor_record(z) for z in bank.z]
    return b"".join(parts)


def save_checkpoint(state: NetworkState, path, bank=None) -> Path:
    path = Path(path)
    data = encode(state, bank)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def tensor(self, what: str) -> np.ndarray:
        rank = self.u64(f"{what} rank")
        if rank > 8:
            raise CheckpointFormatError(f"{what}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}Q", self.take(8 * rank, f"{what} dims"))
        count = int(np.prod(dims)) if rank else 1
        raw = self.take(4 * count, f"{what} data")
        return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


def decode(buf: bytes):
    r = _Reader(buf)
    if len(buf) < len(MAGIC):
        raise CheckpointTruncatedError("file shorter than magic header")
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("not an IAT checkpoint (bad magic)")
    n = r.u64("descriptor length")
    try:
        desc = json.loads(r.take(n, "descriptor").decode("utf-8"))
        spec = NetworkSpec.from_json(json.dumps(desc["spec"]))
        seed = int(desc["seed"])
    except CheckpointTruncatedError:
        raise
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"bad spec descriptor: {e}") from e

    params = []
    for i, shape in enumerate(spec.param_shapes()):
        arr = r.tensor(f"parameter {i}")
        if arr.shape != tuple(shape):
            raise CheckpointShapeError(f"parameter {i}: stored shape {arr.shape}, spec expects {tuple(shape)}")
        params.append(arr)

    bank = None
    if r.pos < len(buf):
        tag = r.take(len(BANK_TAG), "section tag")
        if tag != BANK_TAG:
            raise CheckpointFormatError(f"unknown trailing section {tag!r}")
        count = r.u64("bank size")
        if count != spec.num_classes:
            raise CheckpointShapeError(f"bank holds {count} classes, spec has {spec.num_classes}")
        zs = []
        for c in range(count):
            z = r.tensor(f"bank class {c}")
            if z.shape != spec.input_shape:
                raise CheckpointShapeError(f"bank class {c}: shape {z.shape}, inputs are {spec.input_shape}")
            zs.append(z)
        bank = np.stack(zs)
        if r.pos != len(buf):
            raise CheckpointFormatError("unexpected bytes after bank section")

    try:
        state = NetworkState(spec, tuple(Tensor(p) for p in params), seed)
    except FloatingPointError as e:
        raise CheckpointFormatError(f"non-finite parameter values: {e}") from e
    return state, bank


def load_checkpoint(path) -> NetworkState:
    return decode(Path(path).read_bytes())[0]


def load_checkpoint_with_bank(path):
    """Returns (state, bank array [C, *input_shape] or None)."""
    return decode(Path(path).read_bytes())
