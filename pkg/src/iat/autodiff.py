"""Minimal reverse-mode differentiation over dense float32 arrays.

Computation is recorded onto a :class:`Trace` while it is active::

    with Trace() as tape:
        w = tape.watch(Tensor(weights))
        loss = ops.softmax_cross_entropy(ops.matmul(x, w), labels)
    grads = backward(tape, loss)
    grads[w]  # same shape as w

Tensors that were neither produced under the trace nor watched are
constants: no gradient is propagated into them.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached an operation boundary."""


class ShapeError(ValueError):
    pass


class TraceError(RuntimeError):
    pass


class Tensor:
    """Immutable dense array. Hashes by identity so it can key gradient maps."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data: Any, dtype: Any = DEFAULT_DTYPE):
        arr = np.array(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: arr is freshly computed and owned by us.
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other: "Tensor") -> "Tensor":
        from iat import ops

        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from iat import ops

        return ops.add(self, ops.scale(other, -1.0))

    def __mul__(self, c: float) -> "Tensor":
        from iat import ops

        return ops.scale(self, c)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from iat import ops

        return ops.scale(self, -1.0)


def as_tensor(x: Any, dtype: Any = None) -> Tensor:
    if isinstance(x, Tensor):
        if dtype is None or x.dtype == dtype:
            return x
        return Tensor(x.data, dtype=dtype)
    return Tensor(x, dtype=DEFAULT_DTYPE if dtype is None else dtype)


# ---------------------------------------------------------------------------
# primitive registry


@dataclass
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[np.ndarray | None]]


_REGISTRY: dict[str, Primitive] = {}


def register(name: str, forward, backward) -> None:
    _REGISTRY[name] = Primitive(name, forward, backward)


def primitive_names() -> list[str]:
    return sorted(_REGISTRY)


@contextlib.contextmanager
def override_backward(name: str, backward) -> Iterator[None]:
    """Temporarily replace the gradient rule of a primitive (test hook)."""
    prim = _REGISTRY[name]
    saved = prim.backward
    prim.backward = backward
    try:
        yield
    finally:
        prim.backward = saved


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict
    saved: Any


@dataclass
class Trace:
    """Ordered record of the primitives applied while the trace is active."""

    nodes: list[Node] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)
    _produced: dict[int, int] = field(default_factory=dict)
    _leaf_ids: set[int] = field(default_factory=set)
    _token: Any = None

    def __enter__(self) -> "Trace":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def watch(self, t: Tensor) -> Tensor:
        if not isinstance(t, Tensor):
            raise TypeError("watch() expects a Tensor")
        if id(t) in self._produced:
            raise TraceError("cannot watch a tensor produced inside the trace")
        if id(t) not in self._leaf_ids:
            self._leaf_ids.add(id(t))
            self.leaves.append(t)
        return t

    def _record(self, node: Node) -> None:
        self._produced[id(node.output)] = len(self.nodes)
        self.nodes.append(node)

    def contains(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def replay(self) -> list[np.ndarray]:
        """Recompute every node's output from its recorded inputs."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            out, _ = _REGISTRY[node.op].forward(*args, **node.attrs)
            values[id(node.output)] = out
            outs.append(out)
        return outs


_ACTIVE: contextvars.ContextVar[Trace | None] = contextvars.ContextVar("iat_trace", default=None)


def active_trace() -> Trace | None:
    return _ACTIVE.get()


@contextlib.contextmanager
def no_trace() -> Iterator[None]:
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


def apply(name: str, *inputs: Tensor, **attrs) -> Tensor:
    prim = _REGISTRY[name]
    arrays = [t.data for t in inputs]
    out, saved = prim.forward(*arrays, **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name}: produced NaN or Inf")
    result = Tensor._wrap(np.asarray(out))
    trace = _ACTIVE.get()
    if trace is not None:
        trace._record(Node(name, tuple(inputs), result, attrs, saved))
    return result


# ---------------------------------------------------------------------------
# pass accounting


@dataclass
class PassCounter:
    forward_rows: int = 0
    backward_calls: int = 0


_COUNTER: contextvars.ContextVar[PassCounter | None] = contextvars.ContextVar("iat_counter", default=None)


@contextlib.contextmanager
def counting(counter: PassCounter | None = None) -> Iterator[PassCounter]:
    counter = counter if counter is not None else PassCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


def note_forward(rows: int) -> None:
    c = _COUNTER.get()
    if c is not None:
        c.forward_rows += rows


# ---------------------------------------------------------------------------


def backward(trace: Trace, root: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of scalar ``root`` with respect to every watched leaf."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if id(root) not in trace._produced and id(root) not in trace._leaf_ids:
        raise TraceError("backward: root was not produced under this trace")
    c = _COUNTER.get()
    if c is not None:
        c.backward_calls += 1

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    stop = trace._produced.get(id(root), -1)
    for node in reversed(trace.nodes[: stop + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = _REGISTRY[node.op].backward(g, node.saved, *[t.data for t in node.inputs], **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if np.shape(gi) != t.shape:
                raise ShapeError(f"{node.op}: backward produced gradient {np.shape(gi)} for input {t.shape}")
            key = id(t)
            if key not in trace._produced and key not in trace._leaf_ids:
                continue
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    out: dict[Tensor, Tensor] = {}
    for leaf in trace.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("backward: non-finite gradient")
        out[leaf] = Tensor._wrap(g)
    return out


def grad(fn: Callable[..., Tensor], *args: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Evaluate ``fn(*args)`` and return (value, gradients wrt each arg)."""
    with Trace() as tape:
        for a in args:
            tape.watch(a)
        value = fn(*args)
    g = backward(tape, value)
    return value, [g[a] for a in args]
