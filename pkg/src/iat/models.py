"""Small classifiers exposing penultimate features and logits."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Protocol

import numpy as np

from iat import ops
from iat.autodiff import ShapeError, Tensor, as_tensor, note_forward

KINDS = ("mlp", "small-cnn")


class ForwardOutput(NamedTuple):
    features: Tensor
    logits: Tensor


class Classifier(Protocol):
    """Anything attacks and objectives can differentiate through."""

    input_shape: tuple[int, ...]
    num_classes: int

    @property
    def params(self) -> tuple[Tensor, ...]: ...

    def __call__(self, x) -> ForwardOutput: ...


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: tuple[int, ...] = (64, 64)
    channels: tuple[int, ...] = (16, 32)
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(d) for d in self.hidden))
        object.__setattr__(self, "channels", tuple(int(d) for d in self.channels))
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.input_shape or any(d <= 0 for d in self.input_shape):
            raise ValueError(f"degenerate input shape {self.input_shape}")
        if not self.hidden or any(w <= 0 for w in self.hidden):
            raise ValueError(f"hidden widths must be positive and non-empty, got {self.hidden}")
        if self.kind == "small-cnn":
            if len(self.input_shape) != 3:
                raise ValueError("small-cnn expects input_shape (channels, height, width)")
            if not self.channels or any(c <= 0 for c in self.channels):
                raise ValueError(f"channel counts must be positive, got {self.channels}")

    @classmethod
    def mlp(cls, in_dim: int = 2, num_classes: int = 2, hidden=(64, 64)) -> "NetworkSpec":
        return cls("mlp", (in_dim,), num_classes, hidden=tuple(hidden))

    @classmethod
    def small_cnn(cls, input_shape=(1, 28, 28), num_classes: int = 10, channels=(16, 32), dense: int = 128):
        return cls("small-cnn", tuple(input_shape), num_classes, hidden=(dense,), channels=tuple(channels))

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        if self.kind == "mlp":
            widths = [int(np.prod(self.input_shape)), *self.hidden, self.num_classes]
            for a, b in zip(widths[:-1], widths[1:]):
                shapes += [(a, b), (b,)]
            return shapes
        cin, h, w = self.input_shape
        k = self.kernel
        for cout in self.channels:
            shapes += [(cout, cin, k, k), (cout,)]
            cin = cout
            # same padding keeps the spatial size for odd kernels
            h, w = h + 2 * (k // 2) - k + 1, w + 2 * (k // 2) - k + 1
        widths = [cin * h * w, *self.hidden, self.num_classes]
        for a, b in zip(widths[:-1], widths[1:]):
            shapes += [(a, b), (b,)]
        return shapes

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        return cls(
            d["kind"],
            tuple(d["input_shape"]),
            int(d["num_classes"]),
            hidden=tuple(d["hidden"]),
            channels=tuple(d["channels"]),
            kernel=int(d["kernel"]),
        )


@dataclass(frozen=True)
class NetworkState:
    spec: NetworkSpec
    params: tuple[Tensor, ...]
    seed: int = 0

    def __post_init__(self):
        expected = self.spec.param_shapes()
        got = [p.shape for p in self.params]
        if got != [tuple(s) for s in expected]:
            raise ShapeError(f"parameter shapes {got} do not match spec {expected}")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.spec.input_shape

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def __call__(self, x) -> ForwardOutput:
        return forward(self, x)

    def with_params(self, params) -> "NetworkState":
        return NetworkState(self.spec, tuple(params), self.seed)


def init(spec: NetworkSpec, seed: int) -> NetworkState:
    """He-scaled Gaussian weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            params.append(Tensor(np.zeros(shape)))
            continue
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
        params.append(Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)))
    return NetworkState(spec, tuple(params), seed)


def _check_input(x: Tensor, input_shape) -> None:
    if x.data.ndim != len(input_shape) + 1 or x.shape[1:] != tuple(input_shape):
        raise ShapeError(f"forward: input shape {x.shape} does not match [B, {', '.join(map(str, input_shape))}]")


def forward(state: NetworkState, x) -> ForwardOutput:
    x = as_tensor(x)
    _check_input(x, state.spec.input_shape)
    note_forward(x.shape[0])
    p = state.params
    spec = state.spec
    if spec.kind == "mlp":
        h = x if x.data.ndim == 2 else ops.flatten(x)
        n_layers = len(p) // 2
        for i in range(n_layers - 1):
            h = ops.relu(ops.add(ops.matmul(h, p[2 * i]), p[2 * i + 1]))
        return ForwardOutput(h, ops.add(ops.matmul(h, p[-2]), p[-1]))

    h = x
    n_conv = len(spec.channels)
    for i in range(n_conv):
        h = ops.relu(ops.conv2d(h, p[2 * i], p[2 * i + 1]))
    h = ops.flatten(h)
    dense = p[2 * n_conv :]
    for i in range(len(dense) // 2 - 1):
        h = ops.relu(ops.add(ops.matmul(h, dense[2 * i]), dense[2 * i + 1]))
    return ForwardOutput(h, ops.add(ops.matmul(h, dense[-2]), dense[-1]))


def predict(model: Classifier, x, batch_size: int = 1024) -> np.ndarray:
    """Logits for an array of inputs, computed in batches without recording."""
    from iat.autodiff import no_trace

    x = np.asarray(x, dtype=np.float32)
    out = []
    with no_trace():
        for i in range(0, len(x), batch_size):
            out.append(model(x[i : i + batch_size]).logits.data)
    if not out:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    return np.concatenate(out)


@dataclass(frozen=True)
class AffineClassifier:
    """Logits W x + b with the input itself as the feature vector.

    Not a trainable architecture: used where worst cases over an l-inf box
    can be enumerated exactly (convex loss, optimum at a corner).
    """

    weight: Tensor
    bias: Tensor
    input_shape: tuple[int, ...] = field(init=False)
    num_classes: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", (self.weight.shape[0],))
        object.__setattr__(self, "num_classes", self.weight.shape[1])

    @classmethod
    def random(cls, rng: np.random.Generator, in_dim: int = 2, num_classes: int = 2) -> "AffineClassifier":
        return cls(Tensor(rng.standard_normal((in_dim, num_classes))), Tensor(rng.standard_normal(num_classes)))

    @property
    def params(self) -> tuple[Tensor, ...]:
        return (self.weight, self.bias)

    def with_params(self, params) -> "AffineClassifier":
        return AffineClassifier(*params)

    def __call__(self, x) -> ForwardOutput:
        x = as_tensor(x)
        _check_input(x, self.input_shape)
        note_forward(x.shape[0])
        return ForwardOutput(x, ops.add(ops.matmul(x, self.weight), self.bias))
