"""Central finite-difference checks of every primitive and composite objective.

Analytic gradients come from the float32 reverse pass. The reference is a
float64 central difference (h = 1e-3) of the forward pass alone. A coordinate
whose perturbation flips a piecewise branch (relu mask, margin argmax, |.|
sign, KL clamp) has no derivative to compare and is skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from iat import objectives, ops
from iat.autodiff import Tensor, Trace, backward
from iat.inverse import inverse_loss
from iat.models import NetworkSpec, init

H = 1e-3
TOLERANCE = 1e-3
# Below this magnitude a coordinate is compared on an absolute scale.
FLOOR = 1e-4


@dataclass
class CheckResult:
    name: str
    worst: float
    checked: int
    skipped: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.worst < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _signature(trace: Trace) -> list[bytes]:
    sig = []
    for node in trace.nodes:
        a = [t.data for t in node.inputs]
        if node.op == "relu":
            sig.append((a[0] > 0).tobytes())
        elif node.op == "l1_feature_distance":
            sig.append(np.sign(a[0] - a[1]).tobytes())
        elif node.op == "kl_divergence":
            sig.append(((a[0] >= ops.KL_CLAMP).tobytes(), (a[1] >= ops.KL_CLAMP).tobytes()))
        elif node.op == "cw_margin_loss":
            sig.append(node.saved[1].tobytes())
    return sig


def _evaluate64(fn, arrays):
    with Trace() as tape:
        out = fn(*[Tensor(a, dtype=np.float64) for a in arrays])
    return out.item(), _signature(tape)


def check_function(name: str, fn: Callable[..., Tensor], arrays, wrt=None, h: float = H,
                   tolerance: float = TOLERANCE, max_coords: int | None = None,
                   rng: np.random.Generator | None = None) -> CheckResult:
    """Compare reverse-mode and finite-difference gradients of scalar ``fn``.

    ``wrt`` lists the argument positions to differentiate (default: all).
    """
    arrays = [np.asarray(a, dtype=np.float32).astype(np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    rng = rng if rng is not None else np.random.default_rng(0)

    with Trace() as tape:
        ts = [Tensor(a) for a in arrays]
        for i in wrt:
            tape.watch(ts[i])
        out = fn(*ts)
    grads = backward(tape, out)
    _, base_sig = _evaluate64(fn, arrays)

    worst, checked, skipped = 0.0, 0, 0
    for i in wrt:
        analytic = grads[ts[i]].data.reshape(-1)
        coords = np.arange(arrays[i].size)
        if max_coords is not None and coords.size > max_coords:
            coords = rng.choice(coords, max_coords, replace=False)
        for c in coords:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[c] += h
            minus[i].reshape(-1)[c] -= h
            fp, sp = _evaluate64(fn, plus)
            fm, sm = _evaluate64(fn, minus)
            if sp != base_sig or sm != base_sig:
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, float(relative_error(analytic[c], numeric)))
            checked += 1
    return CheckResult(name, worst, checked, skipped, tolerance)


def _simplex(rng, b, c):
    p = rng.uniform(0.05, 1.0, (b, c))
    return (p / p.sum(axis=1, keepdims=True)).astype(np.float32)


def _reduce(t: Tensor) -> Tensor:
    """Fixed random projection to a scalar, built from primitives."""
    flat = ops.flatten(t) if t.data.ndim != 2 else t
    w = np.random.default_rng(flat.shape[1]).standard_normal((flat.shape[1], 1))
    rows = ops.matmul(flat, Tensor(w, dtype=t.dtype))
    return ops.matmul(Tensor(np.ones((1, flat.shape[0])), dtype=t.dtype), rows)


def _model_fn(spec: NetworkSpec, n_params: int, body):
    """fn(*params, *rest) for a network whose parameters are the leading args."""
    from iat.models import NetworkState

    def fn(*args):
        state = NetworkState(spec, tuple(args[:n_params]))
        return body(state, *args[n_params:])

    return fn


def primitive_cases(rng: np.random.Generator):
    b, k, n = rng.integers(2, 5), rng.integers(2, 6), rng.integers(2, 5)
    cases = []
    cases.append(("matmul", lambda x, w: _reduce(ops.matmul(x, w)),
                  [rng.standard_normal((b, k)), rng.standard_normal((k, n))]))
    cases.append(("add", lambda x, y: _reduce(ops.add(x, y)),
                  [rng.standard_normal((b, n)), rng.standard_normal((b, n))]))
    cases.append(("add-broadcast", lambda x, y: _reduce(ops.add(x, y)),
                  [rng.standard_normal((b, n)), rng.standard_normal(n)]))
    cases.append(("scale", lambda x: _reduce(ops.scale(x, -2.5)), [rng.standard_normal((b, n))]))
    cases.append(("relu", lambda x: _reduce(ops.relu(x)), [rng.standard_normal((b, n))]))
    cin, cout, hw = rng.integers(1, 3), rng.integers(1, 4), rng.integers(3, 6)
    cases.append(("conv2d", lambda x, w, bias: _reduce(ops.conv2d(x, w, bias)),
                  [rng.standard_normal((b, cin, hw, hw)), rng.standard_normal((cout, cin, 3, 3)),
                   rng.standard_normal(cout)]))
    cases.append(("flatten", lambda x: _reduce(ops.flatten(x)), [rng.standard_normal((b, 2, 3, 3))]))
    c = int(rng.integers(2, 5))
    cases.append(("softmax", lambda z: _reduce(ops.softmax(z)), [rng.standard_normal((b, c))]))
    y = rng.integers(0, c, b)
    cases.append(("softmax_cross_entropy", lambda z: ops.softmax_cross_entropy(z, y), [rng.standard_normal((b, c))]))
    cases.append(("cw_margin_loss", lambda z: ops.cw_margin_loss(z, y), [rng.standard_normal((b, c))]))
    cases.append(("kl_divergence", lambda zp, zq: ops.kl_divergence(ops.softmax(zp), ops.softmax(zq)),
                  [rng.standard_normal((b, c)), rng.standard_normal((b, c))]))
    cases.append(("l1_feature_distance", lambda u, v: ops.l1_feature_distance(u, v),
                  [rng.standard_normal((b, n)), rng.standard_normal((b, n))]))
    return cases


def objective_cases(rng: np.random.Generator):
    """Composite objectives on a tiny MLP; gradients wrt parameters and inputs."""
    c = int(rng.integers(2, 4))
    b = int(rng.integers(2, 5))
    spec = NetworkSpec.mlp(3, c, (5, 4))
    state = init(spec, int(rng.integers(1 << 30)))
    params = [rng.standard_normal(p.shape) * 0.5 for p in state.params]
    npar = len(params)
    x = rng.standard_normal((b, 3))
    x_adv = x + rng.uniform(-0.3, 0.3, x.shape)
    x_inv = x + rng.uniform(-0.2, 0.2, x.shape)
    y = rng.integers(0, c, b)
    target = _simplex(rng, b, c)
    base = _model_fn(spec, npar, lambda s, xs: ops.softmax(s(xs).logits))
    p_nat = base(*[Tensor(p, dtype=np.float64) for p in params], Tensor(x, dtype=np.float64)).data
    p_inv = base(*[Tensor(p, dtype=np.float64) for p in params], Tensor(x_inv, dtype=np.float64)).data

    cases = [
        ("sat_loss", _model_fn(spec, npar, lambda s, xa: objectives.sat_loss(s, xa, y)), [*params, x_adv]),
        ("trades_loss", _model_fn(spec, npar, lambda s, xn, xa: objectives.trades_loss(s, xn, xa, y, 6.0)),
         [*params, x, x_adv]),
        # F(x) and F(x_adv) are constants of the inverse search, so only x_inv varies.
        ("inverse_loss[beta=1]", _model_fn(spec, npar, lambda s, xi: inverse_loss(s, xi, x, x_adv, y, 1.0)),
         [*params, x_inv], [npar]),
        ("uiat_loss", _model_fn(spec, npar, lambda s, xa: objectives.uiat_loss(s, xa, y, target, 3.5)), [*params, x_adv]),
        # Stop-gradient targets are frozen at the base parameters for both oracles.
        ("uiat_loss[one-off]", _model_fn(spec, npar, lambda s, xa: objectives.uiat_loss(s, xa, y, p_nat, 3.5)),
         [*params, x_adv]),
        ("singlestep_uiat_loss[detached]", _model_fn(spec, npar, lambda s, xa: objectives.singlestep_uiat_loss(
            s, xa, y, None, 3.5, detach=True, inverse_probs=p_inv)), [*params, x_adv]),
        ("singlestep_uiat_loss[flow-through]", _model_fn(spec, npar, lambda s, xa, xi: objectives.singlestep_uiat_loss(
            s, xa, y, xi, 3.5, detach=False)), [*params, x_adv, x_inv]),
    ]
    return cases


def run_suite(seed: int = 0, tolerance: float = TOLERANCE) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, arrays, *wrt in primitive_cases(rng) + objective_cases(rng):
        results.append(check_function(name, fn, arrays, wrt=wrt[0] if wrt else None, tolerance=tolerance, rng=rng))
    return results
