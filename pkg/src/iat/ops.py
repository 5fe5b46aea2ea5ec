"""Differentiable primitives and the loss functions built on them."""

from __future__ import annotations

import numpy as np

from iat.autodiff import ShapeError, Tensor, apply, register

KL_CLAMP = 1e-12
PROB_TOL = 1e-5


class ProbabilityError(ValueError):
    pass


def _labels(labels, batch: int, classes: int, op: str) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != batch:
        raise ShapeError(f"{op}: {y.shape[0]} labels for batch of {batch}")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError(f"{op}: label out of range [0, {classes})")
    return y


# -- matmul ----------------------------------------------------------------


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b, None


def _matmul_bwd(g, _, a, b):
    return g @ b.T, a.T @ g


register("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", a, b)


# -- add (same shape, or b broadcast over a's leading axes) -----------------


def _add_fwd(a, b):
    if a.shape != b.shape and (b.ndim > a.ndim or a.shape[a.ndim - b.ndim :] != b.shape):
        raise ShapeError(f"add: shape {b.shape} does not broadcast onto {a.shape}")
    return a + b, None


def _add_bwd(g, _, a, b):
    gb = g
    if b.shape != g.shape:
        gb = g.sum(axis=tuple(range(g.ndim - b.ndim)))
    return g, gb


register("add", _add_fwd, _add_bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply("add", a, b)


# -- scale -----------------------------------------------------------------


def _scale_fwd(a, *, c):
    return a * a.dtype.type(c), None


def _scale_bwd(g, _, a, *, c):
    return (g * g.dtype.type(c),)


register("scale", _scale_fwd, _scale_bwd)


def scale(a: Tensor, c: float) -> Tensor:
    return apply("scale", a, c=float(c))


# -- relu ------------------------------------------------------------------


def _relu_fwd(a):
    return np.maximum(a, 0), None


def _relu_bwd(g, _, a):
    # relu'(0) = 0
    return (np.where(a > 0, g, 0).astype(g.dtype),)


register("relu", _relu_fwd, _relu_bwd)


def relu(a: Tensor) -> Tensor:
    return apply("relu", a)


# -- flatten ---------------------------------------------------------------


def _flatten_fwd(a):
    return a.reshape(a.shape[0], -1), None


def _flatten_bwd(g, _, a):
    return (g.reshape(a.shape),)


register("flatten", _flatten_fwd, _flatten_bwd)


def flatten(a: Tensor) -> Tensor:
    return apply("flatten", a)


# -- conv2d (stride 1, zero padding) ---------------------------------------


def _conv_fwd(x, w, b, *, padding):
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv2d: expected x[B,C,H,W], w[O,C,kh,kw], b[O]; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[1] or b.shape[0] != w.shape[0]:
        raise ShapeError(f"conv2d: channel mismatch x{x.shape} w{w.shape} b{b.shape}")
    kh, kw = w.shape[2:]
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    B, C, Ho, Wo = cols.shape[:4]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    out = out.reshape(B, Ho, Wo, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_bwd(g, cols, x, w, b, *, padding):
    B, O, Ho, Wo = g.shape
    C, kh, kw = w.shape[1:]
    gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
    gw = (gm.T @ cols).reshape(w.shape)
    gb = gm.sum(axis=0)
    gcols = (gm @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
    p = padding
    gxp = np.zeros((B, C, x.shape[2] + 2 * p, x.shape[3] + 2 * p), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + Ho, j : j + Wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else gxp
    return gx, gw, gb


register("conv2d", _conv_fwd, _conv_bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int | None = None) -> Tensor:
    if padding is None:
        padding = w.shape[2] // 2
    return apply("conv2d", x, w, b, padding=int(padding))


# -- softmax ---------------------------------------------------------------


def _softmax_fwd(z):
    if z.ndim != 2:
        raise ShapeError(f"softmax: expected [B, C], got {z.shape}")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)
    return s, s


def _softmax_bwd(g, s, z):
    return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


register("softmax", _softmax_fwd, _softmax_bwd)


def softmax(logits: Tensor) -> Tensor:
    return apply("softmax", logits)


# -- softmax cross-entropy -------------------------------------------------


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))


def _ce_fwd(z, *, labels):
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError(f"softmax_cross_entropy: expected [B, C>=2], got {z.shape}")
    y = _labels(labels, z.shape[0], z.shape[1], "softmax_cross_entropy")
    logp = _log_softmax(z)
    return -logp[np.arange(len(y)), y].mean(dtype=z.dtype), (logp, y)


def _ce_bwd(g, saved, z, *, labels):
    logp, y = saved
    d = np.exp(logp)
    d[np.arange(len(y)), y] -= 1
    return (d * (g / z.shape[0]),)


register("softmax_cross_entropy", _ce_fwd, _ce_bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    return apply("softmax_cross_entropy", logits, labels=np.asarray(labels, dtype=np.int64))


def per_example_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """Unreduced cross-entropy on plain arrays (no trace)."""
    z = np.asarray(logits)
    y = _labels(labels, z.shape[0], z.shape[1], "per_example_cross_entropy")
    return -_log_softmax(z)[np.arange(len(y)), y]


def softmax_array(logits: np.ndarray) -> np.ndarray:
    return _softmax_fwd(np.asarray(logits))[0]


# -- KL divergence ---------------------------------------------------------


def check_probabilities(p: np.ndarray, name: str = "p") -> None:
    if p.ndim != 2:
        raise ShapeError(f"{name}: expected [B, C], got {p.shape}")
    if np.any(p < 0):
        raise ProbabilityError(f"{name}: negative probability")
    dev = np.abs(p.sum(axis=1, dtype=np.float64) - 1.0)
    if dev.size and dev.max() > PROB_TOL:
        raise ProbabilityError(f"{name}: row sums deviate from 1 by {dev.max():.2e}")


def _kl_fwd(p, q):
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shape mismatch {p.shape} vs {q.shape}")
    check_probabilities(p, "kl_divergence p")
    check_probabilities(q, "kl_divergence q")
    pc = np.clip(p, KL_CLAMP, 1.0)
    qc = np.clip(q, KL_CLAMP, 1.0)
    val = (p * (np.log(pc) - np.log(qc))).sum(axis=1).mean(dtype=np.result_type(p, q))
    return val, (pc, qc)


def _kl_bwd(g, saved, p, q):
    pc, qc = saved
    B = p.shape[0]
    s = g / B
    in_p = (p >= KL_CLAMP) & (p <= 1.0)
    in_q = (q >= KL_CLAMP) & (q <= 1.0)
    gp = (np.log(pc) - np.log(qc) + np.where(in_p, p / pc, 0)) * s
    gq = np.where(in_q, -p / qc, 0) * s
    return gp.astype(p.dtype), gq.astype(q.dtype)


register("kl_divergence", _kl_fwd, _kl_bwd)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Batch-mean KL(p || q) with entries clamped to [1e-12, 1] inside the logs."""
    return apply("kl_divergence", p, q)


# -- L1 feature distance ---------------------------------------------------


def _l1_fwd(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"l1_feature_distance: shape mismatch {a.shape} vs {b.shape}")
    return np.abs(a - b).mean(dtype=a.dtype), None


def _l1_bwd(g, _, a, b):
    d = np.sign(a - b) * (g / a.size)
    return d, -d


register("l1_feature_distance", _l1_fwd, _l1_bwd)


def l1_feature_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over batch and feature dimensions."""
    return apply("l1_feature_distance", a, b)


# -- CW margin -------------------------------------------------------------


def _cw_runner_up(z, y):
    masked = z.copy()
    masked[np.arange(len(y)), y] = -np.inf
    return masked.argmax(axis=1)


def _cw_fwd(z, *, labels):
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError(f"cw_margin_loss: expected [B, C>=2], got {z.shape}")
    y = _labels(labels, z.shape[0], z.shape[1], "cw_margin_loss")
    other = _cw_runner_up(z, y)
    rows = np.arange(len(y))
    return (z[rows, other] - z[rows, y]).mean(dtype=z.dtype), (y, other)


def _cw_bwd(g, saved, z, *, labels):
    y, other = saved
    rows = np.arange(len(y))
    d = np.zeros_like(z)
    s = g / z.shape[0]
    d[rows, other] += s
    d[rows, y] -= s
    return (d,)


register("cw_margin_loss", _cw_fwd, _cw_bwd)


def cw_margin_loss(logits: Tensor, labels) -> Tensor:
    """Batch mean of max_{i != y} z_i - z_y."""
    return apply("cw_margin_loss", logits, labels=np.asarray(labels, dtype=np.int64))
