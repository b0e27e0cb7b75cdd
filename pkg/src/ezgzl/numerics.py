"""Dense numerical primitives: multi-head attention with analytic gradients,
an Adam optimizer step, sphere projection, and a central finite-difference
gradient checker.

Everything is float64 and deterministic; batch reductions use numpy's
sequential summation so results are bit-identical across runs.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .validation import check_matrix, check_same_shape, check_vector

__all__ = [
    "attention_forward",
    "mha_forward",
    "mha_backward",
    "AdamState",
    "adam_step",
    "project_to_sphere",
    "GradCheckReport",
    "finite_diff_check",
    "deterministic_map",
    "worker_count",
]


# ---------------------------------------------------------------------------
# multi-head attention
# ---------------------------------------------------------------------------

def _split_heads(x, heads):
    # (B, T, d) -> (B, heads, T, d/heads)
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def mha_forward(queries, keys, values, heads):
    """Batched scaled dot-product multi-head attention.

    queries: (B, Tq, d), keys/values: (B, Tk, d).  No projections; per-head
    scale 1/sqrt(d/heads), softmax over keys.  Returns (output, cache) where
    cache feeds :func:`mha_backward`.
    """
    b, tq, d = queries.shape
    if d % heads != 0:
        raise ValueError(f"model dim {d} not divisible by heads={heads}")
    if keys.shape != values.shape:
        raise ValueError("keys and values must have identical shapes")
    if keys.shape[0] != b or keys.shape[2] != d:
        raise ValueError("queries/keys dimension mismatch")
    q = _split_heads(queries, heads)
    k = _split_heads(keys, heads)
    v = _split_heads(values, heads)
    scale = 1.0 / np.sqrt(d / heads)
    logits = np.einsum("bhqe,bhke->bhqk", q, k) * scale
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = np.einsum("bhqk,bhke->bhqe", weights, v)
    cache = (q, k, v, weights, scale, heads)
    return _merge_heads(out), cache


def mha_backward(d_out, cache):
    """Gradients of :func:`mha_forward` w.r.t. queries, keys, values."""
    q, k, v, weights, scale, heads = cache
    d_o = _split_heads(d_out, heads)
    d_w = np.einsum("bhqe,bhke->bhqk", d_o, v)
    d_v = np.einsum("bhqk,bhqe->bhke", weights, d_o)
    # softmax backward per query row
    inner = (d_w * weights).sum(axis=-1, keepdims=True)
    d_logits = weights * (d_w - inner)
    d_q = np.einsum("bhqk,bhke->bhqe", d_logits, k) * scale
    d_k = np.einsum("bhqk,bhqe->bhke", d_logits, q) * scale
    return _merge_heads(d_q), _merge_heads(d_k), _merge_heads(d_v)


def attention_forward(queries, keys, values, heads):
    """Single-matrix multi-head attention: queries (Q, d) against keys and
    values (K, d).  Output rows are per-head convex combinations of value
    rows."""
    q = check_matrix(queries, "queries")
    k = check_matrix(keys, "keys")
    v = check_matrix(values, "values")
    if k.shape[0] < 1:
        raise ValueError("need at least one key")
    if k.shape != v.shape:
        raise ValueError("keys and values must have identical shapes")
    if q.shape[1] != k.shape[1]:
        raise ValueError(
            f"query dim {q.shape[1]} does not match key dim {k.shape[1]}"
        )
    out, _ = mha_forward(q[None], k[None], v[None], heads)
    return out[0]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """State of one Adam-optimized parameter array (decoupled weight decay)."""

    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init(cls, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        return cls(
            step=0,
            first_moment=np.zeros(shape),
            second_moment=np.zeros(shape),
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            weight_decay=weight_decay,
        )


def adam_step(params, grads, state):
    """One Adam update with bias correction.

    Weight decay is decoupled: applied multiplicatively to the parameters
    before the moment update, so it never enters the moment estimates.
    Returns (new_params, new_state); inputs are left untouched.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    check_same_shape(params, grads, "params", "grads")
    check_same_shape(params, state.first_moment, "params", "first_moment")
    p = params.copy()
    if state.weight_decay != 0.0:
        p -= state.lr * state.weight_decay * p
    t = state.step + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        step=t,
        first_moment=m,
        second_moment=v,
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        weight_decay=state.weight_decay,
    )
    return p, new_state


# ---------------------------------------------------------------------------
# sphere projection
# ---------------------------------------------------------------------------

def project_to_sphere(v):
    """Normalize a vector to unit L2 norm, preserving direction."""
    vec = check_vector(v, "v")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("cannot project the zero vector to the sphere")
    return vec / norm


def normalize_rows(x):
    """Row-wise sphere projection; rejects zero rows."""
    arr = check_matrix(x, "x")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot project a zero row to the sphere")
    return arr / norms


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_coordinate: int
    step_size: float

    def passed(self, tol=1e-4):
        return self.max_relative_error <= tol


def finite_diff_check(f, analytic_grad, point, step=1e-5):
    """Compare an analytic gradient against central finite differences.

    ``f`` maps a 1-d float64 vector to a scalar.  The reported error per
    coordinate is |g_fd - g_an| / max(1, |g_fd|, |g_an|); the report carries
    the maximum and the coordinate attaining it.
    """
    x = check_vector(point, "point")
    g_an = check_vector(analytic_grad, "analytic_grad", size=x.size)
    worst = 0.0
    worst_i = 0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"objective non-finite near coordinate {i}")
        g_fd = (fp - fm) / (2.0 * step)
        err = abs(g_fd - g_an[i]) / max(1.0, abs(g_fd), abs(g_an[i]))
        if err > worst:
            worst = err
            worst_i = i
    return GradCheckReport(
        max_relative_error=worst, worst_coordinate=worst_i, step_size=step
    )


# ---------------------------------------------------------------------------
# deterministic parallel map
# ---------------------------------------------------------------------------

def worker_count():
    """Worker cap from EZGZL_WORKERS (default 1, i.e. serial)."""
    raw = os.environ.get("EZGZL_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def deterministic_map(fn, items, workers=None):
    """Map ``fn`` over ``items``, optionally on a thread pool.

    Results are assembled in input order, so the output is identical for any
    worker count.
    """
    if workers is None:
        workers = worker_count()
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
