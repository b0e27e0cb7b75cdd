"""Class-embedding optimization: separate class embeddings on the unit
sphere as far as possible while preserving the semantic distance ranking of
the initial embeddings.

The objective is a convex combination of a separability term (negative
nearest-neighbor distance, summed over classes) and a semantic term (either
anchor proximity or a margin ranking loss over class triplets), minimized by
projected gradient descent: plain steps followed by row re-normalization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import kendalltau
from sklearn.base import BaseEstimator, TransformerMixin

from .numerics import normalize_rows
from .validation import check_matrix, check_same_shape

__all__ = [
    "DegeneratePairWarning",
    "CeoConfig",
    "CeoResult",
    "pairwise_distances",
    "loss_separability",
    "loss_semantic_proximity",
    "loss_semantic_rank",
    "joint_objective",
    "optimize_class_embeddings",
    "nearest_neighbor_report",
    "render_nn_report",
    "ClassEmbeddingOptimizer",
]

METRICS = ("euclidean", "cosine", "manhattan")
SEM_LOSSES = ("proximity", "rank")

# full triplet enumeration is cubic; beyond this class count we sample
_ENUMERATION_LIMIT = 64
_DEFAULT_TRIPLET_BUDGET = 50_000


class DegeneratePairWarning(RuntimeWarning):
    """A pair of embeddings collapsed to (near) zero distance; its gradient
    contribution was dropped."""


@dataclass
class CeoConfig:
    alpha: float = 0.5
    margin: float = 1.0
    sem_loss: str = "rank"
    metric: str = "cosine"
    steps: int = 2000
    lr: float = 0.05
    triplet_budget: int | None = None
    tie_epsilon: float = 1e-9
    zero_dist_epsilon: float = 1e-9
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.margin < 0.0:
            raise ValueError("margin must be >= 0")
        if self.sem_loss not in SEM_LOSSES:
            raise ValueError(f"sem_loss must be one of {SEM_LOSSES}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.triplet_budget is not None and self.triplet_budget < 1:
            raise ValueError("triplet_budget must be >= 1 when set")
        return self


@dataclass
class CeoResult:
    optimized: np.ndarray
    loss_trace: np.ndarray  # (steps, 3): sem, sep, joint
    min_distance_before: float
    min_distance_after: float
    kendall_tau: float
    diverged: bool = False

    def trace_dicts(self):
        return [
            {"sem": float(s), "sep": float(p), "joint": float(j)}
            for s, p, j in self.loss_trace
        ]


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------

def pairwise_distances(embeddings, metric):
    """All-pairs distance matrix: symmetric, zero diagonal, entries >= 0."""
    w = check_matrix(embeddings, "embeddings")
    if w.shape[0] < 2:
        raise ValueError("need at least two embeddings")
    if metric == "euclidean":
        diff = w[:, None, :] - w[None, :, :]
        d = np.sqrt(np.maximum((diff * diff).sum(axis=-1), 0.0))
    elif metric == "cosine":
        d = 1.0 - w @ w.T
        np.fill_diagonal(d, 0.0)
        d = np.maximum(d, 0.0)
    elif metric == "manhattan":
        d = np.abs(w[:, None, :] - w[None, :, :]).sum(axis=-1)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return d


def _pair_grad(w, coeff, metric, zero_dist_epsilon, dist=None):
    """Gradient of sum_{a,b} coeff[a,b] * d(w_a, w_b) w.r.t. w.

    ``coeff`` is an (asymmetric) per-ordered-pair coefficient matrix with
    zero diagonal.  Near-coincident pairs under euclidean/manhattan get a
    zero contribution and a DegeneratePairWarning.
    """
    m = coeff + coeff.T
    if metric == "cosine":
        return -(m @ w)
    if dist is None:
        dist = pairwise_distances(w, metric)
    degenerate = (dist < zero_dist_epsilon) & (m != 0.0)
    np.fill_diagonal(degenerate, False)
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum()) // 2} embedding pair(s) at near-zero "
            "distance; their gradient contribution was dropped",
            DegeneratePairWarning,
            stacklevel=3,
        )
        m = np.where(degenerate, 0.0, m)
    diff = w[:, None, :] - w[None, :, :]
    if metric == "euclidean":
        safe = np.where(dist < zero_dist_epsilon, 1.0, dist)
        unit = diff / safe[:, :, None]
        return np.einsum("ab,abd->ad", m, unit)
    if metric == "manhattan":
        return np.einsum("ab,abd->ad", m, np.sign(diff))
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_separability(w, metric, zero_dist_epsilon=1e-9):
    """Negative summed nearest-neighbor distance and its subgradient.

    Ties pick the smallest neighbor index; gradient flows to each class and
    its chosen neighbor.
    """
    w = check_matrix(w, "w")
    if w.shape[0] < 2:
        raise ValueError("separability needs at least two classes")
    dist = pairwise_distances(w, metric)
    masked = dist.copy()
    np.fill_diagonal(masked, np.inf)
    nn = np.argmin(masked, axis=1)  # argmin resolves ties to smallest index
    value = -float(masked[np.arange(w.shape[0]), nn].sum())
    coeff = np.zeros_like(dist)
    np.add.at(coeff, (np.arange(w.shape[0]), nn), -1.0)
    grad = _pair_grad(w, coeff, metric, zero_dist_epsilon, dist=dist)
    return value, grad


def loss_semantic_proximity(w, t, zero_dist_epsilon=1e-9):
    """Summed L2 distance of each embedding to its anchor, with the
    subgradient taken as zero at coincident rows."""
    w = check_matrix(w, "w")
    t = check_matrix(t, "t")
    check_same_shape(w, t, "w", "t")
    diff = w - t
    norms = np.linalg.norm(diff, axis=1)
    value = float(norms.sum())
    safe = np.where(norms < zero_dist_epsilon, 1.0, norms)
    grad = np.where((norms >= zero_dist_epsilon)[:, None], diff / safe[:, None], 0.0)
    return value, grad


def enumerate_triplets(n):
    """All ordered triples of distinct indices (c, i, j), c != i != j."""
    idx = np.arange(n)
    c, i, j = np.meshgrid(idx, idx, idx, indexing="ij")
    keep = (c != i) & (c != j) & (i != j)
    return np.stack([c[keep], i[keep], j[keep]], axis=1)


def sample_triplets(n, budget, rng):
    """Uniform sample of distinct-index triples without replacement."""
    total = n * (n - 1) * (n - 2)
    if budget >= total:
        return enumerate_triplets(n)
    flat = rng.choice(total, size=budget, replace=False)
    flat = np.sort(flat)
    c, rem = np.divmod(flat, (n - 1) * (n - 2))
    i_off, j_off = np.divmod(rem, n - 2)
    i = i_off + (i_off >= c)
    # j skips c and i, in increasing order
    lo = np.minimum(c, i)
    hi = np.maximum(c, i)
    j = j_off + (j_off >= lo)
    j = j + (j >= hi)
    return np.stack([c, i, j], axis=1)


def loss_semantic_rank(
    w,
    t,
    margin,
    metric,
    triplets=None,
    tie_epsilon=1e-9,
    zero_dist_epsilon=1e-9,
    dist_t=None,
):
    """Margin ranking loss over class triplets.

    For each triple (c, i, j): if the initial embeddings rank i closer to c
    than j, the optimized embeddings are pushed to agree by at least the
    margin.  Triples whose initial distances are tied (within tie_epsilon)
    are skipped entirely.
    """
    w = check_matrix(w, "w")
    t = check_matrix(t, "t")
    check_same_shape(w, t, "w", "t")
    n = w.shape[0]
    if triplets is None:
        triplets = enumerate_triplets(n)
    else:
        triplets = np.asarray(triplets, dtype=np.int64)
        if triplets.ndim != 2 or triplets.shape[1] != 3:
            raise ValueError("triplets must be an (M, 3) index array")
        if triplets.size and (triplets.min() < 0 or triplets.max() >= n):
            raise ValueError("triplet index out of range")
        c, i, j = triplets.T
        if np.any((c == i) | (c == j) | (i == j)):
            raise ValueError("triplet indices must be pairwise distinct")
    if dist_t is None:
        dist_t = pairwise_distances(t, metric)
    dist_w = pairwise_distances(w, metric)
    c, i, j = triplets.T
    dt = dist_t[c, i] - dist_t[c, j]
    dw = dist_w[c, i] - dist_w[c, j]
    live = np.abs(dt) >= tie_epsilon
    sign = np.sign(dt)
    inside = margin - sign * dw
    active = live & (inside > 0.0)
    value = float(inside[active].sum())
    coeff = np.zeros((n, n))
    if active.any():
        s = sign[active]
        np.add.at(coeff, (c[active], i[active]), -s)
        np.add.at(coeff, (c[active], j[active]), s)
    grad = _pair_grad(w, coeff, metric, zero_dist_epsilon, dist=dist_w)
    return value, grad


def joint_objective(w, t, config, rng=None, dist_t=None, triplets=None):
    """Weighted sum (1 - alpha) * sem + alpha * sep with matching gradient.

    ``triplets`` (or a fresh sample drawn from ``rng`` when the config sets
    a budget) feeds the rank variant; endpoints alpha in {0, 1} skip the
    unused component so they match the single loss exactly.
    """
    config.validate()
    a = config.alpha
    w = check_matrix(w, "w")
    value = 0.0
    grad = np.zeros_like(w)
    if a > 0.0:
        sep_v, sep_g = loss_separability(w, config.metric, config.zero_dist_epsilon)
        value += a * sep_v
        grad += a * sep_g
    if a < 1.0:
        if config.sem_loss == "proximity":
            sem_v, sem_g = loss_semantic_proximity(w, t, config.zero_dist_epsilon)
        else:
            if triplets is None and config.triplet_budget is not None:
                if rng is None:
                    raise ValueError("rng required when sampling triplets")
                triplets = sample_triplets(w.shape[0], config.triplet_budget, rng)
            sem_v, sem_g = loss_semantic_rank(
                w,
                t,
                config.margin,
                config.metric,
                triplets=triplets,
                tie_epsilon=config.tie_epsilon,
                zero_dist_epsilon=config.zero_dist_epsilon,
                dist_t=dist_t,
            )
        value += (1.0 - a) * sem_v
        grad += (1.0 - a) * sem_g
    return value, grad


# ---------------------------------------------------------------------------
# optimization loop
# ---------------------------------------------------------------------------

def _min_offdiag(dist):
    masked = dist.copy()
    np.fill_diagonal(masked, np.inf)
    return float(masked.min())


def _upper_tri(dist):
    iu = np.triu_indices(dist.shape[0], k=1)
    return dist[iu]


def resolve_triplet_budget(config, n_classes):
    """Explicit budget wins; otherwise enumerate small dictionaries and
    sample a fixed number of triplets for large ones."""
    if config.triplet_budget is not None:
        return config.triplet_budget
    if n_classes <= _ENUMERATION_LIMIT:
        return None
    return _DEFAULT_TRIPLET_BUDGET


def optimize_class_embeddings(bank, config):
    """Projected gradient descent on the joint objective, starting from the
    initial embeddings; every iterate is re-normalized row-wise.

    A non-finite loss aborts the run and returns the last finite iterate
    with ``diverged=True``.
    """
    config.validate()
    t = bank.initial
    n = t.shape[0]
    if n < 2:
        raise ValueError("need at least two classes to optimize")
    rng = np.random.default_rng(config.seed)
    budget = resolve_triplet_budget(config, n)
    run_cfg = CeoConfig(**{**config.__dict__, "triplet_budget": budget})
    dist_t = pairwise_distances(t, config.metric)
    w = t.copy()
    trace = []
    diverged = False
    for _ in range(config.steps):
        sep_v, sep_g = loss_separability(w, config.metric, config.zero_dist_epsilon)
        triplets = None
        if run_cfg.alpha < 1.0 and run_cfg.sem_loss == "rank":
            if budget is not None:
                triplets = sample_triplets(n, budget, rng)
            else:
                triplets = enumerate_triplets(n)
        if run_cfg.alpha < 1.0:
            if run_cfg.sem_loss == "proximity":
                sem_v, sem_g = loss_semantic_proximity(
                    w, t, config.zero_dist_epsilon
                )
            else:
                sem_v, sem_g = loss_semantic_rank(
                    w,
                    t,
                    config.margin,
                    config.metric,
                    triplets=triplets,
                    tie_epsilon=config.tie_epsilon,
                    zero_dist_epsilon=config.zero_dist_epsilon,
                    dist_t=dist_t,
                )
        else:
            sem_v, sem_g = 0.0, np.zeros_like(w)
        joint = (1.0 - run_cfg.alpha) * sem_v + run_cfg.alpha * sep_v
        if not np.isfinite(joint):
            diverged = True
            break
        grad = (1.0 - run_cfg.alpha) * sem_g + run_cfg.alpha * sep_g
        trace.append((sem_v, sep_v, joint))
        step = w - config.lr * grad
        norms = np.linalg.norm(step, axis=1, keepdims=True)
        if np.any(norms == 0.0) or not np.all(np.isfinite(step)):
            diverged = True
            break
        w = step / norms
    dist_w = pairwise_distances(w, config.metric)
    tau = float(kendalltau(_upper_tri(dist_t), _upper_tri(dist_w)).statistic)
    return CeoResult(
        optimized=w,
        loss_trace=np.asarray(trace, dtype=np.float64).reshape(-1, 3),
        min_distance_before=_min_offdiag(dist_t),
        min_distance_after=_min_offdiag(dist_w),
        kendall_tau=tau,
        diverged=diverged,
    )


# ---------------------------------------------------------------------------
# nearest-neighbor inspection
# ---------------------------------------------------------------------------

def nearest_neighbor_report(bank, metric="cosine"):
    """Per-class nearest neighbor and distance, before and after
    optimization, sorted by class name."""
    if bank.optimized is None:
        raise ValueError("bank has no optimized embeddings")
    names = bank.class_names
    d0 = pairwise_distances(bank.initial, metric)
    d1 = pairwise_distances(bank.optimized, metric)
    np.fill_diagonal(d0, np.inf)
    np.fill_diagonal(d1, np.inf)
    rows = []
    for c in sorted(range(len(names)), key=lambda k: names[k]):
        n0 = int(np.argmin(d0[c]))
        n1 = int(np.argmin(d1[c]))
        rows.append(
            {
                "base_class": names[c],
                "nn_initial": names[n0],
                "d_initial": float(d0[c, n0]),
                "nn_optimized": names[n1],
                "d_optimized": float(d1[c, n1]),
            }
        )
    return rows


def render_nn_report(rows):
    """Aligned text table: base class / NN and distance without and with
    optimization."""
    headers = ("base class", "NN (w/o opt)", "D (w/o opt)", "NN (w opt)", "D (w opt)")
    table = [
        (
            r["base_class"],
            r["nn_initial"],
            f"{r['d_initial']:.3f}",
            r["nn_optimized"],
            f"{r['d_optimized']:.3f}",
        )
        for r in rows
    ]
    widths = [
        max(len(headers[k]), *(len(row[k]) for row in table)) if table else len(headers[k])
        for k in range(5)
    ]
    lines = [
        "  ".join(h.ljust(widths[k]) for k, h in enumerate(headers)),
        "  ".join("-" * widths[k] for k in range(5)),
    ]
    for row in table:
        lines.append("  ".join(row[k].ljust(widths[k]) for k in range(5)))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# estimator wrapper
# ---------------------------------------------------------------------------

class ClassEmbeddingOptimizer(BaseEstimator, TransformerMixin):
    """Transformer-style wrapper around the embedding optimization loop.

    ``fit(X)`` treats X as the (n_classes, dim) matrix of initial unit
    embeddings and optimizes it; ``transform`` returns the optimized matrix
    for the same X it was fitted on.
    """

    def __init__(
        self,
        alpha=0.5,
        margin=1.0,
        sem_loss="rank",
        metric="cosine",
        steps=2000,
        lr=0.05,
        triplet_budget=None,
        tie_epsilon=1e-9,
        zero_dist_epsilon=1e-9,
        seed=0,
    ):
        self.alpha = alpha
        self.margin = margin
        self.sem_loss = sem_loss
        self.metric = metric
        self.steps = steps
        self.lr = lr
        self.triplet_budget = triplet_budget
        self.tie_epsilon = tie_epsilon
        self.zero_dist_epsilon = zero_dist_epsilon
        self.seed = seed

    def _config(self):
        return CeoConfig(
            alpha=self.alpha,
            margin=self.margin,
            sem_loss=self.sem_loss,
            metric=self.metric,
            steps=self.steps,
            lr=self.lr,
            triplet_budget=self.triplet_budget,
            tie_epsilon=self.tie_epsilon,
            zero_dist_epsilon=self.zero_dist_epsilon,
            seed=self.seed,
        ).validate()

    def fit(self, X, y=None):
        del y
        from .store import EmbeddingBank

        X = normalize_rows(check_matrix(X, "X"))
        bank = EmbeddingBank(tuple(f"class_{k}" for k in range(X.shape[0])), X)
        self.result_ = optimize_class_embeddings(bank, self._config())
        self.fitted_input_ = X
        self.optimized_ = self.result_.optimized
        return self

    def transform(self, X):
        if not hasattr(self, "optimized_"):
            raise ValueError("ClassEmbeddingOptimizer is not fitted")
        X = normalize_rows(check_matrix(X, "X"))
        if X.shape != self.fitted_input_.shape or not np.array_equal(
            X, self.fitted_input_
        ):
            raise ValueError(
                "transform expects the same embedding matrix the optimizer "
                "was fitted on"
            )
        return self.optimized_.copy()
