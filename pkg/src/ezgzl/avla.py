"""Audio-visual fusion, similarity heads, the contrastive alignment
objective, and the training loop.

The fusion model projects each modality to the model width and runs L
blocks in which the visual token attends to the audio token and vice versa
(each direction with its own Q/K/V/output projections), followed by
residual + layer norm, a tanh feed-forward, and a second residual + layer
norm.  Four similarity heads score a fused sample against a class
embedding: cosine, linear, mlp, and cross_attention (class embedding as
query, fused tokens as keys/values, then a linear projection to a scalar).

All gradients are hand-derived and checked against central finite
differences in the test suite.  Parameters live in a flat name->array dict;
serialized checkpoints store them concatenated in sorted-name order.

Checkpoint format (EZM, little-endian):
    magic "EZM1" | u32 d_v, d_a, embed_dim, d_model, n_layers, heads,
    head_dim, batch_size, epochs | i64 seed | u8 head_kind |
    f64 lr, beta1, beta2, weight_decay | u64 total parameter count |
    f64 parameters flattened in sorted-name order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import AdamState, adam_step, mha_backward, mha_forward
from .validation import check_matrix, check_vector

__all__ = [
    "HEAD_KINDS",
    "TrainConfig",
    "FusionModel",
    "build_model",
    "fuse_audio_visual",
    "fusion_forward",
    "fusion_backward",
    "similarity_scores",
    "scores_forward",
    "scores_backward",
    "contrastive_loss",
    "train_alignment",
    "predict",
    "save_model",
    "load_model",
    "flatten_params",
    "unflatten_params",
]

HEAD_KINDS = ("cosine", "linear", "mlp", "cross_attention")
_HEAD_CODES = {k: i for i, k in enumerate(HEAD_KINDS)}
_EZM_MAGIC = b"EZM1"


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 50
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    seed: int = 0
    head_kind: str = "cross_attention"
    n_layers: int = 1
    heads: int = 8
    head_dim: int = 64

    @property
    def d_model(self):
        return self.heads * self.head_dim

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.heads < 1 or self.head_dim < 1:
            raise ValueError("heads and head_dim must be >= 1")
        return self


@dataclass
class FusionModel:
    """Fusion transformer + similarity head parameters.

    ``params`` maps names to float64 arrays; ``embed_dim`` is the native
    class-embedding width (a shared linear projection to d_model is part of
    the model whenever it differs from d_model).
    """

    d_v: int
    d_a: int
    embed_dim: int
    d_model: int
    n_layers: int
    heads: int
    head_kind: str
    params: dict = field(default_factory=dict)

    @property
    def has_class_proj(self):
        return self.embed_dim != self.d_model


def _xavier(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_model(d_v, d_a, embed_dim, config):
    """Seeded parameter initialization: Xavier-uniform linear maps, zero
    biases, unit layer-norm scales."""
    config.validate()
    d = config.d_model
    rng = np.random.default_rng(config.seed)
    p = {}

    def linear(name, n_in, n_out):
        p[f"{name}.W"] = _xavier(rng, n_in, n_out, (n_in, n_out))
        p[f"{name}.b"] = np.zeros(n_out)

    linear("visual_proj", d_v, d)
    linear("audio_proj", d_a, d)
    for l in range(config.n_layers):
        for stream in ("attn_v", "attn_a"):
            for part in ("q", "k", "v", "o"):
                linear(f"layer{l}.{stream}.{part}", d, d)
        p[f"layer{l}.ln1.g"] = np.ones(d)
        p[f"layer{l}.ln1.b"] = np.zeros(d)
        linear(f"layer{l}.ffn.fc1", d, 4 * d)
        linear(f"layer{l}.ffn.fc2", 4 * d, d)
        p[f"layer{l}.ln2.g"] = np.ones(d)
        p[f"layer{l}.ln2.b"] = np.zeros(d)
    if embed_dim != d:
        linear("class_proj", embed_dim, d)
    if config.head_kind == "linear":
        p["head.u"] = _xavier(rng, 2 * d, 1, (2 * d,))
        p["head.b"] = np.zeros(())
    elif config.head_kind == "mlp":
        linear("head.fc1", 2 * d, d)
        p["head.u2"] = _xavier(rng, d, 1, (d,))
        p["head.b2"] = np.zeros(())
    elif config.head_kind == "cross_attention":
        for part in ("q", "k", "v", "o"):
            linear(f"head.{part}", d, d)
        p["head.p"] = _xavier(rng, d, 1, (d,))
        p["head.bp"] = np.zeros(())
    return FusionModel(
        d_v=d_v,
        d_a=d_a,
        embed_dim=embed_dim,
        d_model=d,
        n_layers=config.n_layers,
        heads=config.heads,
        head_kind=config.head_kind,
        params=p,
    )


# ---------------------------------------------------------------------------
# low-level layers
# ---------------------------------------------------------------------------

_LN_EPS = 1e-6


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    d = xhat.shape[-1]
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    s1 = dxhat.sum(axis=-1, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
    dx = inv / d * (d * dxhat - s1 - xhat * s2)
    return dx, dg, db


def _linear_forward(x, w, b):
    return x @ w + b


def _linear_backward(dy, x, w):
    # x: (..., n_in), dy: (..., n_out)
    lead = tuple(range(dy.ndim - 1))
    dw = np.tensordot(x, dy, axes=(lead, lead))
    db = dy.sum(axis=lead)
    dx = dy @ w.T
    return dx, dw, db


# ---------------------------------------------------------------------------
# fusion forward / backward
# ---------------------------------------------------------------------------

def fusion_forward(model, visual, audio):
    """Fuse batches of features into (N, 2, d_model) token pairs.

    Returns (tokens, cache); token 0 carries the visual stream, token 1 the
    audio stream.
    """
    p = model.params
    visual = check_matrix(visual, "visual", cols=model.d_v)
    audio = check_matrix(audio, "audio", rows=visual.shape[0], cols=model.d_a)
    t_v = _linear_forward(visual, p["visual_proj.W"], p["visual_proj.b"])
    t_a = _linear_forward(audio, p["audio_proj.W"], p["audio_proj.b"])
    tokens = np.stack([t_v, t_a], axis=1)
    layer_caches = []
    for l in range(model.n_layers):
        pre = f"layer{l}"
        v_tok = tokens[:, 0:1, :]
        a_tok = tokens[:, 1:2, :]
        stream_caches = {}
        outs = []
        for stream, q_tok, kv_tok in (
            ("attn_v", v_tok, a_tok),
            ("attn_a", a_tok, v_tok),
        ):
            q = _linear_forward(q_tok, p[f"{pre}.{stream}.q.W"], p[f"{pre}.{stream}.q.b"])
            k = _linear_forward(kv_tok, p[f"{pre}.{stream}.k.W"], p[f"{pre}.{stream}.k.b"])
            v = _linear_forward(kv_tok, p[f"{pre}.{stream}.v.W"], p[f"{pre}.{stream}.v.b"])
            att, att_cache = mha_forward(q, k, v, model.heads)
            out = _linear_forward(att, p[f"{pre}.{stream}.o.W"], p[f"{pre}.{stream}.o.b"])
            stream_caches[stream] = (q_tok, kv_tok, q, k, v, att, att_cache)
            outs.append(out)
        delta = np.concatenate(outs, axis=1)
        x1, ln1_cache = _ln_forward(tokens + delta, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        pre_act = _linear_forward(x1, p[f"{pre}.ffn.fc1.W"], p[f"{pre}.ffn.fc1.b"])
        act = np.tanh(pre_act)
        ffn = _linear_forward(act, p[f"{pre}.ffn.fc2.W"], p[f"{pre}.ffn.fc2.b"])
        out_tokens, ln2_cache = _ln_forward(x1 + ffn, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        layer_caches.append((tokens, stream_caches, ln1_cache, x1, act, ln2_cache))
        tokens = out_tokens
    cache = (visual, audio, layer_caches)
    return tokens, cache


def fusion_backward(model, d_tokens, cache):
    """Gradients of the fusion stack w.r.t. all its parameters (and inputs)."""
    p = model.params
    visual, audio, layer_caches = cache
    grads = {}

    def add(name, g):
        if name in grads:
            grads[name] += g
        else:
            grads[name] = g

    for l in reversed(range(model.n_layers)):
        pre = f"layer{l}"
        tokens_in, stream_caches, ln1_cache, x1, act, ln2_cache = layer_caches[l]
        d_sum2, dg2, db2 = _ln_backward(d_tokens, ln2_cache)
        add(f"{pre}.ln2.g", dg2)
        add(f"{pre}.ln2.b", db2)
        d_x1 = d_sum2.copy()
        d_act, dw2, dbias2 = _linear_backward(d_sum2, act, p[f"{pre}.ffn.fc2.W"])
        add(f"{pre}.ffn.fc2.W", dw2)
        add(f"{pre}.ffn.fc2.b", dbias2)
        d_pre_act = d_act * (1.0 - act * act)
        d_x1b, dw1, dbias1 = _linear_backward(d_pre_act, x1, p[f"{pre}.ffn.fc1.W"])
        add(f"{pre}.ffn.fc1.W", dw1)
        add(f"{pre}.ffn.fc1.b", dbias1)
        d_x1 += d_x1b
        d_sum1, dg1, dbias_ln1 = _ln_backward(d_x1, ln1_cache)
        add(f"{pre}.ln1.g", dg1)
        add(f"{pre}.ln1.b", dbias_ln1)
        d_tokens_in = d_sum1.copy()
        d_delta = d_sum1
        for idx, (stream, q_slot, kv_slot) in enumerate(
            (("attn_v", 0, 1), ("attn_a", 1, 0))
        ):
            q_tok, kv_tok, q, k, v, att, att_cache = stream_caches[stream]
            d_out = d_delta[:, idx : idx + 1, :]
            d_att, dwo, dbo = _linear_backward(d_out, att, p[f"{pre}.{stream}.o.W"])
            add(f"{pre}.{stream}.o.W", dwo)
            add(f"{pre}.{stream}.o.b", dbo)
            d_q, d_k, d_v = mha_backward(d_att, att_cache)
            d_qtok, dwq, dbq = _linear_backward(d_q, q_tok, p[f"{pre}.{stream}.q.W"])
            d_kvtok_k, dwk, dbk = _linear_backward(d_k, kv_tok, p[f"{pre}.{stream}.k.W"])
            d_kvtok_v, dwv, dbv = _linear_backward(d_v, kv_tok, p[f"{pre}.{stream}.v.W"])
            add(f"{pre}.{stream}.q.W", dwq)
            add(f"{pre}.{stream}.q.b", dbq)
            add(f"{pre}.{stream}.k.W", dwk)
            add(f"{pre}.{stream}.k.b", dbk)
            add(f"{pre}.{stream}.v.W", dwv)
            add(f"{pre}.{stream}.v.b", dbv)
            d_tokens_in[:, q_slot : q_slot + 1, :] += d_qtok
            d_tokens_in[:, kv_slot : kv_slot + 1, :] += d_kvtok_k + d_kvtok_v
        d_tokens = d_tokens_in
    d_tv = d_tokens[:, 0, :]
    d_ta = d_tokens[:, 1, :]
    d_visual, dwv_proj, dbv_proj = _linear_backward(d_tv, visual, p["visual_proj.W"])
    d_audio, dwa_proj, dba_proj = _linear_backward(d_ta, audio, p["audio_proj.W"])
    add("visual_proj.W", dwv_proj)
    add("visual_proj.b", dbv_proj)
    add("audio_proj.W", dwa_proj)
    add("audio_proj.b", dba_proj)
    return grads, d_visual, d_audio


def fuse_audio_visual(model, v, a):
    """Single-sample fusion: feature vectors in, (2, d_model) tokens out."""
    v = check_vector(v, "v", size=model.d_v)
    a = check_vector(a, "a", size=model.d_a)
    tokens, _ = fusion_forward(model, v[None], a[None])
    return tokens[0]


# ---------------------------------------------------------------------------
# similarity heads
# ---------------------------------------------------------------------------

def _class_proj_forward(model, class_vecs):
    if model.has_class_proj:
        return _linear_forward(
            class_vecs, model.params["class_proj.W"], model.params["class_proj.b"]
        )
    return class_vecs


def _normalize_with_cache(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("cannot cosine-normalize a zero vector")
    return x / norm, norm


def _normalize_backward(d_unit, unit, norm):
    inner = (d_unit * unit).sum(axis=-1, keepdims=True)
    return (d_unit - inner * unit) / norm


def scores_forward(model, tokens, class_vecs):
    """Similarity scores (n_samples, n_classes) for fused tokens against a
    class-embedding list; returns (scores, cache) for the backward pass."""
    p = model.params
    class_vecs = check_matrix(class_vecs, "class_vecs", cols=model.embed_dim)
    if tokens.ndim != 3 or tokens.shape[2] != model.d_model:
        raise ValueError("tokens must have shape (n_samples, n_tokens, d_model)")
    wp = _class_proj_forward(model, class_vecs)
    kind = model.head_kind
    if kind == "cosine":
        pooled = tokens.mean(axis=1)
        pn, p_norm = _normalize_with_cache(pooled)
        wn, w_norm = _normalize_with_cache(wp)
        scores = pn @ wn.T
        cache = (kind, tokens.shape, class_vecs, wp, (pn, p_norm, wn, w_norm))
    elif kind == "linear":
        pooled = tokens.mean(axis=1)
        d = model.d_model
        u_x, u_w = p["head.u"][:d], p["head.u"][d:]
        scores = (pooled @ u_x)[:, None] + (wp @ u_w)[None, :] + p["head.b"]
        cache = (kind, tokens.shape, class_vecs, wp, (pooled,))
    elif kind == "mlp":
        pooled = tokens.mean(axis=1)
        d = model.d_model
        w1 = p["head.fc1.W"]
        pre = (
            pooled @ w1[:d]
        )[:, None, :] + (wp @ w1[d:])[None, :, :] + p["head.fc1.b"]
        act = np.tanh(pre)
        scores = act @ p["head.u2"] + p["head.b2"]
        cache = (kind, tokens.shape, class_vecs, wp, (pooled, act))
    elif kind == "cross_attention":
        n, t, d = tokens.shape
        c = wp.shape[0]
        q = _linear_forward(wp, p["head.q.W"], p["head.q.b"])  # (C, d)
        k = _linear_forward(tokens, p["head.k.W"], p["head.k.b"])  # (N, T, d)
        v = _linear_forward(tokens, p["head.v.W"], p["head.v.b"])
        q_pairs = np.broadcast_to(q[None, :, None, :], (n, c, 1, d)).reshape(n * c, 1, d)
        k_pairs = np.broadcast_to(k[:, None, :, :], (n, c, t, d)).reshape(n * c, t, d)
        v_pairs = np.broadcast_to(v[:, None, :, :], (n, c, t, d)).reshape(n * c, t, d)
        att, att_cache = mha_forward(q_pairs, k_pairs, v_pairs, model.heads)
        out = _linear_forward(att, p["head.o.W"], p["head.o.b"])  # (N*C, 1, d)
        scores = (out[:, 0, :] @ p["head.p"] + p["head.bp"]).reshape(n, c)
        cache = (kind, tokens.shape, class_vecs, wp, (tokens, att, att_cache, out))
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite similarity score")
    return scores, cache


def scores_backward(model, d_scores, cache):
    """Gradients of the scores w.r.t. head/projection parameters, the fused
    tokens, and the (native-dim) class embeddings."""
    p = model.params
    kind, tok_shape, class_vecs, wp, extra = cache
    n, t, d = tok_shape
    grads = {}
    if kind == "cosine":
        pn, p_norm, wn, w_norm = extra
        d_pn = d_scores @ wn
        d_wn = d_scores.T @ pn
        d_pooled = _normalize_backward(d_pn, pn, p_norm)
        d_wp = _normalize_backward(d_wn, wn, w_norm)
        d_tokens = np.repeat(d_pooled[:, None, :] / t, t, axis=1)
    elif kind == "linear":
        (pooled,) = extra
        u_x, u_w = p["head.u"][:d], p["head.u"][d:]
        row = d_scores.sum(axis=1)
        col = d_scores.sum(axis=0)
        grads["head.u"] = np.concatenate([pooled.T @ row, wp.T @ col])
        grads["head.b"] = np.asarray(d_scores.sum())
        d_pooled = np.outer(row, u_x)
        d_wp = np.outer(col, u_w)
        d_tokens = np.repeat(d_pooled[:, None, :] / t, t, axis=1)
    elif kind == "mlp":
        pooled, act = extra
        w1 = p["head.fc1.W"]
        d_act = d_scores[:, :, None] * p["head.u2"]
        grads["head.u2"] = np.einsum("nch,nc->h", act, d_scores)
        grads["head.b2"] = np.asarray(d_scores.sum())
        d_pre = d_act * (1.0 - act * act)
        grads["head.fc1.W"] = np.concatenate(
            [
                np.einsum("nd,nch->dh", pooled, d_pre),
                np.einsum("cd,nch->dh", wp, d_pre),
            ]
        )
        grads["head.fc1.b"] = d_pre.sum(axis=(0, 1))
        d_pooled = np.einsum("nch,dh->nd", d_pre, w1[:d])
        d_wp = np.einsum("nch,dh->cd", d_pre, w1[d:])
        d_tokens = np.repeat(d_pooled[:, None, :] / t, t, axis=1)
    elif kind == "cross_attention":
        tokens, att, att_cache, out = extra
        c = wp.shape[0]
        flat = d_scores.reshape(n * c)
        d_out = flat[:, None, None] * p["head.p"][None, None, :]
        grads["head.p"] = out[:, 0, :].T @ flat
        grads["head.bp"] = np.asarray(flat.sum())
        d_att, dwo, dbo = _linear_backward(d_out, att, p["head.o.W"])
        grads["head.o.W"] = dwo
        grads["head.o.b"] = dbo
        d_qp, d_kp, d_vp = mha_backward(d_att, att_cache)
        d_q = d_qp.reshape(n, c, d).sum(axis=0)  # (C, d)
        d_k = d_kp.reshape(n, c, t, d).sum(axis=1)  # (N, T, d)
        d_v = d_vp.reshape(n, c, t, d).sum(axis=1)
        d_wp, dwq, dbq = _linear_backward(d_q, wp, p["head.q.W"])
        grads["head.q.W"] = dwq
        grads["head.q.b"] = dbq
        d_tok_k, dwk, dbk = _linear_backward(d_k, tokens, p["head.k.W"])
        grads["head.k.W"] = dwk
        grads["head.k.b"] = dbk
        d_tok_v, dwv, dbv = _linear_backward(d_v, tokens, p["head.v.W"])
        grads["head.v.W"] = dwv
        grads["head.v.b"] = dbv
        d_tokens = d_tok_k + d_tok_v
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    if model.has_class_proj:
        d_class, dw, db = _linear_backward(d_wp, class_vecs, p["class_proj.W"])
        grads["class_proj.W"] = dw
        grads["class_proj.b"] = db
    else:
        d_class = d_wp
    return grads, d_tokens, d_class


def similarity_scores(model, x_av, class_embeddings):
    """Scores of one fused sample against every class embedding."""
    x_av = check_matrix(x_av, "x_av", cols=model.d_model)
    scores, _ = scores_forward(model, x_av[None], class_embeddings)
    return scores[0]


# ---------------------------------------------------------------------------
# contrastive objective
# ---------------------------------------------------------------------------

def contrastive_loss(scores_matrix, targets=None):
    """Mean over samples of -log softmax at the matching entry.

    scores_matrix[i, k] scores sample i against the class embedding of
    batch entry k; the positive for row i sits at column targets[i]
    (default: the diagonal).  Computed with max-subtraction; returns
    (loss, d_loss/d_scores).
    """
    s = check_matrix(scores_matrix, "scores_matrix")
    b = s.shape[0]
    if targets is None:
        if s.shape[1] != b:
            raise ValueError("square scores matrix required for diagonal targets")
        targets = np.arange(b)
    else:
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != (b,) or targets.min() < 0 or targets.max() >= s.shape[1]:
            raise ValueError("targets must index columns of the scores matrix")
    shift = s.max(axis=1, keepdims=True)
    z = s - shift
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    log_probs = z - np.log(denom)
    loss = -float(log_probs[np.arange(b), targets].mean())
    grad = ez / denom
    grad[np.arange(b), targets] -= 1.0
    grad /= b
    return loss, grad


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _batch_grads(model, embeddings, xv, xa, y):
    """Loss and parameter gradients for one batch (class embeddings frozen)."""
    tokens, f_cache = fusion_forward(model, xv, xa)
    class_vecs = embeddings[y]
    scores, s_cache = scores_forward(model, tokens, class_vecs)
    loss, d_scores = contrastive_loss(scores)
    head_grads, d_tokens, _ = scores_backward(model, d_scores, s_cache)
    fusion_grads, _, _ = fusion_backward(model, d_tokens, f_cache)
    grads = {**fusion_grads, **head_grads}
    return loss, grads


def train_alignment(dataset, bank, config, use_initial=False):
    """Train the fusion model and similarity head against frozen class
    embeddings with Adam over seeded shuffled batches.

    Returns (model, loss_curve) where loss_curve holds the per-epoch mean
    contrastive loss.  ``use_initial=True`` aligns against the initial
    embeddings instead of the optimized ones (the no-optimization ablation).
    """
    config.validate()
    if use_initial:
        embeddings = bank.initial
    else:
        if bank.optimized is None:
            raise ValueError(
                "bank has no optimized embeddings; pass use_initial=True to "
                "train against the initial ones"
            )
        embeddings = bank.optimized
    train_mask = dataset.rows(0)
    if not np.any(train_mask):
        raise ValueError("train partition is empty")
    xv = dataset.visual[train_mask]
    xa = dataset.audio[train_mask]
    y = dataset.labels[train_mask]
    model = build_model(xv.shape[1], xa.shape[1], embeddings.shape[1], config)
    states = {
        name: AdamState.init(
            arr.shape,
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            weight_decay=config.weight_decay,
        )
        for name, arr in model.params.items()
    }
    rng = np.random.default_rng(config.seed)
    n = xv.shape[0]
    curve = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = _batch_grads(model, embeddings, xv[idx], xa[idx], y[idx])
            total += loss * idx.size
            for name in sorted(model.params):
                if name in grads:
                    model.params[name], states[name] = adam_step(
                        model.params[name], grads[name], states[name]
                    )
        curve.append(total / n)
    return model, curve


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def batch_scores(model, bank, visual, audio, use_initial=False, chunk=256):
    """Scores of many samples against the full class dictionary."""
    embeddings = bank.initial if use_initial else bank.optimized
    if embeddings is None:
        raise ValueError("bank has no optimized embeddings")
    outs = []
    for start in range(0, visual.shape[0], chunk):
        tokens, _ = fusion_forward(
            model, visual[start : start + chunk], audio[start : start + chunk]
        )
        scores, _ = scores_forward(model, tokens, embeddings)
        outs.append(scores)
    return np.vstack(outs)


def label_space_mask(n_classes, label_space, split=None):
    """Boolean mask of admissible prediction classes."""
    if label_space == "all":
        return np.ones(n_classes, dtype=bool)
    if split is None:
        raise ValueError("label-space restriction requires a class split")
    mask = np.zeros(n_classes, dtype=bool)
    if label_space == "seen_only":
        mask[sorted(split.seen)] = True
    elif label_space == "unseen_only":
        mask[sorted(split.unseen)] = True
    else:
        raise ValueError(f"unknown label space {label_space!r}")
    if not mask.any():
        raise ValueError("empty label space")
    return mask


def predict(model, bank, v, a, label_space="all", split=None, use_initial=False):
    """Class index with the highest similarity within the label space; exact
    ties resolve to the smallest class index."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    scores = batch_scores(model, bank, v, a, use_initial=use_initial)
    mask = label_space_mask(bank.n_classes, label_space, split)
    masked = np.where(mask[None, :], scores, -np.inf)
    out = np.argmax(masked, axis=1)  # argmax resolves ties to smallest index
    return int(out[0]) if out.size == 1 else out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def flatten_params(params):
    """Concatenate parameter arrays in sorted-name order."""
    return np.concatenate([np.ravel(params[k]) for k in sorted(params)])


def unflatten_params(flat, template):
    out = {}
    pos = 0
    for k in sorted(template):
        size = int(np.prod(template[k].shape)) if template[k].shape else 1
        out[k] = np.asarray(flat[pos : pos + size]).reshape(template[k].shape)
        pos += size
    if pos != flat.size:
        raise ValueError("parameter vector length mismatch")
    return out


def save_model(model, config, path):
    """Write an EZM checkpoint; identical models produce identical bytes."""
    flat = flatten_params(model.params)
    header = struct.pack(
        "<IIIIIIIII",
        model.d_v,
        model.d_a,
        model.embed_dim,
        model.d_model,
        model.n_layers,
        model.heads,
        model.d_model // model.heads,
        config.batch_size,
        config.epochs,
    )
    with open(path, "wb") as fh:
        fh.write(_EZM_MAGIC)
        fh.write(header)
        fh.write(struct.pack("<q", config.seed))
        fh.write(struct.pack("<B", _HEAD_CODES[model.head_kind]))
        fh.write(
            struct.pack(
                "<dddd", config.lr, config.beta1, config.beta2, config.weight_decay
            )
        )
        fh.write(struct.pack("<Q", flat.size))
        fh.write(np.ascontiguousarray(flat, dtype="<f8").tobytes())


def load_model(path):
    """Read an EZM checkpoint back into (model, config)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _EZM_MAGIC:
        raise ValueError(f"bad magic in {path}: not an EZM file")
    pos = 4
    d_v, d_a, embed_dim, d_model, n_layers, heads, head_dim, batch, epochs = (
        struct.unpack_from("<IIIIIIIII", data, pos)
    )
    pos += struct.calcsize("<IIIIIIIII")
    (seed,) = struct.unpack_from("<q", data, pos)
    pos += 8
    (head_code,) = struct.unpack_from("<B", data, pos)
    pos += 1
    if head_code >= len(HEAD_KINDS):
        raise ValueError("unknown head kind code in checkpoint")
    lr, beta1, beta2, weight_decay = struct.unpack_from("<dddd", data, pos)
    pos += 32
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if heads * head_dim != d_model:
        raise ValueError("checkpoint header: d_model must equal heads*head_dim")
    config = TrainConfig(
        batch_size=batch,
        epochs=epochs,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        weight_decay=weight_decay,
        seed=seed,
        head_kind=HEAD_KINDS[head_code],
        n_layers=n_layers,
        heads=heads,
        head_dim=head_dim,
    ).validate()
    model = build_model(d_v, d_a, embed_dim, config)
    expected = flatten_params(model.params).size
    if count != expected:
        raise ValueError(
            f"checkpoint parameter count mismatch: file has {count}, "
            f"architecture needs {expected}"
        )
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
    if pos + 8 * count != len(data):
        raise ValueError(f"trailing bytes in {path}")
    model.params = unflatten_params(flat, model.params)
    return model, config
