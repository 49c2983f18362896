"""Semantic graph network: per-area insertion probabilities and goal mixtures.

Shapes in the batched path: ``abs``/``rel`` are (B, M, T, 7), ``mask`` is
(B, M) with True for real nodes. Attention logits are laid out as
(B, source n, target i) and normalized over the source axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Adam, ParamStore, Tape, backward
from .nn import autodiff as ad
from .nn.layers import dense, gmm_log_prob, gru_unroll
from .nn.params import add_dense, add_gru
from .scene import N_FEATURES, SemanticGraph

FEAT_SCALE = np.array([10.0, 10.0, 1.0, 10.0, 10.0, 1.0, 10.0])
NEG = -1e30


@dataclass
class SgnConfig:
    hidden: int = 64
    K: int = 3
    beta: float = 1.0
    goal_scale: float = 10.0
    lr: float = 3e-3
    batch_size: int = 32
    epochs: int = 30
    clip_norm: float = 5.0
    shuffle: bool = True
    seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class SgnSample:
    abs: np.ndarray          # (M, T, 7)
    rel: np.ndarray          # (M, T, 7)
    label: int               # inserted area
    goals: np.ndarray        # (M,) traveled distance of each rear boundary
    ref: int = 0

    @classmethod
    def from_graph(cls, g: SemanticGraph, label: int, goals) -> "SgnSample":
        return cls(g.abs_array(), g.rel_array(), int(label), np.asarray(goals, dtype=np.float64),
                   g.reference_node)


@dataclass
class IntentionOutput:
    w: np.ndarray            # (M,) insertion probabilities
    alpha: np.ndarray        # (M, K)
    mu: np.ndarray           # (M, K) meters
    sigma: np.ndarray        # (M, K) meters
    attention: np.ndarray    # (M_src, M_tgt), columns sum to one
    reference_node: int = 0

    @property
    def goal_mean(self) -> np.ndarray:
        return np.sum(self.alpha * self.mu, axis=-1)

    @property
    def ego_goal(self) -> float:
        return float(self.goal_mean[self.reference_node])


def init_params(cfg: SgnConfig, seed: int | None = None) -> ParamStore:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    H, K = cfg.hidden, cfg.K
    p = ParamStore()
    add_gru(p, rng, "f1_rec", N_FEATURES, H)
    add_gru(p, rng, "f2_rec", N_FEATURES, H)
    add_dense(p, rng, "f1_enc", H, H)
    add_dense(p, rng, "f2_enc", H, H)
    add_dense(p, rng, "f_att", 2 * H, 1)
    add_dense(p, rng, "f3_enc", 2 * H, H)
    add_dense(p, rng, "f4_enc", 2 * H, H)
    add_dense(p, rng, "f1_out", H, 1)
    add_dense(p, rng, "f2_out", H, 3 * K)
    return p


def _gru(P, name, xs, n_lead):
    H = np.shape(ad._val(P[f"{name}.W_hh"]))[0]
    h0 = np.zeros(n_lead + (H,))
    return gru_unroll(xs, h0, P[f"{name}.W_ih"], P[f"{name}.W_hh"], P[f"{name}.b_ih"], P[f"{name}.b_hh"])


def _dense(P, name, x, act="none"):
    return dense(x, P[f"{name}.W"], P[f"{name}.b"], act)


def encode(P, abs_x, rel_x):
    """(h_hat, h_hat_rel) from feature histories of shape (B, M, T, 7)."""
    if rel_x is None:
        raise ValueError("relative features missing")
    lead = np.shape(abs_x)[:-2]
    h = _gru(P, "f1_rec", abs_x / FEAT_SCALE, lead)
    hr = _gru(P, "f2_rec", rel_x / FEAT_SCALE, lead)
    return _dense(P, "f1_enc", h, "tanh"), _dense(P, "f2_enc", hr, "tanh")


def attend(P, hr_hat, mask=None):
    """Aggregate h_bar and attention weights alpha[b, n, i] (softmax over n)."""
    W = P["f_att.W"]
    H = np.shape(ad._val(W))[0] // 2
    u = ad.matmul(hr_hat, W[:H])                 # source part (B, M, 1)
    v = ad.matmul(hr_hat, W[H:])                 # target part (B, M, 1)
    logits = ad.leaky_relu(ad.add(ad.add(u, ad.swapaxes(v, -1, -2)), P["f_att.b"]))
    if mask is not None:
        logits = ad.add(logits, np.where(mask, 0.0, NEG)[..., :, None])
    alpha = ad.softmax(logits, axis=-2)
    h_bar = ad.matmul(ad.swapaxes(alpha, -1, -2), hr_hat)
    return h_bar, alpha


def head(P, h_hat, hr_hat, h_bar, K: int, goal_scale: float, mask=None):
    """(log w, mixture logits, mu, log sigma); w is normalized over valid nodes."""
    h_til = _dense(P, "f3_enc", ad.concat([h_hat, hr_hat], axis=-1))
    z = _dense(P, "f4_enc", ad.concat([h_bar, h_til], axis=-1), "tanh")
    o = _dense(P, "f1_out", z)[..., 0]
    # w = 1 / (1 + exp(o)) before normalization
    log_w = ad.neg(ad.softplus(o))
    if mask is not None:
        log_w = ad.add(log_w, np.where(mask, 0.0, NEG))
    log_w = ad.sub(log_w, ad.logsumexp(log_w, axis=-1, keepdims=True))
    gp = _dense(P, "f2_out", z)
    logits = gp[..., :K]
    mu = ad.mul(gp[..., K:2 * K], goal_scale)
    log_sigma = ad.add(gp[..., 2 * K:], math.log(goal_scale))
    return log_w, logits, mu, log_sigma


def forward(P, abs_x, rel_x, K, goal_scale, mask=None):
    h_hat, hr_hat = encode(P, abs_x, rel_x)
    h_bar, alpha = attend(P, hr_hat, mask)
    return head(P, h_hat, hr_hat, h_bar, K, goal_scale, mask) + (alpha,)


def batch_loss(P, batch, cfg: SgnConfig):
    """Mean over graphs of sum-of-node goal NLL plus beta times insertion cross-entropy."""
    log_w, logits, mu, log_sigma, _ = forward(P, batch["abs"], batch["rel"], cfg.K, cfg.goal_scale,
                                              batch["mask"])
    mask = batch["mask"].astype(np.float64)
    nll = ad.neg(gmm_log_prob(batch["goals"], logits, mu, log_sigma))
    goal_term = ad.sum(ad.mul(nll, mask))
    B = mask.shape[0]
    onehot = np.zeros_like(mask)
    onehot[np.arange(B), batch["label"]] = 1.0
    ce = ad.neg(ad.sum(ad.mul(log_w, onehot)))
    return ad.div(ad.add(goal_term, ad.mul(ce, cfg.beta)), float(B))


def sample_loss(P, s: SgnSample, cfg: SgnConfig):
    return batch_loss(P, collate([s]), cfg)


def collate(samples) -> dict:
    """Pad a list of samples to a common node count."""
    B = len(samples)
    M = max(s.abs.shape[0] for s in samples)
    T = samples[0].abs.shape[1]
    out = {
        "abs": np.zeros((B, M, T, N_FEATURES)), "rel": np.zeros((B, M, T, N_FEATURES)),
        "mask": np.zeros((B, M), dtype=bool), "goals": np.zeros((B, M)),
        "label": np.zeros(B, dtype=np.int64),
    }
    for b, s in enumerate(samples):
        m = s.abs.shape[0]
        out["abs"][b, :m] = s.abs
        out["rel"][b, :m] = s.rel
        out["mask"][b, :m] = True
        out["goals"][b, :m] = s.goals
        out["label"][b] = s.label
    return out


def _canonical_order(abs_x, rel_x) -> np.ndarray:
    """Node order determined by feature content only (lexicographic)."""
    flat = np.concatenate([abs_x.reshape(len(abs_x), -1), rel_x.reshape(len(rel_x), -1)], axis=1)
    return np.lexsort(flat.T[::-1])


def predict_arrays(params: ParamStore, abs_x, rel_x, K=3, goal_scale=10.0, ref=0) -> IntentionOutput:
    """Single-graph inference.

    Nodes are processed in a content-defined order and scattered back, so
    permuting the input nodes permutes every output bit for bit.
    """
    abs_x = np.asarray(abs_x, dtype=np.float64)
    rel_x = np.asarray(rel_x, dtype=np.float64)
    order = _canonical_order(abs_x, rel_x)
    P = {n: params[n] for n in params}
    log_w, logits, mu, log_sigma, alpha = forward(P, abs_x[order][None], rel_x[order][None], K, goal_scale)
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    la = logits[0] - np.max(logits[0], axis=-1, keepdims=True)
    a = np.exp(la)
    a = a / a.sum(axis=-1, keepdims=True)
    return IntentionOutput(
        w=np.exp(log_w[0])[inv], alpha=a[inv], mu=mu[0][inv], sigma=np.exp(log_sigma[0])[inv],
        attention=alpha[0][np.ix_(inv, inv)], reference_node=int(ref))


def sgn_predict(graph: SemanticGraph, params: ParamStore, cfg: SgnConfig | None = None) -> IntentionOutput:
    cfg = cfg or SgnConfig(hidden=params["f1_enc.W"].shape[0])
    return predict_arrays(params, graph.abs_array(), graph.rel_array(), cfg.K, cfg.goal_scale,
                          graph.reference_node)


def predict_batch(params: ParamStore, samples, cfg: SgnConfig):
    """Padded batched inference; returns (w, goal mean) per sample, ego node goal."""
    if not samples:
        return [], np.zeros(0)
    b = collate(samples)
    P = {n: params[n] for n in params}
    log_w, logits, mu, _, _ = forward(P, b["abs"], b["rel"], cfg.K, cfg.goal_scale, b["mask"])
    la = np.exp(logits - logits.max(axis=-1, keepdims=True))
    gm = np.sum(la / la.sum(axis=-1, keepdims=True) * mu, axis=-1)
    ws = [np.exp(log_w[i, :s.abs.shape[0]]) for i, s in enumerate(samples)]
    ego_goal = np.array([gm[i, s.ref] for i, s in enumerate(samples)])
    return ws, ego_goal


def evaluate(params, samples, cfg: SgnConfig, chunk: int = 256) -> dict:
    """Insertion accuracy and ego goal absolute error (m)."""
    if not samples:
        return {"accuracy": float("nan"), "goal_ade": float("nan"), "n": 0}
    correct, err = [], []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        ws, goal = predict_batch(params, part, cfg)
        correct += [int(np.argmax(w) == s.label) for w, s in zip(ws, part)]
        err += list(np.abs(goal - np.array([s.goals[s.ref] for s in part])))
    return {"accuracy": float(np.mean(correct)), "goal_ade": float(np.mean(err)), "n": len(samples)}


def sgn_train(samples, cfg: SgnConfig, held_out=None, params: ParamStore | None = None,
              log_every: int = 0):
    """Adam over shuffled minibatches. Returns (params, log rows).

    Log rows are dicts with step, epoch, loss and, at each epoch end, held-out
    accuracy and goal error.
    """
    if len(samples) == 0:
        raise ValueError("empty training set")
    params = params if params is not None else init_params(cfg)
    opt = Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed + 1)
    log = []
    step = 0
    n = len(samples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            batch = collate([samples[i] for i in order[start:start + cfg.batch_size]])
            tape = Tape()
            bound = params.bind(tape)
            loss = batch_loss(bound, batch, cfg)
            opt.step(backward(tape, loss, bound))
            step += 1
            if log_every and step % log_every == 0:
                log.append({"step": step, "epoch": epoch, "loss": float(loss.value)})
        row = {"step": step, "epoch": epoch, "loss": float(loss.value)}
        if held_out:
            ev = evaluate(params, held_out, cfg)
            row.update(accuracy=ev["accuracy"], goal_ade=ev["goal_ade"])
        log.append(row)
    return params, log
