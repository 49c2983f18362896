"""Differentiable building blocks shared by the intention and trajectory networks."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("none", "tanh", "leaky_relu", "sigmoid")
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(ad.asarray(a))):
            raise ValueError("non-finite values in layer input")


def dense(x, W, b, activation: str = "none"):
    """``activation(x @ W + b)`` over the last axis of ``x``."""
    xs, ws, bs = np.shape(ad._val(x)), np.shape(ad._val(W)), np.shape(ad._val(b))
    if len(ws) != 2 or xs[-1] != ws[0] or bs != (ws[1],):
        raise ValueError(f"dense shape mismatch: x{xs} W{ws} b{bs}")
    y = ad.add(ad.matmul(x, W), b)
    if activation == "none":
        return y
    if activation == "tanh":
        return ad.tanh(y)
    if activation == "leaky_relu":
        return ad.leaky_relu(y)
    if activation == "sigmoid":
        return ad.sigmoid(y)
    raise ValueError(f"unknown activation {activation!r}")


def gru_step(x, h, W_ih, W_hh, b_ih, b_hh):
    """One gated-recurrent-unit update.

    Gate columns are ordered (update z, reset r, candidate n), each of width H:

        z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
        r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h

    so ``z`` gates how much of the *old* state survives.
    """
    H = np.shape(ad._val(h))[-1]
    if np.shape(ad._val(W_hh)) != (H, 3 * H) or np.shape(ad._val(W_ih))[-1] != 3 * H:
        raise ValueError("gru parameter shapes do not match hidden size")
    if np.shape(ad._val(x))[-1] != np.shape(ad._val(W_ih))[0]:
        raise ValueError("gru input width does not match W_ih")
    gi = ad.add(ad.matmul(x, W_ih), b_ih)
    gh = ad.add(ad.matmul(h, W_hh), b_hh)
    return gru_combine(gi, gh, h)


def gru_combine(gi, gh, h):
    """Gate arithmetic given precomputed input and hidden projections."""
    H = np.shape(ad._val(h))[-1]
    zr = ad.sigmoid(ad.add(gi[..., :2 * H], gh[..., :2 * H]))
    z, r = zr[..., :H], zr[..., H:]
    n = ad.tanh(ad.add(gi[..., 2 * H:], ad.mul(r, gh[..., 2 * H:])))
    # (1 - z) * n + z * h, written with one product
    return ad.add(n, ad.mul(z, ad.sub(h, n)))


def gru_unroll(xs, h0, W_ih, W_hh, b_ih, b_hh):
    """Run a GRU over ``xs`` of shape (..., T, F); returns the last hidden state.

    The input projection for all steps is one matmul; only the recurrent part
    is sequential.
    """
    if not any(isinstance(a, ad.Var) for a in (xs, h0, W_ih, W_hh, b_ih, b_hh)):
        return _gru_unroll_numpy(np.asarray(xs, dtype=np.float64), np.asarray(h0, dtype=np.float64),
                                 W_ih, W_hh, b_ih, b_hh)
    T = np.shape(ad._val(xs))[-2]
    gi_all = ad.add(ad.matmul(xs, W_ih), b_ih)
    h = h0
    for t in range(T):
        gh = ad.add(ad.matmul(h, W_hh), b_hh)
        h = gru_combine(gi_all[..., t, :], gh, h)
    return h


def _gru_unroll_numpy(xs, h0, W_ih, W_hh, b_ih, b_hh):
    """Inference-only unroll.

    Each gate gets its own contiguous buffer (time-major for the input part)
    and the gate math runs in place; strided gate slices are several times
    slower in the elementwise passes.
    """
    lead, (T, F) = xs.shape[:-2], xs.shape[-2:]
    H = W_hh.shape[0]
    X = np.ascontiguousarray(np.moveaxis(xs.reshape(-1, T, F), 1, 0)).reshape(-1, F)
    N = X.shape[0] // T if T else 0
    cols = [slice(g * H, (g + 1) * H) for g in range(3)]
    Wz, Wr, Wn = (np.ascontiguousarray(W_hh[:, c]) for c in cols)
    giz = (X @ W_ih[:, cols[0]]).reshape(T, N, H)
    giz += b_ih[cols[0]] + b_hh[cols[0]]
    gir = (X @ W_ih[:, cols[1]]).reshape(T, N, H)
    gir += b_ih[cols[1]] + b_hh[cols[1]]
    gin = (X @ W_ih[:, cols[2]]).reshape(T, N, H)
    gin += b_ih[cols[2]]
    b_hn = b_hh[cols[2]]
    h = np.array(np.broadcast_to(h0, lead + (H,)), dtype=np.float64).reshape(N, H)
    for t in range(T):
        z = h @ Wz
        z += giz[t]
        z *= 0.5
        np.tanh(z, out=z)
        z *= 0.5
        z += 0.5
        r = h @ Wr
        r += gir[t]
        r *= 0.5
        np.tanh(r, out=r)
        r *= 0.5
        r += 0.5
        n = h @ Wn
        n += b_hn
        n *= r
        n += gin[t]
        np.tanh(n, out=n)
        h -= n
        h *= z
        h += n
    return h.reshape(lead + (H,))


def softmax(v):
    """Probability vector from scores, max-shifted for stability."""
    arr = ad.asarray(v)
    if arr.size == 0:
        raise ValueError("softmax of an empty vector")
    _check_finite(arr)
    return ad.softmax(v, axis=-1)


def gmm_log_prob(g, alpha_logits, mu, log_sigma):
    """Log density of scalar ``g`` under a 1-D Gaussian mixture.

    Mixing weights are ``softmax(alpha_logits)`` and scales ``exp(log_sigma)``;
    all parameter arrays have K on their last axis and ``g`` broadcasts against
    the leading axes.
    """
    log_alpha = ad.sub(alpha_logits, ad.logsumexp(alpha_logits, axis=-1, keepdims=True))
    gv = g if isinstance(g, ad.Var) else np.asarray(g, dtype=np.float64)[..., None]
    if isinstance(g, ad.Var):
        gv = ad.reshape(g, np.shape(g.value) + (1,))
    resid = ad.mul(ad.sub(gv, mu), ad.exp(ad.neg(log_sigma)))
    comp = ad.sub(ad.sub(log_alpha, log_sigma), ad.add(ad.mul(0.5, ad.square(resid)), LOG_SQRT_2PI))
    return ad.logsumexp(comp, axis=-1)


def gmm_nll(g, alpha_logits, mu, log_sigma):
    """Negative log-likelihood ``-log sum_k alpha_k N(g; mu_k, sigma_k^2)``."""
    _check_finite(g, alpha_logits, mu, log_sigma)
    return ad.neg(gmm_log_prob(g, alpha_logits, mu, log_sigma))


def gmm_mean(alpha_logits, mu):
    """Mixture mean ``sum_k alpha_k mu_k`` (numpy only)."""
    alpha = ad.softmax(ad.asarray(alpha_logits), axis=-1)
    return np.sum(alpha * ad.asarray(mu), axis=-1)


def gmm_density(x, alpha, mu, sigma):
    """Plain-numpy mixture density on a grid, used by quadrature checks."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    comp = np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))
    return np.sum(alpha * comp, axis=-1)
