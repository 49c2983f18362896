"""Online adaptation of selected trajectory-network layers with a forgetting-factor EKF.

The network parameters of the chosen layers are the filter state. Each cycle
compares the first tau steps of a prediction made tau steps ago with what was
then observed, and folds that innovation into the parameters:

    K = P H^T (H P H^T + R)^-1
    theta <- theta + K (Y - Y_hat)
    P <- (P - K H P + Q) / lambda

Innovations and Jacobian rows are flattened step-major, feature-minor, on the
network's raw per-step outputs (displacements in meters for the incremental
representation).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import edn
from .nn import Tape, jacobian


@dataclass
class AdaptConfig:
    tau: int = 3
    lam: float = 0.99
    sigma_q: float = 1e-6
    sigma_r: float = 1e-2
    p0: float = 1e-2
    layers: tuple = ("W^F_3",)

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be at least 1")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")
        if self.sigma_r <= 0 or self.sigma_q < 0 or self.p0 <= 0:
            raise ValueError("noise scales must be positive (sigma_q may be 0)")


def select_adapt_layers(names) -> list[str]:
    """Parameter tensor names for the requested layers, in a fixed order."""
    names = list(names)
    if not names:
        raise ValueError("empty adaptation layer selection")
    out = []
    for n in names:
        for t in edn.LAYER_ALIASES[edn.canonical_layer(n)]:
            if t not in out:
                out.append(t)
    return out


@dataclass
class AdaptationState:
    names: list
    theta: np.ndarray
    P: np.ndarray
    lam: float = 0.99
    sigma_q: float = 1e-6
    sigma_r: float = 1e-2
    capacity: int = 10
    buffer: deque = field(default_factory=deque)
    n_updates: int = 0

    @classmethod
    def create(cls, params, cfg: AdaptConfig, capacity: int | None = None):
        names = select_adapt_layers(cfg.layers)
        missing = [n for n in names if n not in params]
        if missing:
            raise KeyError(f"parameters {missing} not present in the network")
        theta = params.flatten(names)
        return cls(names, theta, cfg.p0 * np.eye(theta.size), cfg.lam, cfg.sigma_q, cfg.sigma_r,
                   capacity or max(cfg.tau, 1) + 1)

    def push(self, t: int, pred, snapshot) -> None:
        if self.buffer and t <= self.buffer[-1][0]:
            raise ValueError("buffer timestamps must increase")
        self.buffer.append((t, np.asarray(pred), snapshot))
        while len(self.buffer) > self.capacity:
            self.buffer.popleft()

    def lookup(self, t: int):
        for entry in self.buffer:
            if entry[0] == t:
                return entry
        return None


def mekf_update(state: AdaptationState, H, innovation) -> AdaptationState:
    """One filter update in place; returns ``state``."""
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    e = np.ravel(np.asarray(innovation, dtype=np.float64))
    n = state.theta.size
    if H.shape != (e.size, n):
        raise ValueError(f"H has shape {H.shape}, expected {(e.size, n)}")
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(e))):
        raise ValueError("non-finite Jacobian or innovation")
    P = state.P
    PHt = P @ H.T
    S = H @ PHt + state.sigma_r * np.eye(e.size)
    try:
        K = np.linalg.solve(S, PHt.T).T
    except np.linalg.LinAlgError as exc:
        raise ValueError("innovation covariance is singular") from exc
    state.theta = state.theta + K @ e
    P = (P - K @ PHt.T + state.sigma_q * np.eye(n)) / state.lam
    state.P = 0.5 * (P + P.T)
    state.n_updates += 1
    return state


def output_jacobian(params, names, batch: edn.Batch, cfg: edn.EdnConfig, steps: int):
    """Raw outputs of the first ``steps`` decode steps and their Jacobian w.r.t. ``names``.

    Only the selected tensors are recorded on the tape. Batch must hold one sample.
    """
    tape = Tape()
    P = {n: params[n] for n in params}
    bound = {n: tape.watch(params[n], name=n) for n in names}
    P.update(bound)
    out = edn.forward(P, batch, cfg, T_f=steps)
    return out.value[0], jacobian(tape, out, bound, names)


def adapted_params(base, state: AdaptationState):
    p = base.copy()
    p.unflatten(state.names, state.theta)
    return p


def multi_step_adapt(state: AdaptationState, base, t: int, observed, tau: int, cfg: edn.EdnConfig):
    """Adapt from the prediction buffered at ``t - tau``.

    ``observed`` holds the raw outputs actually realized over the first ``tau``
    steps after ``t - tau`` (tau, 2). Returns True when an update happened;
    a warm-up cycle or a buffer miss leaves the state untouched.
    """
    if t < tau:
        return False
    entry = state.lookup(t - tau)
    if entry is None:
        return False
    _, pred, snap = entry
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != (tau, pred.shape[-1]):
        raise ValueError(f"observed window has shape {observed.shape}, expected {(tau, pred.shape[-1])}")
    current = adapted_params(base, state)
    _, H = output_jacobian(current, state.names, snap, cfg, tau)
    mekf_update(state, H, (observed - pred[:tau]).ravel())
    return True


def ade_windows(past_pred, past_true, cur_pred, cur_true, tau: int) -> dict:
    """The four adaptation windows.

    past_*: (T_f, 2) prediction issued at t - tau by the adapted model and truth;
    cur_*:  (T_f, 2) prediction issued at t and truth.
    """
    past_pred, past_true = np.asarray(past_pred), np.asarray(past_true)
    cur_pred, cur_true = np.asarray(cur_pred), np.asarray(cur_true)
    T_f = past_pred.shape[0]
    if not 1 <= tau <= T_f or past_true.shape[0] < T_f or cur_true.shape[0] < T_f:
        raise ValueError("insufficient history for the adaptation windows")
    ep = np.linalg.norm(past_pred - past_true[:T_f], axis=-1)
    ec = np.linalg.norm(cur_pred - cur_true[:T_f], axis=-1)
    return {"ade1": float(ep[:tau].mean()), "ade2": float(ec[:tau].mean()),
            "ade3": float(ep.mean()), "ade4": float(ec.mean())}


def compute_adapt_metrics(records, tau: int) -> dict:
    """Average adapted and unadapted windows over cycles.

    ``records``: iterable of dicts with keys past_pred, past_base, past_true,
    cur_pred, cur_base, cur_true. Improvements are relative reductions.
    """
    records = list(records)
    if not records:
        raise ValueError("no adaptation cycles to score")
    ad = [ade_windows(r["past_pred"], r["past_true"], r["cur_pred"], r["cur_true"], tau) for r in records]
    base = [ade_windows(r["past_base"], r["past_true"], r["cur_base"], r["cur_true"], tau) for r in records]
    out = {"n": len(records), "tau": tau}
    for k in ("ade1", "ade2", "ade3", "ade4"):
        a = float(np.mean([m[k] for m in ad]))
        b = float(np.mean([m[k] for m in base]))
        out[k] = a
        out[k + "_base"] = b
        out[k + "_delta"] = b - a
        out[k + "_improvement"] = (b - a) / b if b > 0 else 0.0
    return out


def adapt_stream(params, cfg: edn.EdnConfig, acfg: AdaptConfig, batches, true_outputs, true_pos):
    """Replay one agent's consecutive frames with a private filter.

    batches: single-sample Batches for frames 0..n-1 (consecutive, one frame apart).
    true_outputs: (n, T_f, 2) realized raw outputs for each frame.
    true_pos: (n, T_f, 2) realized positions (representation frame).
    Returns (state, per-cycle records usable by compute_adapt_metrics).
    """
    tau = acfg.tau
    state = AdaptationState.create(params, acfg)
    records = []
    base_pred = {}
    for t, b in enumerate(batches):
        if t >= tau:
            multi_step_adapt(state, params, t, true_outputs[t - tau][:tau], tau, cfg)
        cur = adapted_params(params, state) if state.n_updates else params
        raw = edn.forward({n: cur[n] for n in cur}, b, cfg)[0]
        state.push(t, raw, b)
        base_raw = edn.forward({n: params[n] for n in params}, b, cfg)[0]
        base_pred[t] = base_raw
        if t >= tau and state.n_updates:
            pb = batches[t - tau]
            past_raw = edn.forward({n: cur[n] for n in cur}, pb, cfg)[0]
            records.append({
                "t": t,
                "past_pred": edn.reconstruct(past_raw[None], pb, cfg)[0],
                "past_base": edn.reconstruct(base_pred[t - tau][None], pb, cfg)[0],
                "past_true": true_pos[t - tau],
                "cur_pred": edn.reconstruct(raw[None], b, cfg)[0],
                "cur_base": edn.reconstruct(base_raw[None], b, cfg)[0],
                "cur_true": true_pos[t],
            })
        base_pred.pop(t - tau - 1, None)
    return state, records
