"""Encoder-decoder trajectory network conditioned on a goal state.

Representation
--------------
A window carries the ego's positions for frames t - T_h .. t + T_f in either
Frenet (s, d) or map (x, y) coordinates. ``apply_representation`` turns it
into network inputs (T_h steps of position, two velocity components and a
heading angle), the decoder's starting state and the targets:

* ``align``       positions are shifted so the current one is the origin
* ``incremental`` targets are per-step displacements instead of positions

Positions are snapped to a 2**-20 m grid on ingestion, so differences and
prefix sums of them are exact and the reconstruction is bit-exact.

Decoder
-------
Step k feeds [position / 10, previous increment] plus, depending on the
intention mode, [goal / 10, k / T_f]. The GRU output passes through
fc1 (tanh), fc2 (tanh), fc3 (linear) to give two numbers: a displacement in
meters (incremental) or a position in units of 10 m.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Adam, ParamStore, Tape, backward
from .nn import autodiff as ad
from .nn.layers import dense, gru_step, gru_unroll
from .nn.params import add_dense, add_gru

MODES = ("input", "output", "hidden", "transform", "none")
COORDS = ("frenet", "cartesian")
GRID = 2.0 ** -20
POS_SCALE = 10.0
VEL_SCALE = 10.0
N_IN = 5

# adaptation names -> parameter tensors
LAYER_ALIASES = {
    "W^E_ih": ("enc.W_ih", "enc.b_ih"), "W^E_hh": ("enc.W_hh", "enc.b_hh"),
    "W^D_ih": ("dec.W_ih", "dec.b_ih"), "W^D_hh": ("dec.W_hh", "dec.b_hh"),
    "W^F_1": ("fc1.W", "fc1.b"), "W^F_2": ("fc2.W", "fc2.b"), "W^F_3": ("fc3.W", "fc3.b"),
}


def canonical_layer(name: str) -> str:
    """Accept W^F_3, W_F3, WF3, fc3 style spellings."""
    key = name.strip().replace("^", "").replace("_", "").upper()
    for canon in LAYER_ALIASES:
        if canon.replace("^", "").replace("_", "").upper() == key:
            return canon
    short = {"FC1": "W^F_1", "FC2": "W^F_2", "FC3": "W^F_3", "ENCIH": "W^E_ih", "ENCHH": "W^E_hh",
             "DECIH": "W^D_ih", "DECHH": "W^D_hh"}
    if key in short:
        return short[key]
    raise KeyError(f"unknown layer name {name!r}")


def snap(x):
    """Round to the 2**-20 m grid (exact arithmetic for |x| < 2**32 m)."""
    return np.round(np.asarray(x, dtype=np.float64) / GRID) * GRID


@dataclass
class EdnConfig:
    hidden: int = 64
    T_h: int = 10
    T_f: int = 30
    mode: str = "input"
    coordinate: str = "frenet"
    incremental: bool = True
    align: bool = True
    dropout: float = 0.1
    goal_scale: float = 10.0
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    clip_norm: float = 5.0
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown intention mode {self.mode!r}")
        if self.coordinate not in COORDS:
            raise ValueError(f"unknown coordinate system {self.coordinate!r}")
        if self.mode == "transform" and self.coordinate != "frenet":
            raise ValueError("transform mode needs Frenet coordinates")
        if self.T_f <= 0 or self.T_h <= 0:
            raise ValueError("T_h and T_f must be positive")

    @property
    def n_extra_in(self) -> int:
        return {"input": 2, "output": 0, "hidden": 1, "transform": 1, "none": 0}[self.mode]

    @property
    def n_extra_out(self) -> int:
        return 2 if self.mode == "output" else 0

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Window:
    """Raw ego motion around frame t (index T_h in every array)."""

    pos: np.ndarray        # (T_h + 1 + T_f, 2) positions in the chosen frame, grid-snapped
    vel: np.ndarray        # (T_h + 1 + T_f, 2) v_s, v_d  or  vx, vy
    heading: np.ndarray    # (T_h + 1 + T_f,) phi or psi
    goal: float            # traveled distance along the reference line over T_f (m)
    line_id: str | None = None
    agent_id: int | None = None
    t: int | None = None


@dataclass
class Batch:
    inputs: np.ndarray     # (B, T_h, 5)
    pos0: np.ndarray       # (B, 2) decoder start position (meters, representation frame)
    inc0: np.ndarray       # (B, 2) last observed increment (meters)
    goal: np.ndarray       # (B,)
    targets: np.ndarray    # (B, T_f, 2) meters
    origin: np.ndarray     # (B, 2) added back by the reconstruction
    prev: np.ndarray       # (B, 2) position at t, for non-incremental differencing

    def __len__(self):
        return len(self.inputs)

    def take(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in
                       ("inputs", "pos0", "inc0", "goal", "targets", "origin", "prev")))


def apply_representation(windows, cfg: EdnConfig, goals=None) -> Batch:
    """Stack windows into network inputs and targets.

    ``goals`` overrides the windows' own goal (e.g. predicted goals at eval time).
    """
    T_h, T_f = cfg.T_h, cfg.T_f
    pos = np.stack([w.pos for w in windows])
    vel = np.stack([w.vel for w in windows])
    hd = np.stack([w.heading for w in windows])
    if pos.shape[1] < T_h + 1 + T_f:
        raise ValueError("window shorter than T_h + 1 + T_f")
    cur = pos[:, T_h]
    origin = cur if cfg.align else np.zeros_like(cur)
    hist = pos[:, 1:T_h + 1] - origin[:, None]
    inputs = np.concatenate([hist / POS_SCALE, vel[:, 1:T_h + 1] / VEL_SCALE, hd[:, 1:T_h + 1, None]], axis=-1)
    fut = pos[:, T_h + 1:T_h + 1 + T_f]
    if cfg.incremental:
        targets = np.diff(pos[:, T_h:T_h + 1 + T_f], axis=1)
    else:
        targets = fut - origin[:, None]
    goal = np.array([w.goal for w in windows], dtype=np.float64) if goals is None else np.asarray(goals, dtype=np.float64)
    return Batch(inputs, cur - origin, cur - pos[:, T_h - 1], goal, targets, origin, cur)


def reconstruct(outputs, batch: Batch, cfg: EdnConfig) -> np.ndarray:
    """Absolute future positions (B, T_f, 2) in the representation frame."""
    outputs = np.asarray(outputs)
    if cfg.incremental:
        return batch.prev[:, None] + np.cumsum(outputs, axis=1)
    return outputs + batch.origin[:, None]


def init_params(cfg: EdnConfig, seed: int | None = None) -> ParamStore:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    H = cfg.hidden
    p = ParamStore()
    add_gru(p, rng, "enc", N_IN, H)
    add_gru(p, rng, "dec", 4 + cfg.n_extra_in, H)
    add_dense(p, rng, "fc1", H + cfg.n_extra_out, H)
    add_dense(p, rng, "fc2", H, H)
    add_dense(p, rng, "fc3", H, 2)
    if cfg.mode == "hidden":
        add_dense(p, rng, "goal_emb", 1, H)
    return p


def zero_params(cfg: EdnConfig) -> ParamStore:
    p = init_params(cfg)
    for n in p:
        p.set(n, np.zeros_like(p[n]))
    return p


def edn_encode(P, inputs):
    """Context vector: the encoder's last hidden state."""
    if np.shape(inputs)[-1] != N_IN:
        raise ValueError(f"expected {N_IN} input features, got {np.shape(inputs)[-1]}")
    H = np.shape(ad._val(P["enc.W_hh"]))[0]
    h0 = np.zeros(np.shape(inputs)[:-2] + (H,))
    return gru_unroll(inputs, h0, P["enc.W_ih"], P["enc.W_hh"], P["enc.b_ih"], P["enc.b_hh"])


def edn_decode(P, c, batch: Batch, cfg: EdnConfig, T_f: int | None = None, rng=None):
    """Roll the decoder for ``T_f`` steps. Returns outputs (B, T_f, 2) in meters.

    ``rng`` switches dropout on (training).
    """
    T_f = cfg.T_f if T_f is None else T_f
    if T_f <= 0:
        raise ValueError("T_f must be positive")
    B = len(batch)
    g = (batch.goal / cfg.goal_scale)[:, None]
    pos = batch.pos0.copy()
    if cfg.mode == "transform":
        pos = pos - np.stack([batch.goal, np.zeros(B)], axis=1)
    inc = batch.inc0
    h = c
    if cfg.mode == "hidden":
        h = ad.add(h, dense(g, P["goal_emb.W"], P["goal_emb.b"]))
    outs = []
    keep = 1.0 - cfg.dropout
    for k in range(1, T_f + 1):
        step = np.full((B, 1), k / cfg.T_f)
        parts = [ad.mul(pos, 1.0 / POS_SCALE), inc]
        if cfg.mode == "input":
            parts += [g, step]
        elif cfg.mode in ("hidden", "transform"):
            parts += [step]
        x = ad.concat(parts, axis=-1)
        h = gru_step(x, h, P["dec.W_ih"], P["dec.W_hh"], P["dec.b_ih"], P["dec.b_hh"])
        o = ad.concat([h, g, step], axis=-1) if cfg.mode == "output" else h
        z = dense(o, P["fc1.W"], P["fc1.b"], "tanh")
        if rng is not None and cfg.dropout > 0:
            z = ad.mul(z, (rng.random(np.shape(ad._val(z))) < keep) / keep)
        z = dense(z, P["fc2.W"], P["fc2.b"], "tanh")
        if rng is not None and cfg.dropout > 0:
            z = ad.mul(z, (rng.random(np.shape(ad._val(z))) < keep) / keep)
        y = dense(z, P["fc3.W"], P["fc3.b"])
        if cfg.incremental:
            inc = y
            pos = ad.add(pos, y)
            outs.append(y)
        else:
            new = ad.mul(y, POS_SCALE)
            if cfg.mode == "transform":
                new_abs = ad.add(new, np.stack([batch.goal, np.zeros(B)], axis=1))
            else:
                new_abs = new
            prev = pos if cfg.mode != "transform" else ad.add(pos, np.stack([batch.goal, np.zeros(B)], axis=1))
            inc = ad.sub(new_abs, prev)
            pos = new
            outs.append(new_abs)
    return ad.stack(outs, axis=1)


def forward(P, batch: Batch, cfg: EdnConfig, T_f: int | None = None, rng=None):
    return edn_decode(P, edn_encode(P, batch.inputs), batch, cfg, T_f, rng)


def edn_loss(pred, truth):
    """Sum of squared errors over every step and feature."""
    if np.shape(ad._val(pred)) != np.shape(ad._val(truth)):
        raise ValueError(f"shape mismatch {np.shape(ad._val(pred))} vs {np.shape(ad._val(truth))}")
    return ad.sum(ad.square(ad.sub(pred, truth)))


def batch_loss(P, batch: Batch, cfg: EdnConfig, rng=None):
    """Per-sample summed squared error, averaged over the batch."""
    out = forward(P, batch, cfg, rng=rng)
    return ad.div(edn_loss(out, batch.targets), float(len(batch)))


def predict(params, batch: Batch, cfg: EdnConfig, chunk: int = 512) -> np.ndarray:
    """Absolute future positions (B, T_f, 2) in the representation frame."""
    P = {n: params[n] for n in params}
    res = []
    for i in range(0, len(batch), chunk):
        part = batch.take(slice(i, i + chunk))
        res.append(reconstruct(forward(P, part, cfg), part, cfg))
    return np.concatenate(res) if res else np.zeros((0, cfg.T_f, 2))


def edn_train(batch: Batch, cfg: EdnConfig, params: ParamStore | None = None, log_every: int = 0,
              held_out: Batch | None = None, metric=None):
    """Adam over shuffled minibatches; returns (params, log rows)."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty training set")
    params = params if params is not None else init_params(cfg)
    opt = Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed + 1)
    drop_rng = np.random.default_rng(cfg.seed + 2)
    log, step = [], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            mb = batch.take(order[start:start + cfg.batch_size])
            tape = Tape()
            bound = params.bind(tape)
            loss = batch_loss(bound, mb, cfg, rng=drop_rng)
            opt.step(backward(tape, loss, bound))
            step += 1
            if log_every and step % log_every == 0:
                log.append({"step": step, "epoch": epoch, "loss": float(loss.value)})
        row = {"step": step, "epoch": epoch, "loss": float(loss.value)}
        if held_out is not None and metric is not None:
            row["val_ade"] = float(metric(params, held_out))
        log.append(row)
    return params, log


def step_errors(pred_xy, true_xy) -> np.ndarray:
    """Euclidean error per sample and step (B, T_f)."""
    return np.hypot(*(np.asarray(pred_xy) - np.asarray(true_xy)).transpose(2, 0, 1))
