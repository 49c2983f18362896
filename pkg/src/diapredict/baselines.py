"""Rule-based predictors: IDM car following, two leader-selection state machines, constant velocity.

All rollouts integrate along the ego's reference line with forward Euler at
the data rate, hold the lateral offset and extrapolate the other agents at
constant speed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import AgentTrack, SceneContext, classify

POLICIES = ("idm", "fsm_d", "fsm_t", "const_vel")
SPEED_EPS = 1e-3     # m/s, below this an agent counts as stopped


@dataclass(frozen=True)
class IdmParams:
    v0: float = 10.0
    T: float = 1.5
    a_max: float = 1.5
    b: float = 2.0
    s0: float = 2.0
    delta: float = 4.0
    b_max: float = 9.0

    def __post_init__(self):
        if min(self.v0, self.T, self.a_max, self.b, self.s0, self.b_max) <= 0 or self.delta < 1:
            raise ValueError("IDM parameters must be positive with delta >= 1")


def idm_accel(v: float, gap: float | None, dv: float, p: IdmParams = IdmParams()) -> float:
    """Acceleration for speed ``v``; ``dv`` is the closing speed v - v_leader."""
    free = 1.0 - (max(v, 0.0) / p.v0) ** p.delta
    if gap is None:
        return p.a_max * free
    if gap <= 0:
        return -p.b_max
    s_star = p.s0 + v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b))
    a = p.a_max * (free - (max(s_star, 0.0) / gap) ** 2)
    return max(a, -p.b_max)


def idm_equilibrium_gap(v: float, p: IdmParams = IdmParams()) -> float:
    """Gap at which a follower matching its leader's speed ``v`` holds that speed.

    Infinite at or above the desired speed, where only the free road is steady.
    """
    if v < 0:
        raise ValueError("speed must be non-negative")
    free = 1.0 - (v / p.v0) ** p.delta
    if free <= 0:
        return math.inf
    return (p.s0 + v * p.T) / math.sqrt(free)


@dataclass
class Other:
    agent_id: int
    kind: str               # "lane" or "crossing"
    s: float                # on its own line (crossing) or on the ego line (lane)
    v: float
    length: float = 4.5
    conflict_ego: float = math.nan   # conflict arc length on the ego line
    conflict_own: float = math.nan   # conflict arc length on the agent's line


@dataclass
class RolloutScene:
    s: float
    d: float
    v: float
    others: list = field(default_factory=list)
    length: float = 4.5


def scene_from_tracks(ego: AgentTrack, others, ctx: SceneContext, t: int) -> RolloutScene:
    el = ctx.line_of(ego)
    fe = ego.frenet(el)
    i = ego.index(t)
    sc = RolloutScene(float(fe["s"][i]), float(fe["d"][i]), max(float(fe["v_s"][i]), 0.0))
    for o in others:
        if o.agent_id == ego.agent_id or not o.has(t) or o.assigned_line is None:
            continue
        kind, cp = classify(ego, o, ctx, t)
        j = o.index(t)
        if kind == "crossing":
            f = o.frenet(ctx.line_of(o))
            sc.others.append(Other(o.agent_id, kind, float(f["s"][j]), max(float(f["v_s"][j]), 0.0),
                                   conflict_ego=cp.s_a, conflict_own=cp.s_b))
        elif kind == "lane":
            f = o.frenet(el)
            sc.others.append(Other(o.agent_id, kind, float(f["s"][j]), max(float(f["v_s"][j]), 0.0)))
    return sc


def _lane_leader(sc: RolloutScene, others):
    best = None
    for o in others:
        if o.kind == "lane" and o.s > sc.s:
            gap = o.s - sc.s - o.length
            if best is None or gap < best[1]:
                best = (o, gap)
    return best


def fsm_select_leader(sc: RolloutScene, mode: str, others=None):
    """(leader, gap) or None.

    A crossing agent qualifies when it is closer to the shared conflict point
    than the ego, by distance (``distance``) or by time at current speed
    (``time``). It is placed on the ego line at the ego's conflict arc length
    minus its own remaining distance; the nearest candidate, lane leader
    included, wins.
    """
    if mode not in ("distance", "time"):
        raise ValueError(f"unknown selection mode {mode!r}")
    others = sc.others if others is None else others
    cands = []
    lane = _lane_leader(sc, others)
    if lane is not None:
        cands.append(lane)
    for o in others:
        if o.kind != "crossing":
            continue
        rem_o = o.conflict_own - o.s
        rem_e = o.conflict_ego - sc.s
        if rem_o < 0 or rem_e < 0:
            continue
        if mode == "distance":
            ok = rem_o < rem_e
        else:
            t_o = rem_o / o.v if o.v > SPEED_EPS else math.inf
            t_e = rem_e / sc.v if sc.v > SPEED_EPS else math.inf
            ok = t_o < t_e
        if ok:
            cands.append((o, rem_e - rem_o))
    if not cands:
        return None
    return min(cands, key=lambda c: (c[1], c[0].agent_id))


def rollout(policy: str, sc: RolloutScene, T_f: int, dt: float = 0.1, idm: IdmParams = IdmParams()):
    """Future (s, d) of the ego for T_f steps, shape (T_f, 2)."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    s, v = sc.s, max(sc.v, 0.0)
    others = [Other(**o.__dict__) for o in sc.others]
    out = np.zeros((T_f, 2))
    out[:, 1] = sc.d
    for k in range(T_f):
        if policy == "const_vel":
            a = 0.0
        else:
            cur = RolloutScene(s, sc.d, v, others, sc.length)
            if policy == "idm":
                lead = _lane_leader(cur, others)
            else:
                lead = fsm_select_leader(cur, "distance" if policy == "fsm_d" else "time", others)
            a = idm_accel(v, None, 0.0, idm) if lead is None else idm_accel(v, lead[1], v - lead[0].v, idm)
        s = s + v * dt
        v = max(v + a * dt, 0.0)
        for o in others:
            o.s += o.v * dt
        out[k, 0] = s
    return out
