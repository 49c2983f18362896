"""Interacting-agent selection, insertion-area extraction and semantic graphs.

Every slot ("DIA") is bounded longitudinally by a front and a rear boundary.
Boundaries are agents or virtual markers. Distances are measured as
remaining arc length to a conflict point on the boundary agent's own line, so
agents on different crossing lines share a single axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import ConflictPoint, ReferenceLine, conflict_point, project_points, wrap_angle

N_FEATURES = 7
FEATURES = ("d_f", "v_f", "phi_f", "d_r", "v_r", "phi_r", "l")
SAME_LANE_TOL = 1.0   # m, lateral tolerance for "on ego's line"


@dataclass(eq=False)
class AgentTrack:
    """Track of one agent. ``frames`` columns: timestamp_ms, x, y, vx, vy, psi."""

    agent_id: int
    frame_ids: np.ndarray
    frames: np.ndarray
    assigned_line: str | None = None
    agent_type: str = "car"
    _frenet: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        self.frames = np.asarray(self.frames, dtype=np.float64).reshape(-1, 6)
        if len(self.frame_ids) != len(self.frames):
            raise ValueError("frame ids and frames differ in length")
        if len(self.frame_ids) > 1 and np.any(np.diff(self.frames[:, 0]) <= 0):
            raise ValueError(f"agent {self.agent_id}: timestamps not strictly increasing")

    @property
    def first(self) -> int:
        return int(self.frame_ids[0])

    @property
    def last(self) -> int:
        return int(self.frame_ids[-1])

    def has(self, k: int) -> bool:
        return self.first <= k <= self.last

    def index(self, k) -> np.ndarray:
        """Row index for frame ids, clamped to the track span (back/forward fill)."""
        return np.clip(np.asarray(k) - self.first, 0, len(self.frame_ids) - 1)

    @property
    def xy(self) -> np.ndarray:
        return self.frames[:, 1:3]

    def frenet(self, line: ReferenceLine) -> dict:
        """Cached Frenet arrays (s, d, v_s, v_d, phi) of the whole track on ``line``."""
        if line.id not in self._frenet:
            s, d, k = project_points(self.xy, line)
            tang = np.arctan2(line.seg_vec[k, 1], line.seg_vec[k, 0])
            phi = wrap_angle(self.frames[:, 5] - tang)
            speed = np.hypot(self.frames[:, 3], self.frames[:, 4])
            self._frenet[line.id] = {
                "s": s, "d": d, "phi": np.atleast_1d(phi),
                "v_s": speed * np.cos(phi), "v_d": speed * np.sin(phi),
            }
        return self._frenet[line.id]


@dataclass(frozen=True)
class Boundary:
    agent_id: int | None        # None for a virtual boundary
    conflict_s: float           # arc length of the reference conflict on the agent's line
    line_id: str | None = None


@dataclass
class DIA:
    id: int
    kind: str                   # ref | conflict | between | trail
    front: Boundary
    rear: Boundary
    abs_features: np.ndarray    # (T_h, 7)
    rel_features: np.ndarray | None = None

    @property
    def front_agent(self):
        return self.front.agent_id

    @property
    def rear_agent(self):
        return self.rear.agent_id


@dataclass
class SemanticGraph:
    nodes: list
    reference_node: int
    t: int
    T_h: int
    ego_id: int | None = None
    ego_conflict_s: float = 0.0          # ego arc length of the nearest conflict (or virtual one)
    crossing: tuple = ()                  # (agent_id, s on ego line, s on agent line), axis order
    has_conflict: bool = False

    @property
    def M(self) -> int:
        return len(self.nodes)

    def abs_array(self) -> np.ndarray:
        return np.stack([n.abs_features for n in self.nodes])

    def rel_array(self) -> np.ndarray:
        if any(n.rel_features is None for n in self.nodes):
            raise ValueError("relative features not computed")
        return np.stack([n.rel_features for n in self.nodes])

    def permuted(self, perm) -> "SemanticGraph":
        """Same graph with nodes reordered by ``perm`` (new i <- old perm[i])."""
        perm = list(perm)
        return replace(self, nodes=[self.nodes[p] for p in perm],
                       reference_node=perm.index(self.reference_node))


class SceneContext:
    """Reference lines plus cached pairwise conflict points."""

    def __init__(self, lines: dict[str, ReferenceLine]):
        self.lines = dict(lines)
        self._cp: dict = {}

    def conflict(self, a: str, b: str) -> ConflictPoint | None:
        key = (a, b)
        if key not in self._cp:
            self._cp[key] = conflict_point(self.lines[a], self.lines[b])
        return self._cp[key]

    def line_of(self, track: AgentTrack) -> ReferenceLine:
        if track.assigned_line is None:
            raise ValueError(f"agent {track.agent_id} has no assigned reference line")
        return self.lines[track.assigned_line]


def _s_on(track: AgentTrack, line: ReferenceLine, k):
    return track.frenet(line)["s"][track.index(k)]


def classify(ego: AgentTrack, other: AgentTrack, ctx: SceneContext, t: int):
    """('crossing', cp) / ('lane', None) / (None, None) for one agent at frame t."""
    el = ctx.line_of(ego)
    ol = ctx.line_of(other)
    s_e = float(_s_on(ego, el, t))
    if ol.id != el.id:
        cp = ctx.conflict(el.id, ol.id)
        s_o = float(_s_on(other, ol, t))
        if cp is not None and s_o < cp.s_b and cp.s_a > s_e:
            return "crossing", cp
    # shares ego's line: currently on it (within tolerance) and ahead
    f = other.frenet(el)
    i = other.index(t)
    if abs(f["d"][i]) < SAME_LANE_TOL and s_e < f["s"][i] < el.length:
        return "lane", None
    return None, None


def select_interacting(ego: AgentTrack, others, ctx: SceneContext, t: int, m_max: int = 6):
    """Agent ids that interact with ``ego`` at frame ``t``, nearest first, at most ``m_max``."""
    ctx.line_of(ego)
    if not ego.has(t):
        raise ValueError(f"ego {ego.agent_id} not present at frame {t}")
    exy = ego.xy[ego.index(t)]
    picked = []
    for o in others:
        if o.agent_id == ego.agent_id or not o.has(t) or o.assigned_line is None:
            continue
        kind, _ = classify(ego, o, ctx, t)
        if kind is not None:
            dist = float(np.hypot(*(o.xy[o.index(t)] - exy)))
            picked.append((dist, o.agent_id))
    picked.sort()
    return [aid for _, aid in picked[:m_max]]


def _boundary_series(track: AgentTrack | None, line: ReferenceLine | None, conflict_s: float,
                     steps: np.ndarray, virtual_d: float = 0.0):
    """(d, v, phi) histories over ``steps`` for one boundary."""
    if track is None:
        n = len(steps)
        return np.full(n, float(virtual_d)), np.zeros(n), np.zeros(n)
    f = track.frenet(line)
    idx = track.index(steps)
    return conflict_s - f["s"][idx], f["v_s"][idx], f["phi"][idx]


def _features(front, rear):
    d_f, v_f, p_f = front
    d_r, v_r, p_r = rear
    return np.stack([d_f, v_f, p_f, d_r, v_r, p_r, d_r - d_f], axis=1)


def extract_dias(ego: AgentTrack, interacting, ctx: SceneContext, t: int, T_h: int,
                 D_h: float = 100.0) -> SemanticGraph:
    """Build the insertion-area nodes (absolute features only) at frame ``t``.

    Node 0 is the ego's front area. Crossing agents are sorted by remaining
    distance to their conflict with the ego's line; the areas are the slot
    next to the conflict point, the slots between consecutive crossing agents
    and the slot behind the last one.
    """
    el = ctx.line_of(ego)
    steps = np.arange(t - T_h + 1, t + 1)
    s_e = float(_s_on(ego, el, t))
    by_id = {o.agent_id: o for o in interacting}

    crossing, lane = [], []
    for aid in sorted(by_id):
        o = by_id[aid]
        kind, cp = classify(ego, o, ctx, t)
        if kind == "crossing":
            s_o = float(_s_on(o, ctx.line_of(o), t))
            crossing.append((cp.s_b - s_o, aid, cp))
        elif kind == "lane":
            lane.append(o)
    crossing.sort(key=lambda c: (c[0], c[1]))

    if crossing:
        ego_cs = min(c[2].s_a for c in crossing)
        has_conflict = True
    else:
        ego_cs = s_e + D_h
        has_conflict = False

    # same-lane leader before the conflict bounds the ego's area, else the conflict does
    leader, leader_s = None, np.inf
    for o in lane:
        s_p = float(o.frenet(el)["s"][o.index(t)])
        if s_p < ego_cs and (s_p < leader_s or (s_p == leader_s and o.agent_id < leader.agent_id)):
            leader, leader_s = o, s_p

    ego_rear = Boundary(ego.agent_id, ego_cs, el.id)
    if leader is not None:
        # leader measured on the ego's line so both boundaries share one axis
        s_hist = leader.frenet(el)["s"][leader.index(steps)]
        fl = leader.frenet(ctx.line_of(leader))
        li = leader.index(steps)
        front_series = (ego_cs - s_hist, fl["v_s"][li], fl["phi"][li])
        front = Boundary(leader.agent_id, ego_cs, el.id)
    else:
        front_series = _boundary_series(None, None, 0.0, steps, 0.0)
        front = Boundary(None, ego_cs, el.id)
    nodes = [DIA(0, "ref", front, ego_rear,
                 _features(front_series, _boundary_series(ego, el, ego_cs, steps)))]

    series = []
    for _, aid, cp in crossing:
        o = by_id[aid]
        ol = ctx.line_of(o)
        series.append((Boundary(aid, cp.s_b, ol.id), _boundary_series(o, ol, cp.s_b, steps)))
    if crossing:
        virt_front = (Boundary(None, 0.0), _boundary_series(None, None, 0.0, steps, 0.0))
        d_last = float(series[-1][1][0][-1])
        virt_rear_d = max(D_h, d_last)
        virt_rear = (Boundary(None, virt_rear_d), _boundary_series(None, None, 0.0, steps, virt_rear_d))
        chain = [virt_front] + series + [virt_rear]
        for i in range(len(chain) - 1):
            kind = "conflict" if i == 0 else ("trail" if i == len(chain) - 2 else "between")
            (bf, sf), (br, sr) = chain[i], chain[i + 1]
            nodes.append(DIA(len(nodes), kind, bf, br, _features(sf, sr)))

    return SemanticGraph(
        nodes=nodes, reference_node=0, t=t, T_h=T_h, ego_id=ego.agent_id,
        ego_conflict_s=ego_cs, has_conflict=has_conflict,
        crossing=tuple((aid, cp.s_a, cp.s_b) for _, aid, cp in crossing))


def relative_features(graph: SemanticGraph) -> SemanticGraph:
    """Fill every node's features relative to the reference node."""
    ref = graph.nodes[graph.reference_node].abs_features
    nodes = [replace(n, rel_features=n.abs_features - ref) for n in graph.nodes]
    return replace(graph, nodes=nodes)


def build_graph(ego, others, ctx: SceneContext, t: int, T_h: int, D_h: float = 100.0,
                m_max: int = 6) -> SemanticGraph:
    ids = set(select_interacting(ego, others, ctx, t, m_max))
    inter = [o for o in others if o.agent_id in ids]
    return relative_features(extract_dias(ego, inter, ctx, t, T_h, D_h))


def crossing_time(track: AgentTrack, line: ReferenceLine, s_target: float, t: int, T_f: int):
    """Fractional frames after ``t`` at which the track reaches ``s_target``; None if not within T_f."""
    steps = np.arange(t, t + T_f + 1)
    valid = steps <= track.last
    if not np.any(valid):
        return None
    s = track.frenet(line)["s"][track.index(steps[valid])]
    if s[0] >= s_target:
        return 0.0
    above = np.nonzero(s >= s_target)[0]
    if len(above) == 0:
        return None
    j = int(above[0])
    return (j - 1) + (s_target - s[j - 1]) / (s[j] - s[j - 1])


def insertion_label(graph: SemanticGraph, ego: AgentTrack, tracks: dict, ctx: SceneContext,
                    T_f: int):
    """Index of the area the ego inserts into, plus whether the ordering was consistent.

    The ego yields (reference node) unless it reaches the nearest conflict
    within the horizon. Otherwise the label is the slot right behind the
    crossing agents that reach their conflict point before the ego reaches
    the same point. ``consistent`` is False when those agents are not a
    prefix of the axis order (the label then uses only their count).
    """
    if not graph.has_conflict or len(graph.crossing) == 0:
        return graph.reference_node, True
    el = ctx.line_of(ego)
    t = graph.t
    if crossing_time(ego, el, graph.ego_conflict_s, t, T_f) is None:
        return graph.reference_node, True
    before = []
    for aid, s_ego, s_agent in graph.crossing:
        o = tracks[aid]
        t_o = crossing_time(o, ctx.line_of(o), s_agent, t, T_f)
        t_e = crossing_time(ego, el, s_ego, t, T_f)
        if t_o is None:
            before.append(False)
        elif t_e is None:
            before.append(True)
        else:
            before.append(t_o < t_e or (t_o == t_e and aid < ego.agent_id))
    k = int(np.sum(before))
    consistent = all(before[:k]) and not any(before[k:])
    # node 1 is the conflict-adjacent slot, node 1 + k follows the k-th crossing agent
    return 1 + k, consistent


def traveled_distance(track: AgentTrack, line: ReferenceLine, t: int, T_f: int, strict: bool = True):
    """Arc length covered along ``line`` between frames t and t + T_f."""
    f = track.frenet(line)
    if t + T_f > track.last:
        if strict:
            raise ValueError(f"agent {track.agent_id}: future shorter than {T_f} steps at frame {t}")
        # extrapolate with the last longitudinal speed
        i_last = len(track.frame_ids) - 1
        extra = (t + T_f - track.last) * float(max(f["v_s"][i_last], 0.0)) * _dt(track)
        return float(f["s"][i_last] - f["s"][track.index(t)] + extra)
    return float(f["s"][track.index(t + T_f)] - f["s"][track.index(t)])


def _dt(track: AgentTrack) -> float:
    if len(track.frames) < 2:
        return 0.1
    return float(np.median(np.diff(track.frames[:, 0]) / np.diff(track.frame_ids))) / 1000.0


def goal_state_label(track: AgentTrack, line: ReferenceLine, t: int, T_f: int) -> float:
    return traveled_distance(track, line, t, T_f, strict=True)


def node_goal_labels(graph: SemanticGraph, tracks: dict, ctx: SceneContext, T_f: int) -> np.ndarray:
    """Goal label of every node: the rear boundary agent's traveled distance (0 if virtual)."""
    out = np.zeros(graph.M)
    for i, n in enumerate(graph.nodes):
        aid = n.rear_agent
        if aid is None:
            continue
        tr = tracks[aid]
        strict = aid == graph.ego_id
        out[i] = traveled_distance(tr, ctx.line_of(tr), graph.t, T_f, strict=strict)
    return out
