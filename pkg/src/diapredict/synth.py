"""Synthetic intersection and roundabout traffic.

Agents follow fixed reference lines with IDM longitudinal control. Crossing
and merging conflicts are resolved by a priority order that is total at every
instant (so two agents never both wait for each other): circulating agents
first on a roundabout, then an agent-specific key fixed when the agent enters
the conflict zone, shifted by its aggressiveness. Agents that can no longer
stop before a conflict commit to it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import IdmParams, idm_accel
from .geometry import ReferenceLine, conflict_point, frenet_to_xy, project_points, save_map

CSV_HEADER = ("track_id", "frame_id", "timestamp_ms", "agent_type", "x", "y", "vx", "vy",
              "psi_rad", "length", "width")
SCENARIOS = ("intersection", "roundabout")
DT = 0.1
ARM = 50.0          # m, approach / exit length
BOX = 6.0           # m, half width of the intersection box
LANE = 2.0          # m, lane centre offset from the road axis
RING = 15.0         # m, roundabout radius
GRID_DEG = 5.0      # roundabout vertices sit on a shared angular grid
ZONE = 40.0         # m to a conflict before priorities are settled
STOP_MARGIN = 3.0   # m, yielders stop this far before the conflict point
CLEAR = 6.0         # m past the conflict point before a conflict is released
EPISODE_GAP = 1000  # frames between episodes in a corpus file


def _rot(v, ang):
    c, s = math.cos(ang), math.sin(ang)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _arc(center, radius, a0, a1, step_deg=10.0):
    n = max(int(math.ceil(abs(a1 - a0) / math.radians(step_deg))), 1)
    ang = np.linspace(a0, a1, n + 1)
    return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)


def _dedup(pts):
    pts = np.asarray(pts, dtype=np.float64)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.hypot(*np.diff(pts, axis=0).T) > 1e-9
    return pts[keep]


def intersection_map() -> dict[str, ReferenceLine]:
    """Four-arm intersection, right-hand traffic, straight / left / right routes from every arm."""
    lines = {}
    arms = {"E": 0.0, "N": math.pi / 2, "W": math.pi, "S": 3 * math.pi / 2}
    for name, a in arms.items():
        inward = _rot([-1.0, 0.0], a)            # travel direction when entering from this arm
        right = _rot(inward, -math.pi / 2)
        start = _rot([ARM + BOX, 0.0], a) + LANE * right
        entry = _rot([BOX, 0.0], a) + LANE * right
        # straight through
        exit_s = _rot([-BOX, 0.0], a) + LANE * right
        end_s = _rot([-(ARM + BOX), 0.0], a) + LANE * right
        lines[f"{name}_straight"] = ReferenceLine(f"{name}_straight", _dedup([start, entry, exit_s, end_s]))
        heading = math.atan2(inward[1], inward[0])
        # left turn: centre BOX to the left of the entry, radius BOX + LANE
        left = -right
        c = entry + (BOX + LANE) * left
        arc = _arc(c, BOX + LANE, heading - math.pi / 2, heading, 10.0)
        out_dir = _rot(inward, math.pi / 2)
        end_l = arc[-1] + ARM * out_dir
        lines[f"{name}_left"] = ReferenceLine(f"{name}_left", _dedup([start, *arc, end_l]))
        # right turn: radius BOX - LANE
        c = entry + (BOX - LANE) * right
        arc = _arc(c, BOX - LANE, heading + math.pi / 2, heading, 10.0)
        out_dir = _rot(inward, -math.pi / 2)
        end_r = arc[-1] + ARM * out_dir
        lines[f"{name}_right"] = ReferenceLine(f"{name}_right", _dedup([start, *arc, end_r]))
    return lines


def roundabout_map() -> dict[str, ReferenceLine]:
    """Single-lane counter-clockwise roundabout with four arms; every entry/exit pair is a line."""
    lines = {}
    arms = {"E": 0, "N": 90, "W": 180, "S": 270}
    off = 20  # degrees between an arm axis and its merge / diverge vertex
    for src, a in arms.items():
        ar = math.radians(a)
        inward = _rot([-1.0, 0.0], ar)
        right = _rot(inward, -math.pi / 2)
        start = _rot([RING + ARM, 0.0], ar) + LANE * right
        near = _rot([RING + 6.0, 0.0], ar) + LANE * right
        for dst, b in arms.items():
            if dst == src:
                continue
            a_in = a + off
            a_out = b - off
            if a_out <= a_in:
                a_out += 360
            grid = np.arange(a_in, a_out + 1e-9, GRID_DEG)
            ring = np.stack([RING * np.cos(np.radians(grid)), RING * np.sin(np.radians(grid))], axis=1)
            br = math.radians(b)
            outward = _rot([1.0, 0.0], br)
            right_out = _rot(outward, -math.pi / 2)
            near_out = (RING + 6.0) * outward + LANE * right_out
            end = (RING + ARM) * outward + LANE * right_out
            lid = f"{src}_{dst}"
            lines[lid] = ReferenceLine(lid, _dedup([start, near, *ring, near_out, end]))
    return lines


def build_map(scenario: str) -> dict[str, ReferenceLine]:
    if scenario == "intersection":
        return intersection_map()
    if scenario == "roundabout":
        return roundabout_map()
    raise ValueError(f"unknown scenario {scenario!r}")


@dataclass
class Style:
    idm: IdmParams
    aggression: float
    lat_amp: float
    lat_period: float
    lat_phase: float


def sample_style(rng, shift: float = 0.0) -> Style:
    """Per-agent driving style; ``shift`` > 0 makes drivers faster and tighter."""
    v0 = rng.uniform(7.0, 12.0) * (1.0 + 0.5 * shift)
    T = rng.uniform(1.0, 2.0) / (1.0 + shift)
    p = IdmParams(v0=v0, T=T, a_max=rng.uniform(1.0, 2.0) * (1.0 + shift), b=rng.uniform(1.5, 2.5),
                  s0=rng.uniform(1.5, 2.5))
    return Style(p, float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 0.3)),
                 float(rng.uniform(4.0, 10.0)), float(rng.uniform(0.0, 2 * math.pi)))


@dataclass
class SimAgent:
    agent_id: int
    line: ReferenceLine
    style: Style
    s: float
    v: float
    t0: int
    key: float | None = None
    committed: set = field(default_factory=set)
    rows: list = field(default_factory=list)
    length: float = 4.5
    width: float = 1.8

    def d(self, k: int) -> float:
        st = self.style
        return st.lat_amp * math.sin(2 * math.pi * (k - self.t0) * DT / st.lat_period + st.lat_phase)


class Simulator:
    def __init__(self, lines: dict[str, ReferenceLine], scenario: str, rng, style_shift: float = 0.0):
        self.lines = lines
        self.scenario = scenario
        self.rng = rng
        self.style_shift = style_shift
        self.conf = {}
        for a in lines:
            for b in lines:
                if a != b:
                    cp = conflict_point(lines[a], lines[b])
                    # lines leaving the same arm overlap from s=0; they interact as lane followers
                    if cp is not None and (cp.s_a > 1e-6 or cp.s_b > 1e-6):
                        self.conf[(a, b)] = cp

    def _circulating(self, ag: SimAgent, xy) -> bool:
        return self.scenario == "roundabout" and abs(math.hypot(*xy) - RING) < 0.5

    def _priority(self, ag, other, xy_a, xy_o) -> bool:
        """True when ``ag`` goes before ``other``."""
        ca, co = self._circulating(ag, xy_a), self._circulating(other, xy_o)
        if ca != co:
            return ca
        ka = math.inf if ag.key is None else ag.key
        ko = math.inf if other.key is None else other.key
        return (ka, ag.agent_id) < (ko, other.agent_id)

    def _accel(self, ag: SimAgent, agents, xy, heading, k: int) -> float:
        p = ag.style.idm
        a = idm_accel(ag.v, None, 0.0, p)
        me = xy[ag.agent_id]
        others = [o for o in agents if o is not ag]
        if others:
            pts = np.array([xy[o.agent_id] for o in others])
            s_o, d_o, _ = project_points(pts, ag.line)
            for o, so, do in zip(others, s_o, d_o):
                dh = abs(math.remainder(heading[o.agent_id] - heading[ag.agent_id], 2 * math.pi))
                if abs(do) < 1.0 and ag.s < so < ag.s + 60.0 and dh < math.pi / 4:
                    a = min(a, idm_accel(ag.v, so - ag.s - o.length, ag.v - o.v, p))
        for o in others:
            cp = self.conf.get((ag.line.id, o.line.id))
            if cp is None:
                continue
            rem, rem_o = cp.s_a - ag.s, cp.s_b - o.s
            if rem <= 0 or rem_o < -CLEAR or rem > ZONE or rem_o > ZONE:
                continue
            if o.agent_id in ag.committed:
                continue
            gap = rem - STOP_MARGIN
            passed_o = rem_o <= 0
            if passed_o or not self._priority(ag, o, me, xy[o.agent_id]):
                if gap < ag.v ** 2 / (2 * 4.0) and not passed_o:
                    ag.committed.add(o.agent_id)
                    continue
                a = min(a, idm_accel(ag.v, max(gap, 1e-3), ag.v, p))
        return a

    def _spawn_clear(self, line, agents) -> bool:
        for o in agents:
            if np.allclose(o.line.waypoints[0], line.waypoints[0]) and o.s < 15.0:
                return False
        return True

    def run(self, n_agents: int, n_frames: int, first_id: int, frame0: int = 0,
            scripted_pair: bool = True):
        ids = sorted(self.lines)
        routes = [ids[i] for i in self.rng.integers(0, len(ids), n_agents)]
        times = np.sort(self.rng.integers(0, max(n_frames // 2, 1), n_agents))
        if scripted_pair and n_agents >= 2:
            pairs = sorted(self.conf)
            a, b = pairs[int(self.rng.integers(0, len(pairs)))]
            routes[0], routes[1] = a, b
            times[0] = times[1] = 0
        pending = [(int(t), r, self.rng.uniform(0.6, 1.0), sample_style(self.rng, self.style_shift))
                   for t, r in zip(times, routes)]
        agents: list[SimAgent] = []
        done: list[SimAgent] = []
        next_id = first_id
        for k in range(n_frames):
            waiting = []
            for t, r, frac, st in pending:
                if t <= k and self._spawn_clear(self.lines[r], agents):
                    agents.append(SimAgent(next_id, self.lines[r], st, 0.0, frac * st.idm.v0, k))
                    next_id += 1
                else:
                    waiting.append((t, r, frac, st))
            pending = waiting
            xy, heading = {}, {}
            for ag in agents:
                self._record(ag, k, frame0, xy, heading)
            for ag in agents:
                if ag.key is None:
                    rem = min((cp.s_a - ag.s for (la, _), cp in self.conf.items() if la == ag.line.id
                               and cp.s_a > ag.s), default=math.inf)
                    if rem <= ZONE:
                        ag.key = k * DT - 2.0 * ag.style.aggression
            acc = {ag.agent_id: self._accel(ag, agents, xy, heading, k) for ag in agents}
            alive = []
            for ag in agents:
                ag.s += ag.v * DT
                ag.v = max(ag.v + acc[ag.agent_id] * DT, 0.0)
                (alive if ag.s < ag.line.length else done).append(ag)
            agents = alive
        done.extend(agents)
        done.sort(key=lambda a: a.agent_id)
        return done, next_id

    def _record(self, ag: SimAgent, k: int, frame0: int, xy, heading) -> None:
        d = ag.d(k)
        p = frenet_to_xy(ag.s, d, ag.line, extrapolate=True)
        # lateral rate from the offset signal, longitudinal from the speed
        dd = (ag.d(k + 1) - ag.d(k - 1)) / (2 * DT)
        seg = int(np.clip(np.searchsorted(ag.line.cum_arclen, ag.s, side="right") - 1, 0, len(ag.line.seg_len) - 1))
        tang = ag.line.seg_vec[seg] / ag.line.seg_len[seg]
        nrm = np.array([-tang[1], tang[0]])
        vel = ag.v * tang + dd * nrm
        psi = math.atan2(vel[1], vel[0]) if ag.v > 0.05 else math.atan2(tang[1], tang[0])
        xy[ag.agent_id] = p
        heading[ag.agent_id] = psi
        ag.rows.append((ag.agent_id, frame0 + k, (frame0 + k) * 100, "car", float(p[0]), float(p[1]),
                        float(vel[0]), float(vel[1]), float(psi), ag.length, ag.width))


def synth_generate(scenario: str, n_episodes: int, seed: int, n_agents: int = 10, n_frames: int = 400,
                   style_shift: float = 0.0):
    """Returns (lines, rows) for a whole corpus; rows follow ``CSV_HEADER``."""
    if n_episodes < 0:
        raise ValueError("n_episodes must be non-negative")
    lines = build_map(scenario)
    rng = np.random.default_rng(seed)
    sim = Simulator(lines, scenario, rng, style_shift)
    rows, next_id = [], 1
    for e in range(n_episodes):
        agents, next_id = sim.run(n_agents, n_frames, next_id, frame0=e * (n_frames + EPISODE_GAP))
        for ag in agents:
            rows.extend(ag.rows)
    rows.sort(key=lambda r: (r[0], r[1]))
    return lines, rows


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], r[2], r[3]] + [repr(float(v)) for v in r[4:]])


def write_corpus(out_dir, scenario: str, n_episodes: int, seed: int, **kw):
    """Writes <scenario>_tracks.csv and <scenario>_map.json; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines, rows = synth_generate(scenario, n_episodes, seed, **kw)
    csv_path, map_path = out / f"{scenario}_tracks.csv", out / f"{scenario}_map.json"
    write_csv(csv_path, rows)
    save_map(map_path, lines)
    return csv_path, map_path
