"""Track-file ingestion and sliding-window samples."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .edn import Window, snap
from .geometry import dtw_assign, load_map, project_points
from .scene import AgentTrack, SceneContext, build_graph, insertion_label, node_goal_labels
from .sgn import SgnSample
from .synth import CSV_HEADER

log = logging.getLogger(__name__)

ASSIGN_TOL = 3.0    # m, endpoint distance for a line to be a DTW candidate


@dataclass
class DataConfig:
    T_h: int = 10
    T_f: int = 30
    dt: float = 0.1
    stride: int = 1
    m_max: int = 6
    D_h: float = 100.0
    graphs: bool = True

    def __post_init__(self):
        if self.T_h < 1 or self.T_f < 1 or self.stride < 1:
            raise ValueError("T_h, T_f and stride must be at least 1")


@dataclass
class Sample:
    agent_id: int
    t: int
    segment: int                 # connected block of overlapping tracks (an episode)
    frenet: Window
    cart: Window
    sgn: SgnSample | None = None
    consistent: bool = True


@dataclass
class Dataset:
    lines: dict
    tracks: dict
    samples: list = field(default_factory=list)
    n_rows: int = 0
    skipped_gaps: int = 0
    segment_of: dict = field(default_factory=dict)

    def others(self, agent_id: int):
        seg = self.segment_of[agent_id]
        return [o for o in self.tracks.values() if o.agent_id != agent_id and self.segment_of[o.agent_id] == seg]

    @property
    def ctx(self) -> SceneContext:
        if not hasattr(self, "_ctx"):
            self._ctx = SceneContext(self.lines)
        return self._ctx

    def report(self) -> dict:
        return {"rows": self.n_rows, "tracks": len(self.tracks), "samples": len(self.samples),
                "skipped_gaps": self.skipped_gaps}


def read_tracks(path, dt: float = 0.1):
    """Parse a track CSV into {id: (frame_ids, frames, valid)}; gaps are forward-filled and flagged."""
    per: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}, 0
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValueError(f"{path}:1: unexpected header {header}")
        n = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                tid, fid, ts = int(row[0]), int(row[1]), int(row[2])
                vals = [float(v) for v in row[4:9]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            per.setdefault(tid, []).append((fid, ts, *vals))
            n += 1
    out = {}
    step_ms = dt * 1000.0
    for tid, rows in per.items():
        rows.sort()
        arr = np.array(rows, dtype=np.float64)
        fids = arr[:, 0].astype(np.int64)
        if np.any(np.diff(fids) <= 0):
            raise ValueError(f"{path}: track {tid} repeats frame ids")
        full = np.arange(fids[0], fids[-1] + 1)
        pos = np.searchsorted(fids, full, side="right") - 1
        frames = arr[pos, 1:]
        valid = fids[pos] == full
        # frames whose timestamp does not sit on the dt grid count as gaps too
        expect = arr[0, 1] + (full - fids[0]) * step_ms
        valid &= np.abs(frames[:, 0] - expect) < 0.5 * step_ms
        # forward-filled rows need strictly increasing timestamps for AgentTrack
        frames[:, 0] = expect
        out[tid] = (full, frames, valid)
    return out, n


def assign_line(xy, lines: dict):
    """Reference line for a trajectory: DTW among lines passing near both of its ends."""
    cands = []
    for ln in lines.values():
        _, d, _ = project_points(xy[[0, -1]], ln)
        if np.all(np.abs(d) < ASSIGN_TOL):
            cands.append(ln)
    return dtw_assign(xy, cands or list(lines.values()))[0]


def _segments(tracks: dict) -> dict:
    """Group tracks whose frame spans overlap (an episode) into numbered segments."""
    spans = sorted((tr.first, tr.last, tid) for tid, tr in tracks.items())
    seg, out, end = -1, {}, None
    for a, b, tid in spans:
        if end is None or a > end:
            seg += 1
            end = b
        end = max(end, b)
        out[tid] = seg
    return out


def make_window(track: AgentTrack, line, t: int, T_h: int, T_f: int, frame: str) -> Window:
    idx = track.index(np.arange(t - T_h, t + T_f + 1))
    if frame == "frenet":
        f = track.frenet(line)
        pos = snap(np.stack([f["s"][idx], f["d"][idx]], axis=1))
        vel = np.stack([f["v_s"][idx], f["v_d"][idx]], axis=1)
        hd = f["phi"][idx]
        goal = float(f["s"][track.index(t + T_f)] - f["s"][track.index(t)])
    else:
        fr = track.frames[idx]
        pos = snap(fr[:, 1:3])
        vel = fr[:, 3:5]
        hd = fr[:, 5]
        f = track.frenet(line)
        goal = float(f["s"][track.index(t + T_f)] - f["s"][track.index(t)])
    return Window(pos, vel, hd, goal, line.id, track.agent_id, t)


def load_dataset(track_csv, map_json, cfg: DataConfig | None = None) -> Dataset:
    cfg = cfg or DataConfig()
    lines = load_map(map_json)
    raw, n_rows = read_tracks(track_csv, cfg.dt)
    tracks, valid = {}, {}
    for tid, (fids, frames, ok) in sorted(raw.items()):
        tr = AgentTrack(tid, fids, frames)
        tr.assigned_line = assign_line(tr.xy[ok], lines)
        tracks[tid] = tr
        valid[tid] = ok
    ds = Dataset(lines, tracks, n_rows=n_rows)
    segs = _segments(tracks)
    ds.segment_of = segs
    ctx = ds.ctx
    span = cfg.T_h + cfg.T_f
    for tid, tr in tracks.items():
        ok = valid[tid]
        if len(tr.frame_ids) < span + 1:
            continue
        line = ctx.line_of(tr)
        others = ds.others(tid)
        for t in range(tr.first + cfg.T_h, tr.last - cfg.T_f + 1, cfg.stride):
            i = t - tr.first
            if not np.all(ok[i - cfg.T_h:i + cfg.T_f + 1]):
                ds.skipped_gaps += 1
                continue
            smp = Sample(tid, t, segs[tid], make_window(tr, line, t, cfg.T_h, cfg.T_f, "frenet"),
                         make_window(tr, line, t, cfg.T_h, cfg.T_f, "cartesian"))
            if cfg.graphs:
                g = build_graph(tr, others, ctx, t, cfg.T_h, cfg.D_h, cfg.m_max)
                label, consistent = insertion_label(g, tr, tracks, ctx, cfg.T_f)
                goals = node_goal_labels(g, tracks, ctx, cfg.T_f)
                smp.sgn = SgnSample.from_graph(g, label, goals)
                smp.consistent = consistent
            ds.samples.append(smp)
    if ds.skipped_gaps:
        log.warning("skipped %d windows crossing timestamp gaps", ds.skipped_gaps)
    return ds


def split_by_segment(samples, train_frac: float = 0.8, seed: int = 0):
    """Disjoint train / test lists; whole segments go to one side."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train fraction must lie in (0, 1)")
    segs = sorted({s.segment for s in samples})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(segs))
    n_train = max(1, int(round(train_frac * len(segs)))) if len(segs) > 1 else len(segs)
    train_ids = {segs[i] for i in order[:n_train]}
    train = [s for s in samples if s.segment in train_ids]
    test = [s for s in samples if s.segment not in train_ids]
    return train, test


def load_or_generate(out_dir, scenario: str, n_episodes: int, seed: int, cfg: DataConfig, **kw) -> Dataset:
    from .synth import write_corpus
    csv_path = Path(out_dir) / f"{scenario}_tracks.csv"
    map_path = Path(out_dir) / f"{scenario}_map.json"
    if not (csv_path.exists() and map_path.exists()):
        write_corpus(out_dir, scenario, n_episodes, seed, **kw)
    return load_dataset(csv_path, map_path, cfg)
