"""Polyline reference lines, Frenet projection, conflict points and DTW line assignment."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EPS = 1e-12


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True, eq=False)
class ReferenceLine:
    id: str
    waypoints: np.ndarray
    cum_arclen: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        wp = np.array(self.waypoints, dtype=np.float64)
        if wp.ndim != 2 or wp.shape[1] != 2 or len(wp) < 2:
            raise ValueError(f"line {self.id!r}: need >= 2 two-dimensional waypoints")
        if not np.all(np.isfinite(wp)):
            raise ValueError(f"line {self.id!r}: non-finite waypoint")
        seg = np.hypot(*np.diff(wp, axis=0).T)
        if np.any(seg <= 0.0):
            raise ValueError(f"line {self.id!r}: repeated consecutive waypoint (zero-length segment)")
        wp.setflags(write=False)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        cum.setflags(write=False)
        object.__setattr__(self, "waypoints", wp)
        object.__setattr__(self, "cum_arclen", cum)

    @property
    def length(self) -> float:
        return float(self.cum_arclen[-1])

    @property
    def seg_vec(self) -> np.ndarray:
        return np.diff(self.waypoints, axis=0)

    @property
    def seg_len(self) -> np.ndarray:
        return np.diff(self.cum_arclen)

    def reversed(self, new_id: str | None = None) -> "ReferenceLine":
        return ReferenceLine(new_id or f"{self.id}_rev", self.waypoints[::-1].copy())

    def point_at(self, s) -> np.ndarray:
        return frenet_to_xy(s, 0.0, self)

    def tangent_angle_at(self, s) -> np.ndarray:
        idx = _segment_index(self, np.asarray(s, dtype=np.float64))
        v = self.seg_vec[idx]
        return np.arctan2(v[..., 1], v[..., 0])


@dataclass(frozen=True)
class FrenetState:
    s: float
    d: float
    v_s: float
    phi: float
    v_d: float = 0.0


@dataclass(frozen=True)
class ConflictPoint:
    s_a: float
    s_b: float
    point: tuple


def _segment_index(line: ReferenceLine, s: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(line.cum_arclen, s, side="right") - 1
    return np.clip(idx, 0, len(line.waypoints) - 2)


def project_points(points, line: ReferenceLine):
    """Vectorized closest-point projection of (N, 2) points.

    Returns (s, d, seg_idx). Ties between equally close segments go to the
    lowest arc length.
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    A = line.waypoints[:-1]
    V = line.seg_vec
    L2 = line.seg_len ** 2
    rel = P[:, None, :] - A[None, :, :]                    # (N, S, 2)
    t = np.clip(np.einsum("nsk,sk->ns", rel, V) / L2, 0.0, 1.0)
    diff = rel - t[..., None] * V[None]
    dist2 = np.einsum("nsk,nsk->ns", diff, diff)
    seg_s = line.cum_arclen[:-1][None, :] + t * line.seg_len[None, :]
    best = dist2.min(axis=1, keepdims=True)
    # within round-off of the minimum, prefer lowest s
    tol = 1e-12 * np.maximum(1.0, best)
    cand = np.where(dist2 <= best + tol, seg_s, np.inf)
    k = np.argmin(cand, axis=1)
    rows = np.arange(len(P))
    s = seg_s[rows, k]
    cross = V[k, 0] * diff[rows, k, 1] - V[k, 1] * diff[rows, k, 0]
    d = np.sign(cross) * np.sqrt(dist2[rows, k])
    return s, d, k


def project_to_frenet(p, heading: float, speed: float, line: ReferenceLine) -> FrenetState:
    """Frenet state of a point with heading and speed; d is left-positive."""
    if line.length <= 0.0:
        raise ValueError("degenerate reference line")
    s, d, k = project_points(np.asarray(p, dtype=np.float64)[None], line)
    v = line.seg_vec[k[0]]
    phi = wrap_angle(heading - math.atan2(v[1], v[0]))
    return FrenetState(float(s[0]), float(d[0]), float(speed * math.cos(phi)), phi,
                       float(speed * math.sin(phi)))


def frenet_to_xy(s, d, line: ReferenceLine, extrapolate: bool = False) -> np.ndarray:
    """Map (s, d) arrays to map-frame points, shape (..., 2).

    With ``extrapolate`` the first and last segments are extended linearly
    beyond the ends of the line; otherwise out-of-range s is an error.
    """
    s = np.asarray(s, dtype=np.float64)
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), s.shape)
    if not extrapolate and (np.any(s < -1e-9) or np.any(s > line.length + 1e-9)):
        raise ValueError(f"arc length outside [0, {line.length:.3f}]")
    idx = _segment_index(line, s)
    V = line.seg_vec[idx]
    ln = line.seg_len[idx]
    u = (s - line.cum_arclen[idx]) / ln
    base = line.waypoints[idx] + u[..., None] * V
    normal = np.stack([-V[..., 1], V[..., 0]], axis=-1) / ln[..., None]
    return base + d[..., None] * normal


def frenet_to_cartesian(f: FrenetState, line: ReferenceLine):
    """Inverse of :func:`project_to_frenet` for in-domain states: (point, heading)."""
    if f.s < 0.0 or f.s > line.length:
        raise ValueError(f"s={f.s} outside [0, {line.length:.3f}]")
    xy = frenet_to_xy(np.array(f.s), np.array(f.d), line)
    heading = wrap_angle(float(line.tangent_angle_at(f.s)) + f.phi)
    return xy, heading


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def segment_intersections(a: ReferenceLine, b: ReferenceLine):
    """All segment-pair contacts as arrays (s_a, s_b, points).

    Collinear overlaps contribute their first point along ``a``.
    """
    p, r = a.waypoints[:-1], a.seg_vec
    q, sv = b.waypoints[:-1], b.seg_vec
    P, R = p[:, None, :], r[:, None, :]
    Q, S = q[None, :, :], sv[None, :, :]
    qp = Q - P
    denom = _cross(R, S)
    scale = np.hypot(*r.T)[:, None] * np.hypot(*sv.T)[None, :]
    tol = 1e-12
    out_t, out_u, out_i, out_j = [], [], [], []

    proper = np.abs(denom) > tol * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        t = _cross(qp, S) / denom
        u = _cross(qp, R) / denom
    hit = proper & (t >= -tol) & (t <= 1 + tol) & (u >= -tol) & (u <= 1 + tol)
    ii, jj = np.nonzero(hit)
    out_i.append(ii), out_j.append(jj)
    out_t.append(np.clip(t[ii, jj], 0.0, 1.0)), out_u.append(np.clip(u[ii, jj], 0.0, 1.0))

    colinear = (~proper) & (np.abs(_cross(qp, R)) <= tol * scale)
    for i, j in zip(*np.nonzero(colinear)):
        rr = float(r[i] @ r[i])
        t0 = float((q[j] - p[i]) @ r[i]) / rr
        t1 = t0 + float(sv[j] @ r[i]) / rr
        lo, hi = max(0.0, min(t0, t1)), min(1.0, max(t0, t1))
        if lo <= hi + tol:
            pt = p[i] + lo * r[i]
            uu = float((pt - q[j]) @ sv[j]) / float(sv[j] @ sv[j])
            out_i.append(np.array([i])), out_j.append(np.array([j]))
            out_t.append(np.array([lo])), out_u.append(np.array([np.clip(uu, 0.0, 1.0)]))

    i = np.concatenate(out_i).astype(int)
    j = np.concatenate(out_j).astype(int)
    t = np.concatenate(out_t)
    u = np.concatenate(out_u)
    s_a = a.cum_arclen[i] + t * a.seg_len[i]
    s_b = b.cum_arclen[j] + u * b.seg_len[j]
    pts = p[i] + t[:, None] * r[i]
    return s_a, s_b, pts


def conflict_point(a: ReferenceLine, b: ReferenceLine) -> ConflictPoint | None:
    """First intersection of two polylines by ascending arc length on ``a``."""
    s_a, s_b, pts = segment_intersections(a, b)
    if len(s_a) == 0:
        return None
    k = np.lexsort((s_b, s_a))[0]
    return ConflictPoint(float(s_a[k]), float(s_b[k]), (float(pts[k, 0]), float(pts[k, 1])))


def resample(line: ReferenceLine, spacing: float = 1.0) -> np.ndarray:
    """Points every ``spacing`` meters along the line, end point included."""
    s = np.arange(0.0, line.length, spacing)
    if line.length - s[-1] > 1e-9:
        s = np.append(s, line.length)
    return frenet_to_xy(s, 0.0, line)


def dtw_cost(x, y) -> float:
    """Full-window DTW with Euclidean point cost, evaluated along anti-diagonals."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 2)
    n, m = len(x), len(y)
    C = np.hypot(x[:, None, 0] - y[None, :, 0], x[:, None, 1] - y[None, :, 1])
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        prev = np.minimum(np.minimum(D[i - 1, j], D[i, j - 1]), D[i - 1, j - 1])
        D[i, j] = C[i - 1, j - 1] + prev
    return float(D[n, m])


def dtw_assign(track, candidates, spacing: float = 1.0):
    """Pick the reference line whose 1 m resampling best DTW-aligns with ``track``.

    Returns (line id, cost); equal costs resolve to the lowest id.
    """
    if len(candidates) == 0:
        raise ValueError("no candidate reference lines")
    track = np.asarray(track, dtype=np.float64).reshape(-1, 2)
    if len(track) == 0:
        raise ValueError("empty track")
    best = None
    for line in sorted(candidates, key=lambda ln: ln.id):
        c = dtw_cost(track, resample(line, spacing))
        if best is None or c < best[1]:
            best = (line.id, c)
    return best


def load_map(path) -> dict[str, ReferenceLine]:
    doc = json.loads(Path(path).read_text())
    lines = {}
    for entry in doc["reference_lines"]:
        lid = str(entry["id"])
        if lid in lines:
            raise ValueError(f"duplicate reference line id {lid!r}")
        lines[lid] = ReferenceLine(lid, np.asarray(entry["waypoints"], dtype=np.float64))
    return lines


def save_map(path, lines) -> None:
    items = lines.values() if isinstance(lines, dict) else lines
    doc = {"reference_lines": [
        {"id": ln.id, "waypoints": [[float(x), float(y)] for x, y in ln.waypoints]} for ln in items]}
    Path(path).write_text(json.dumps(doc, indent=1))
