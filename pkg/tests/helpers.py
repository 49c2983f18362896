"""Independent oracles shared by several test modules."""
import math

import numpy as np

from diapredict.geometry import ReferenceLine
from diapredict.nn import Tape, backward
from diapredict.scene import AgentTrack, SceneContext

FD_FLOOR = 1e-4   # below this magnitude a gradient entry is judged on absolute error


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_ref(x, h, W_ih, W_hh, b_ih, b_hh):
    """Textbook GRU update, gate blocks (z, r, n), written without shared code."""
    H = h.shape[-1]
    Wz, Wr, Wn = W_ih[:, :H], W_ih[:, H:2 * H], W_ih[:, 2 * H:]
    Uz, Ur, Un = W_hh[:, :H], W_hh[:, H:2 * H], W_hh[:, 2 * H:]
    z = sig(x @ Wz + b_ih[:H] + h @ Uz + b_hh[:H])
    r = sig(x @ Wr + b_ih[H:2 * H] + h @ Ur + b_hh[H:2 * H])
    n = np.tanh(x @ Wn + b_ih[2 * H:] + r * (h @ Un + b_hh[2 * H:]))
    return (1 - z) * n + z * h


def gru_unroll_ref(xs, W_ih, W_hh, b_ih, b_hh):
    h = np.zeros(xs.shape[:-2] + (W_hh.shape[0],))
    for t in range(xs.shape[-2]):
        h = gru_ref(xs[..., t, :], h, W_ih, W_hh, b_ih, b_hh)
    return h


def fd_rel_err(analytic, numeric):
    a, n = float(analytic), float(numeric)
    return abs(a - n) / max(abs(a), abs(n), FD_FLOOR)


def param_fd_check(loss_of, params, rng, per_tensor=4, eps=1e-4):
    """Max relative error per tensor between tape gradients and finite differences.

    ``loss_of(P)`` takes a name -> array/Var mapping and returns a scalar. The
    numeric side is the fourth-order five-point stencil: its truncation error
    is O(eps**4) and a fairly large step keeps roundoff low when the loss is
    large and a gradient entry is small.
    """
    tape = Tape()
    bound = params.bind(tape)
    grads = backward(tape, loss_of(bound), bound)
    worst = {}
    for name in params:
        base = params[name]
        errs = []
        for _ in range(per_tensor):
            idx = tuple(int(rng.integers(0, s)) for s in base.shape)
            f = {}
            for k in (2, 1, -1, -2):
                arr = base.copy()
                arr[idx] += k * eps
                P = {n: params[n] for n in params}
                P[name] = arr
                f[k] = float(np.asarray(loss_of(P)))
            numeric = (8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * eps)
            errs.append(fd_rel_err(grads[name][idx], numeric))
        worst[name] = max(errs)
    return worst


def random_graph_arrays(rng, M, T=4, ref=0):
    """Feature histories shaped like real ones: distances, speeds, angles."""
    scale = np.array([30.0, 8.0, 0.3, 30.0, 8.0, 0.3, 30.0])
    abs_x = rng.normal(size=(M, T, 7)) * scale
    rel_x = abs_x - abs_x[ref]
    return abs_x, rel_x


DT = 0.1


def track_from_s(aid, line, s, d=0.0, first_frame=0):
    """Track following ``line`` with arc lengths ``s`` (one per frame)."""
    s = np.asarray(s, dtype=np.float64)
    xy = np.array([line.point_at(min(max(v, 0.0), line.length)) for v in s])
    tang = line.tangent_angle_at(np.clip(s, 0.0, line.length))
    normal = np.stack([-np.sin(tang), np.cos(tang)], axis=1)
    xy = xy + d * normal
    v = np.gradient(s, DT) if len(s) > 1 else np.zeros(1)
    frames = np.column_stack([(np.arange(len(s)) + first_frame) * 100.0, xy,
                              v * np.cos(tang), v * np.sin(tang), tang])
    return AgentTrack(aid, np.arange(len(s)) + first_frame, frames, line.id)


def cross_ctx():
    E = ReferenceLine("E", np.array([[-50.0, 0.0], [50.0, 0.0]]))
    C = ReferenceLine("C", np.array([[0.0, -50.0], [0.0, 50.0]]))
    P = ReferenceLine("P", np.array([[-50.0, 2.0], [50.0, 2.0]]))
    return SceneContext({"E": E, "C": C, "P": P})


def quarter_circle(R=10.0, step_deg=1.0, clockwise=True):
    deg = np.arange(90.0, -1e-9, -step_deg) if clockwise else np.arange(0.0, 90.0 + 1e-9, step_deg)
    th = np.radians(deg)
    return ReferenceLine("arc", np.stack([R * np.cos(th), R * np.sin(th)], axis=1))


def brute_force_conflict(a, b):
    """Loop over segment pairs and solve each 2x2 system directly."""
    best = None
    for i in range(len(a.waypoints) - 1):
        p0, p1 = a.waypoints[i], a.waypoints[i + 1]
        for j in range(len(b.waypoints) - 1):
            q0, q1 = b.waypoints[j], b.waypoints[j + 1]
            M = np.array([p1 - p0, q0 - q1]).T
            if abs(np.linalg.det(M)) < 1e-14:
                continue
            t, u = np.linalg.solve(M, q0 - p0)
            if 0 <= t <= 1 and 0 <= u <= 1:
                s_a = a.cum_arclen[i] + t * np.hypot(*(p1 - p0))
                s_b = b.cum_arclen[j] + u * np.hypot(*(q1 - q0))
                if best is None or s_a < best[0]:
                    best = (s_a, s_b, p0 + t * (p1 - p0))
    return best


def jagged(rng, n):
    x = np.cumsum(rng.uniform(0.2, 1.0, size=n + 1))
    y = rng.normal(scale=2.0, size=n + 1)
    ang = rng.uniform(0, 2 * np.pi)
    R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    return (np.stack([x - x.mean(), y], axis=1) @ R.T) + rng.normal(scale=2, size=2)


def enumerate_dtw(x, y):
    """Minimum over every monotone alignment path, listed explicitly."""
    n, m = len(x), len(y)
    best = math.inf
    moves = ((1, 0), (0, 1), (1, 1))

    def walk(i, j, acc):
        nonlocal best
        acc += math.dist(x[i], y[j])
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        for di, dj in moves:
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


# one line per acceptance criterion, printed in the terminal summary
CRITERIA: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[n] = line
    print(line)
