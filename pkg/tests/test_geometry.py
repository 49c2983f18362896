import itertools
import math

import numpy as np
import pytest
from helpers import brute_force_conflict, enumerate_dtw, jagged, quarter_circle
from hypothesis import given, settings
from hypothesis import strategies as st

from diapredict.geometry import (
    FrenetState,
    ReferenceLine,
    conflict_point,
    dtw_assign,
    dtw_cost,
    frenet_to_cartesian,
    frenet_to_xy,
    load_map,
    project_points,
    project_to_frenet,
    resample,
    save_map,
    wrap_angle,
)


def x_axis():
    return ReferenceLine("x", np.array([[0.0, 0.0], [10.0, 0.0]]))


def test_project_axis_aligned():
    f = project_to_frenet((3.0, 4.0), 0.0, 5.0, x_axis())
    assert (f.s, f.d, f.phi, f.v_s) == (3.0, 4.0, 0.0, 5.0)
    assert project_to_frenet((7.5, 0.0), 0.3, 1.0, x_axis()).d == 0.0


def test_project_quarter_circle_against_dense_sampling():
    line = quarter_circle()
    p = 11.0 * np.array([math.cos(math.pi / 4), math.sin(math.pi / 4)])
    f = project_to_frenet(p, 0.0, 0.0, line)
    # dense candidate oracle: 1e5 points along the polyline itself
    s_grid = np.linspace(0.0, line.length, 100_000)
    pts = frenet_to_xy(s_grid, 0.0, line)
    k = np.argmin(np.hypot(*(pts - p).T))
    assert abs(f.s - s_grid[k]) < 1e-3
    assert abs(abs(f.d) - np.hypot(*(pts[k] - p))) < 1e-3
    assert abs(f.s - 10.0 * math.pi / 4) < 1e-3
    assert abs(f.d - 1.0) < 1e-3


def test_degenerate_line_rejected():
    with pytest.raises(ValueError):
        ReferenceLine("bad", np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        ReferenceLine("bad", np.array([[1.0, 1.0]]))


def test_frenet_to_cartesian_cases():
    xy, hd = frenet_to_cartesian(FrenetState(3.0, 0.0, 0.0, 0.0), x_axis())
    np.testing.assert_array_equal(xy, [3.0, 0.0])
    xy, _ = frenet_to_cartesian(FrenetState(3.0, 4.0, 0.0, 0.0), x_axis())
    np.testing.assert_array_equal(xy, [3.0, 4.0])
    with pytest.raises(ValueError):
        frenet_to_cartesian(FrenetState(10.5, 0.0, 0.0, 0.0), x_axis())


def test_round_trip_curved_line():
    rng = np.random.default_rng(0)
    line = quarter_circle(R=20.0)
    turn = math.radians(1.0)
    checked = 0
    while checked < 2000:
        s = rng.uniform(0.0, line.length)
        d = rng.uniform(-2.0, 2.0)
        k = np.searchsorted(line.cum_arclen, s) - 1
        gap = min(s - line.cum_arclen[k], line.cum_arclen[k + 1] - s)
        if gap <= abs(d) * math.tan(turn) + 1e-6:
            continue  # inside the wedge of a vertex: projection is not unique there
        xy, hd = frenet_to_cartesian(FrenetState(s, d, 0.0, 0.1), line)
        f = project_to_frenet(xy, hd, 1.0, line)
        assert abs(f.s - s) < 1e-6 and abs(f.d - d) < 1e-6
        assert abs(f.phi - 0.1) < 1e-9
        checked += 1


def test_reversal_flips_d():
    line = quarter_circle()
    rev = line.reversed()
    rng = np.random.default_rng(1)
    pts = rng.uniform(-2, 12, size=(200, 2))
    _, d1, _ = project_points(pts, line)
    _, d2, _ = project_points(pts, rev)
    mask = np.abs(d1) > 1e-6
    assert np.all(np.sign(d1[mask]) == -np.sign(d2[mask]))


def test_wrap_angle_range():
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == math.pi
    v = wrap_angle(np.linspace(-20, 20, 1001))
    assert np.all((v > -math.pi) & (v <= math.pi))


def test_conflict_point_cases():
    a = ReferenceLine("a", np.array([[-5.0, 0.0], [5.0, 0.0]]))
    b = ReferenceLine("b", np.array([[0.0, -5.0], [0.0, 5.0]]))
    cp = conflict_point(a, b)
    assert (cp.s_a, cp.s_b, cp.point) == (5.0, 5.0, (0.0, 0.0))
    c = ReferenceLine("c", np.array([[-5.0, 2.0], [5.0, 2.0]]))
    assert conflict_point(a, c) is None
    # collinear overlap: first shared point along a
    e = ReferenceLine("e", np.array([[2.0, 0.0], [8.0, 0.0]]))
    cp = conflict_point(a, e)
    assert (cp.s_a, cp.s_b) == (7.0, 0.0)


def test_conflict_point_matches_brute_force():
    rng = np.random.default_rng(2)
    hits = 0
    for trial in range(100):
        a = ReferenceLine("a", jagged(rng, 50))
        b = ReferenceLine("b", jagged(rng, 50))
        ref = brute_force_conflict(a, b)
        cp = conflict_point(a, b)
        if ref is None:
            assert cp is None
            continue
        hits += 1
        assert abs(cp.s_a - ref[0]) < 1e-9 and abs(cp.s_b - ref[1]) < 1e-9
        assert np.hypot(*(np.array(cp.point) - ref[2])) < 1e-9
        # the point lies on both polylines
        for line in (a, b):
            _, d, _ = project_points(np.array(cp.point)[None], line)
            assert abs(d[0]) < 1e-6
    assert hits > 30


def test_conflict_point_symmetry_single_crossing():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a = ReferenceLine("a", np.cumsum(rng.uniform(0.5, 1.5, size=(6, 2)), axis=0))
        start = rng.uniform(-3, 3, size=2) + np.array([0.0, 8.0])
        b = ReferenceLine("b", start + np.cumsum(np.abs(rng.uniform(0.5, 1.5, size=(6, 2))) * [1, -1], axis=0))
        ab, ba = conflict_point(a, b), conflict_point(b, a)
        if ab is None:
            assert ba is None
            continue
        assert abs(ab.s_a - ba.s_b) < 1e-9 and abs(ab.s_b - ba.s_a) < 1e-9
        np.testing.assert_allclose(ab.point, ba.point, atol=1e-9)


def test_dtw_equals_path_enumeration():
    rng = np.random.default_rng(4)
    for n, m in itertools.product(range(1, 7), range(1, 7)):
        x, y = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
        assert abs(dtw_cost(x, y) - enumerate_dtw(x, y)) < 1e-12


def test_dtw_assign_cases():
    a = ReferenceLine("A", np.array([[0.0, 0.0], [8.0, 0.0]]))
    b = ReferenceLine("B", np.array([[0.0, 0.0], [0.0, 8.0]]))
    track = resample(a)
    assert dtw_assign(track, [b, a]) == ("A", 0.0)
    assert dtw_assign(track, [b])[0] == "B"
    # identical candidates: lowest id wins
    a2 = ReferenceLine("0", a.waypoints.copy())
    assert dtw_assign(track, [a, a2])[0] == "0"
    with pytest.raises(ValueError):
        dtw_assign(track, [])


def test_dtw_assign_eight_points_vs_enumeration():
    rng = np.random.default_rng(5)
    a = ReferenceLine("A", np.array([[0.0, 0.0], [4.0, 0.5]]))
    b = ReferenceLine("B", np.array([[0.0, 0.0], [3.0, 3.0]]))
    track = np.linspace([0, 0], [4, 1], 8) + rng.normal(scale=0.1, size=(8, 2))
    costs = {ln.id: enumerate_dtw(track, resample(ln)) for ln in (a, b)}
    lid, cost = dtw_assign(track, [a, b])
    assert lid == min(costs, key=costs.get)
    assert abs(cost - costs[lid]) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=6),
       st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=6))
def test_dtw_nonnegative_and_zero_on_self(x, y):
    assert dtw_cost(x, y) >= 0.0
    assert dtw_cost(x, x) == 0.0


def test_map_round_trip(tmp_path):
    lines = {"a": x_axis(), "arc": quarter_circle()}
    save_map(tmp_path / "m.json", lines)
    back = load_map(tmp_path / "m.json")
    assert set(back) == {"x", "arc"}
    np.testing.assert_array_equal(back["arc"].waypoints, lines["arc"].waypoints)
