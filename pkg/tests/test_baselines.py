import itertools
import math

import numpy as np
import pytest
from helpers import cross_ctx, track_from_s
from hypothesis import given, settings
from hypothesis import strategies as st

from diapredict.baselines import (
    POLICIES,
    IdmParams,
    Other,
    RolloutScene,
    fsm_select_leader,
    idm_accel,
    idm_equilibrium_gap,
    rollout,
    scene_from_tracks,
)

P = IdmParams()


def test_idm_free_road():
    assert idm_accel(P.v0, None, 0.0, P) == 0.0
    assert idm_accel(0.0, None, 0.0, P) == P.a_max


def test_idm_formula_at_half_speed():
    v = P.v0 / 2
    gap = P.s0 + v * P.T
    direct = P.a_max * (1 - (v / P.v0) ** P.delta - ((P.s0 + v * P.T) / gap) ** 2)
    assert abs(idm_accel(v, gap, 0.0, P) - direct) < 1e-9
    dv = 1.5
    s_star = P.s0 + v * P.T + v * dv / (2 * math.sqrt(P.a_max * P.b))
    assert idm_accel(v, 20.0, dv, P) == pytest.approx(P.a_max * (1 - (v / P.v0) ** 4 - (s_star / 20.0) ** 2), abs=1e-12)


@pytest.mark.parametrize("v", [0.0, 1.0, 5.0, 9.0, 9.99])
def test_idm_holds_speed_at_equilibrium_gap(v):
    assert abs(idm_accel(v, idm_equilibrium_gap(v, P), 0.0, P)) < 1e-6


def test_equilibrium_gap_edges():
    assert idm_equilibrium_gap(0.0) == P.s0
    assert idm_equilibrium_gap(P.v0) == math.inf
    with pytest.raises(ValueError):
        idm_equilibrium_gap(-1.0)


def test_idm_clamps():
    assert idm_accel(5.0, 0.0, 0.0, P) == -P.b_max
    assert idm_accel(5.0, -3.0, 0.0, P) == -P.b_max
    assert idm_accel(10.0, 0.5, 10.0, P) == -P.b_max


def test_idm_params_validation():
    with pytest.raises(ValueError):
        IdmParams(v0=0.0)
    with pytest.raises(ValueError):
        IdmParams(delta=0.5)


def crossing(aid, s, v, c_own, c_ego):
    return Other(aid, "crossing", s, v, conflict_ego=c_ego, conflict_own=c_own)


def test_single_closer_crossing_agent_is_selected_in_both_modes():
    sc = RolloutScene(0.0, 0.0, 8.0, [crossing(1, 10.0, 8.0, 20.0, 30.0)])
    for mode in ("distance", "time"):
        lead, gap = fsm_select_leader(sc, mode)
        assert lead.agent_id == 1 and gap == pytest.approx(20.0)


def test_stopped_crossing_agent():
    sc = RolloutScene(0.0, 0.0, 8.0, [crossing(1, 10.0, 0.0, 20.0, 30.0)])
    assert fsm_select_leader(sc, "distance")[0].agent_id == 1
    assert fsm_select_leader(sc, "time") is None


def test_agents_past_the_conflict_are_ignored():
    sc = RolloutScene(0.0, 0.0, 8.0, [crossing(1, 25.0, 8.0, 20.0, 30.0)])
    assert fsm_select_leader(sc, "distance") is None
    with pytest.raises(ValueError):
        fsm_select_leader(sc, "eta")


def _brute(sc, mode):
    """Every agent scored independently; the smallest gap among qualifiers wins."""
    best = None
    for o in sc.others:
        if o.kind == "lane":
            if o.s <= sc.s:
                continue
            gap = o.s - sc.s - o.length
        else:
            ro, re = o.conflict_own - o.s, o.conflict_ego - sc.s
            if ro < 0 or re < 0:
                continue
            if mode == "distance":
                ok = ro < re
            else:
                to = ro / o.v if o.v > 1e-3 else math.inf
                te = re / sc.v if sc.v > 1e-3 else math.inf
                ok = to < te
            if not ok:
                continue
            gap = re - ro
        if best is None or (gap, o.agent_id) < (best[1], best[0]):
            best = (o.agent_id, gap)
    return best


def _random_scene(rng, n=6):
    others = []
    for i in range(n):
        if rng.random() < 0.3:
            others.append(Other(i, "lane", float(rng.uniform(-10, 60)), float(rng.uniform(0, 12))))
        else:
            others.append(crossing(i, float(rng.uniform(0, 40)), float(rng.choice([0.0, rng.uniform(0, 12)])),
                                   float(rng.uniform(10, 50)), float(rng.uniform(5, 50))))
    return RolloutScene(0.0, 0.0, float(rng.uniform(0, 12)), others)


def test_six_agent_scenes_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(500):
        sc = _random_scene(rng)
        for mode in ("distance", "time"):
            got = fsm_select_leader(sc, mode)
            ref = _brute(sc, mode)
            assert (None if got is None else (got[0].agent_id, got[1])) == ref


def test_const_vel_rollout():
    out = rollout("const_vel", RolloutScene(0.0, 0.7, 10.0), 30)
    assert out[-1, 0] == pytest.approx(30.0, abs=1e-9)
    assert np.all(out[:, 1] == 0.7)


def test_idm_free_road_at_desired_speed():
    out = rollout("idm", RolloutScene(5.0, 0.0, P.v0), 30)
    assert np.allclose(out[:, 0], 5.0 + P.v0 * 0.1 * np.arange(1, 31), atol=1e-9)


def test_fsm_d_stops_before_conflict():
    # a slow crossing agent is nearly at the conflict point and keeps creeping
    conflict = 25.0
    sc = RolloutScene(0.0, 0.0, 8.0, [crossing(1, 14.0, 0.05, 15.0, conflict)])
    out = rollout("fsm_d", sc, 100)
    v = np.diff(out[:, 0]) / 0.1
    assert out[-1, 0] < conflict - 1.0
    assert v[-1] < 0.1
    # const velocity would drive straight through
    assert rollout("const_vel", sc, 100)[-1, 0] > conflict


def test_fsm_t_ignores_stopped_agent_that_fsm_d_yields_to():
    sc = RolloutScene(0.0, 0.0, 8.0, [crossing(1, 14.0, 0.0, 15.0, 25.0)])
    assert rollout("fsm_t", sc, 40)[-1, 0] > rollout("fsm_d", sc, 40)[-1, 0] + 5


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(POLICIES), st.floats(0, 15), st.integers(0, 2 ** 31 - 1))
def test_rollouts_never_move_backward(policy, v, seed):
    sc = _random_scene(np.random.default_rng(seed))
    sc.v = v
    out = rollout(policy, sc, 30)
    assert np.all(np.diff(np.concatenate([[sc.s], out[:, 0]])) >= 0)


def test_modes_coincide_at_equal_speeds():
    rng = np.random.default_rng(1)
    for _ in range(300):
        v = float(rng.uniform(1, 12))
        sc = _random_scene(rng)
        sc.v = v
        for o in sc.others:
            o.v = v
        a, b = fsm_select_leader(sc, "distance"), fsm_select_leader(sc, "time")
        assert (a is None) == (b is None)
        if a is not None:
            assert a[0].agent_id == b[0].agent_id and a[1] == b[1]


def test_unknown_policy():
    with pytest.raises(ValueError):
        rollout("mpc", RolloutScene(0.0, 0.0, 1.0), 5)


def test_scene_from_tracks():
    ctx = cross_ctx()
    E, C = ctx.lines["E"], ctx.lines["C"]
    n = 41
    ego = track_from_s(1, E, 20.0 + 0.8 * np.arange(n))
    cross = track_from_s(2, C, 30.0 + 0.5 * np.arange(n))
    lead = track_from_s(3, E, 40.0 + 0.6 * np.arange(n))
    sc = scene_from_tracks(ego, [ego, cross, lead], ctx, 10)
    assert sc.s == pytest.approx(28.0) and abs(sc.d) < 1e-9 and sc.v == pytest.approx(8.0)
    kinds = {o.agent_id: o for o in sc.others}
    assert kinds[2].kind == "crossing"
    assert kinds[2].conflict_ego == pytest.approx(50.0) and kinds[2].conflict_own == pytest.approx(50.0)
    assert kinds[3].kind == "lane" and kinds[3].s == pytest.approx(46.0)


def test_permuting_agents_does_not_change_selection():
    rng = np.random.default_rng(2)
    for _ in range(50):
        sc = _random_scene(rng)
        ref = fsm_select_leader(sc, "distance")
        for perm in itertools.islice(itertools.permutations(sc.others), 10):
            got = fsm_select_leader(sc, "distance", list(perm))
            assert (got is None and ref is None) or (got[0].agent_id == ref[0].agent_id)
