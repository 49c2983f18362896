import numpy as np
import pytest
from helpers import gru_ref, gru_unroll_ref, param_fd_check
from hypothesis import given, settings
from hypothesis import strategies as st

from diapredict import edn

T_H, T_F = 4, 6
SMALL = dict(hidden=8, T_h=T_H, T_f=T_F)


def cfg_(**kw):
    return edn.EdnConfig(**{**SMALL, **kw})


def window(p0, v, T_h=T_H, T_f=T_F, heading=0.0, goal=None):
    """Constant-velocity window starting at p0."""
    n = T_h + 1 + T_f
    k = np.arange(n)[:, None]
    pos = edn.snap(np.asarray(p0) + k * 0.1 * np.asarray(v))
    vel = np.tile(np.asarray(v, dtype=float), (n, 1))
    g = float(pos[-1, 0] - pos[T_h, 0]) if goal is None else goal
    return edn.Window(pos, vel, np.full(n, heading), g)


def random_windows(rng, B, T_h=T_H, T_f=T_F):
    n = T_h + 1 + T_f
    out = []
    for _ in range(B):
        pos = edn.snap(np.cumsum(rng.normal(size=(n, 2)) * [1.0, 0.1], axis=0) + rng.uniform(-50, 50, 2))
        out.append(edn.Window(pos, rng.normal(size=(n, 2)) * 5, rng.normal(size=n) * 0.2, float(rng.uniform(0, 30))))
    return out


def numpy_P(p):
    return {n: p[n] for n in p}


def test_zero_encoder_gives_zero_context():
    cfg = cfg_()
    b = edn.apply_representation(random_windows(np.random.default_rng(0), 3), cfg)
    assert np.all(edn.edn_encode(numpy_P(edn.zero_params(cfg)), b.inputs) == 0)


def test_single_step_encoder_is_one_gru_step():
    cfg = cfg_(T_h=1)
    p = edn.init_params(cfg)
    b = edn.apply_representation(random_windows(np.random.default_rng(1), 3, T_h=1), cfg)
    c = edn.edn_encode(numpy_P(p), b.inputs)
    ref = gru_ref(b.inputs[:, 0], np.zeros((3, 8)), p["enc.W_ih"], p["enc.W_hh"], p["enc.b_ih"], p["enc.b_hh"])
    assert np.allclose(c, ref, atol=1e-12)


def test_encoder_matches_unrolled_oracle():
    cfg = cfg_()
    p = edn.init_params(cfg)
    b = edn.apply_representation(random_windows(np.random.default_rng(2), 5), cfg)
    ref = gru_unroll_ref(b.inputs, p["enc.W_ih"], p["enc.W_hh"], p["enc.b_ih"], p["enc.b_hh"])
    assert np.allclose(edn.edn_encode(numpy_P(p), b.inputs), ref, atol=1e-12)


def test_encoder_rejects_wrong_feature_count():
    with pytest.raises(ValueError):
        edn.edn_encode(numpy_P(edn.init_params(cfg_())), np.zeros((2, T_H, 4)))


@pytest.mark.parametrize("mode", edn.MODES)
def test_zero_decoder_keeps_agent_still(mode):
    cfg = cfg_(mode=mode)
    b = edn.apply_representation(random_windows(np.random.default_rng(3), 4), cfg)
    pred = edn.predict(edn.zero_params(cfg), b, cfg)
    cur = b.prev
    assert np.allclose(pred, cur[:, None], atol=1e-12)


def _decoder_oracle(p, c, b, cfg):
    """Step-by-step decoder written with the reference GRU (input mode, incremental)."""
    pos, inc, h = b.pos0.copy(), b.inc0.copy(), c.copy()
    outs = []
    for k in range(1, cfg.T_f + 1):
        x = np.concatenate([pos / 10, inc, (b.goal / 10)[:, None], np.full((len(b), 1), k / cfg.T_f)], axis=1)
        h = gru_ref(x, h, p["dec.W_ih"], p["dec.W_hh"], p["dec.b_ih"], p["dec.b_hh"])
        z = np.tanh(np.tanh(h @ p["fc1.W"] + p["fc1.b"]) @ p["fc2.W"] + p["fc2.b"])
        y = z @ p["fc3.W"] + p["fc3.b"]
        outs.append(y)
        pos, inc = pos + y, y
    return np.stack(outs, axis=1)


def test_decoder_matches_loop_oracle():
    cfg = cfg_()
    p = edn.init_params(cfg, seed=4)
    b = edn.apply_representation(random_windows(np.random.default_rng(4), 3), cfg)
    P = numpy_P(p)
    c = edn.edn_encode(P, b.inputs)
    assert np.allclose(edn.edn_decode(P, c, b, cfg), _decoder_oracle(p, c, b, cfg), atol=1e-12)


def test_single_step_decoder():
    cfg = cfg_()
    p = edn.init_params(cfg)
    b = edn.apply_representation(random_windows(np.random.default_rng(5), 2), cfg)
    P = numpy_P(p)
    c = edn.edn_encode(P, b.inputs)
    one = edn.edn_decode(P, c, b, cfg, T_f=1)
    assert one.shape == (2, 1, 2)
    assert np.allclose(one[:, 0], edn.edn_decode(P, c, b, cfg)[:, 0], atol=1e-15)
    with pytest.raises(ValueError):
        edn.edn_decode(P, c, b, cfg, T_f=0)


def test_intention_modes():
    base = edn.init_params(cfg_(mode="none"))
    wide = edn.init_params(cfg_(mode="input"))
    assert wide["dec.W_ih"].shape[0] == base["dec.W_ih"].shape[0] + 2
    assert edn.init_params(cfg_(mode="output"))["fc1.W"].shape[0] == 8 + 2
    with pytest.raises(ValueError):
        cfg_(mode="attention")
    with pytest.raises(ValueError):
        cfg_(mode="transform", coordinate="cartesian")


def test_transform_with_zero_goal_is_identity_shift():
    # with g = 0 the transform mode sees exactly the untransformed positions
    rng = np.random.default_rng(6)
    ws = random_windows(rng, 3)
    tr, hid = cfg_(mode="transform"), cfg_(mode="hidden")
    p = edn.init_params(tr, seed=1)
    ph = edn.init_params(hid, seed=1)
    for n in p:
        ph.set(n, p[n])
    ph.set("goal_emb.W", np.zeros_like(ph["goal_emb.W"]))
    ph.set("goal_emb.b", np.zeros_like(ph["goal_emb.b"]))
    b = edn.apply_representation(ws, tr, goals=np.zeros(3))
    assert np.array_equal(edn.predict(p, b, tr), edn.predict(ph, b, hid))


def test_goal_changes_transform_prediction():
    cfg = cfg_(mode="transform")
    p = edn.init_params(cfg)
    ws = random_windows(np.random.default_rng(7), 2)
    a = edn.predict(p, edn.apply_representation(ws, cfg, goals=np.zeros(2)), cfg)
    b = edn.predict(p, edn.apply_representation(ws, cfg, goals=np.full(2, 20.0)), cfg)
    assert not np.allclose(a, b)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)), min_size=T_H + 1 + T_F, max_size=T_H + 1 + T_F),
       st.booleans(), st.booleans())
def test_representation_round_trip_is_bit_exact(pts, incremental, align):
    pos = edn.snap(np.array(pts))
    n = len(pos)
    w = edn.Window(pos, np.zeros((n, 2)), np.zeros(n), 0.0)
    cfg = cfg_(incremental=incremental, align=align)
    b = edn.apply_representation([w], cfg)
    assert np.array_equal(edn.reconstruct(b.targets, b, cfg)[0], pos[T_H + 1:])


def test_stationary_track_has_zero_increments():
    cfg = cfg_()
    b = edn.apply_representation([window([3.0, -1.0], [0.0, 0.0])], cfg)
    assert np.all(b.targets == 0)
    assert np.all(b.pos0 == 0) and np.all(b.inc0 == 0)


def test_aligned_inputs_end_at_origin():
    cfg = cfg_()
    b = edn.apply_representation([window([100.0, 2.0], [8.0, 0.0])], cfg)
    assert np.all(b.inputs[0, -1, :2] == 0)
    assert b.inputs[0, 0, 0] == pytest.approx(-(T_H - 1) * 0.8 / 10)


def test_loss_values():
    z = np.zeros((2, 3, 2))
    assert float(edn.edn_loss(z, z)) == 0.0
    assert float(edn.edn_loss(z + 1.0, z)) == 12.0
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(4, 5, 2)), rng.normal(size=(4, 5, 2))
    naive = sum((a[i, k, j] - b[i, k, j]) ** 2 for i in range(4) for k in range(5) for j in range(2))
    assert float(edn.edn_loss(a, b)) == pytest.approx(naive, rel=1e-12)
    with pytest.raises(ValueError):
        edn.edn_loss(np.zeros((2, 3, 2)), np.zeros((2, 4, 2)))


@pytest.mark.parametrize("mode", edn.MODES)
@pytest.mark.parametrize("incremental", [True, False])
def test_gradients_match_finite_differences(mode, incremental):
    cfg = cfg_(hidden=5, T_f=3, mode=mode, incremental=incremental, dropout=0.0)
    p = edn.init_params(cfg, seed=2)
    rng = np.random.default_rng(9)
    b = edn.apply_representation(random_windows(rng, 3, T_f=3), cfg)
    worst = param_fd_check(lambda P: edn.batch_loss(P, b, cfg), p, rng)
    assert max(worst.values()) < 1e-4, worst


@pytest.mark.slow
def test_overfits_small_batch():
    cfg = cfg_(hidden=16, epochs=400, batch_size=4, lr=3e-3, dropout=0.0)
    b = edn.apply_representation(random_windows(np.random.default_rng(10), 4), cfg)
    p0 = edn.init_params(cfg)
    first = float(edn.batch_loss(numpy_P(p0), b, cfg))
    p, _ = edn.edn_train(b, cfg, params=p0.copy())
    assert float(edn.batch_loss(numpy_P(p), b, cfg)) < 0.05 * first


@pytest.mark.slow
def test_learns_constant_velocity():
    rng = np.random.default_rng(11)
    cfg = edn.EdnConfig(hidden=16, T_h=5, T_f=10, mode="none", epochs=60, batch_size=32, lr=3e-3, dropout=0.0)

    def corpus(n):
        return [window(rng.uniform(-20, 20, 2), [rng.uniform(2, 12), rng.uniform(-0.5, 0.5)], 5, 10) for _ in range(n)]

    train = edn.apply_representation(corpus(400), cfg)
    test_w = corpus(100)
    test = edn.apply_representation(test_w, cfg)
    p, _ = edn.edn_train(train, cfg)
    truth = np.stack([w.pos[6:] for w in test_w])
    assert edn.step_errors(edn.predict(p, test, cfg), truth).mean() < 0.05


def test_training_is_deterministic():
    cfg = cfg_(epochs=2, batch_size=4)
    b = edn.apply_representation(random_windows(np.random.default_rng(12), 8), cfg)
    p1, l1 = edn.edn_train(b, cfg)
    p2, l2 = edn.edn_train(b, cfg)
    assert l1 == l2
    assert all(np.array_equal(p1[n], p2[n]) for n in p1)


def test_empty_training_set():
    cfg = cfg_()
    b = edn.Batch(np.zeros((0, T_H, 5)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0),
                  np.zeros((0, T_F, 2)), np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        edn.edn_train(b, cfg)
    assert edn.predict(edn.init_params(cfg), b, cfg).shape == (0, T_F, 2)


def test_layer_names():
    for spelling in ("W^F_3", "WF3", "fc3", "w_f_3"):
        assert edn.canonical_layer(spelling) == "W^F_3"
    assert edn.canonical_layer("W^E_ih") == "W^E_ih"
    with pytest.raises(KeyError):
        edn.canonical_layer("W^Q_9")


def test_step_errors():
    a = np.zeros((1, 2, 2))
    b = np.array([[[3.0, 4.0], [0.0, 1.0]]])
    assert edn.step_errors(a, b).tolist() == [[5.0, 1.0]]
