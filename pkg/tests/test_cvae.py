import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixgame import cvae
from mixgame import diffkit as dk
from mixgame.checkpoint import CheckpointError
from mixgame.dynamics import rollout_array

SMALL = cvae.CvaeConfig(hidden=8, latent=2, n_dense=2)


def straight_window(x0, T1=30, T2=10):
    states = rollout_array(np.asarray(x0, float), np.zeros((T1 + T2 - 1, 2)))
    return states[:T2], states[T2:]


def ctx_for(past, goal):
    return cvae.ConditioningContext(past, np.asarray(goal, float))


def test_shapes_and_initial_posterior_is_standard_normal():
    model = cvae.init_cvae(SMALL, seed=0)
    past, fut = straight_window([0, 0, 0.3, 1.0])
    mu, logvar = cvae.encode(model, fut, ctx_for(past, [3, 1]))
    assert mu.shape == (2,) and logvar.shape == (2,)
    np.testing.assert_array_equal(mu, 0.0)
    np.testing.assert_array_equal(logvar, 0.0)
    tr = cvae.decode(model, np.zeros(2), ctx_for(past, [3, 1]))
    assert tr.states.shape == (30, 4) and tr.generated
    out = cvae.sample_many(model, np.stack([past] * 3), np.zeros((3, 2)) + 3, 5,
                           np.random.default_rng(0))
    assert out.shape == (3, 5, 30, 4)


def test_initial_decoder_walks_toward_goal_at_unit_speed():
    model = cvae.init_cvae(cvae.CvaeConfig(hidden=16), seed=3)
    past, _ = straight_window([0, 0, 0.0, 1.0])
    last = past[-1, :2]
    goal = last + np.array([0.0, 5.0])
    tr = cvae.decode(model, np.zeros(4), ctx_for(past, goal))
    step = np.diff(np.vstack([last, tr.positions]), axis=0)
    # the output bias alone gives 0.1 m per step toward the goal; weights add a small spread
    assert np.median(step[:, 1]) == pytest.approx(0.1, abs=0.03)
    assert np.all(np.abs(step[:, 0]) < 0.05)


def test_kl_standard_normal_examples():
    g = dk.Graph(record=False)
    kl = cvae.kl_standard_normal(g.const([[1.0, 0.0]]), g.const([[0.0, 0.0]]))
    assert kl.value[0] == pytest.approx(0.5)
    kl = cvae.kl_standard_normal(g.const([[0.0]]), g.const([[np.log(2.0)]]))
    assert kl.value[0] == pytest.approx(0.5 * (2 - 1 - np.log(2)))


def test_elbo_gradient_matches_finite_differences():
    model = cvae.init_cvae(SMALL, seed=1)
    rng = np.random.default_rng(0)
    # perturb the zero-initialized head so every path carries gradient
    params = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in model.params.items()}
    windows = [straight_window([rng.normal(), rng.normal(), rng.uniform(-3, 3), 0.8])
               for _ in range(3)]
    pasts = np.stack([w[0] for w in windows])
    futs = np.stack([w[1] for w in windows])
    batch = cvae.prepare_batch(pasts, rng.normal(size=(3, 2)) * 4, futs)
    eps = rng.normal(size=(3, 2))

    def f(P, g):
        return cvae.elbo_tensor(P, SMALL, g, batch, eps)[0]

    g = dk.Graph()
    grads = dk.grads_by_name(g, dk.backward(g, f(g.params(params), g)))
    h = 1e-4
    for name in ["enc.head.w", "dec.out.w", "dec.gru.w_hh", "ctx.gru.w_ih", "enc.mlp.0.b"]:
        value = params[name]
        idx = tuple(rng.integers(0, s) for s in value.shape)
        vals = []
        for sgn in (1, -1):
            p = dict(params)
            p[name] = value.copy()
            p[name][idx] += sgn * h
            vals.append(float(f(p, dk.Graph(record=False)).value))
        fd = (vals[0] - vals[1]) / (2 * h)
        assert grads[name][idx] == pytest.approx(fd, rel=1e-5, abs=1e-7), name


def test_sampling_is_deterministic_under_seed():
    model = cvae.init_cvae(SMALL, seed=0)
    past, _ = straight_window([0, 0, 0, 1.0])
    a = cvae.sample_many(model, past[None], np.array([[3.0, 0.0]]), 4, np.random.default_rng(7))
    b = cvae.sample_many(model, past[None], np.array([[3.0, 0.0]]), 4, np.random.default_rng(7))
    assert a.tobytes() == b.tobytes()


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = cvae.init_cvae(SMALL, seed=5)
    model.save(tmp_path / "m")
    back = cvae.CvaeModel.load(tmp_path / "m.json")
    assert back.config == model.config
    for k, v in model.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    past, _ = straight_window([0, 0, 0, 1.0])
    z = np.array([0.3, -1.2])
    assert cvae.decode(model, z, ctx_for(past, [2, 2])).states.tobytes() == \
        cvae.decode(back, z, ctx_for(past, [2, 2])).states.tobytes()


def test_checkpoint_kind_and_corruption_are_rejected(tmp_path):
    from mixgame import checkpoint
    checkpoint.save(tmp_path / "c", {"a": np.ones(2)}, {"kind": "cost"})
    with pytest.raises(CheckpointError):
        cvae.CvaeModel.load(tmp_path / "c")
    (tmp_path / "c.bin").write_bytes(b"\x00")
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "c")


def test_context_validation():
    with pytest.raises(ValueError):
        ctx_for(np.zeros((10, 4)), [np.nan, 0])
    model = cvae.init_cvae(SMALL)
    with pytest.raises(ValueError):
        cvae.decode(model, [np.inf, 0], ctx_for(np.zeros((10, 4)), [1, 0]))
    with pytest.raises(ValueError):
        cvae.decode(model, [0, 0], ctx_for(np.zeros((9, 4)), [1, 0]))


@settings(max_examples=15, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-3, 3), st.floats(-3, 3))
def test_rigid_motion_equivariance(theta, tx, ty):
    model = cvae.init_cvae(SMALL, seed=2)
    rng = np.random.default_rng(0)
    model.params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in model.params.items()}
    past = rollout_array(np.array([0.5, -0.2, 0.4, 0.9]), rng.uniform(-1, 1, (9, 2)))
    goal = np.array([3.0, 1.0])
    z = np.array([0.7, -0.4])
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s], [s, c]])

    def move(x):
        y = x.copy()
        y[..., :2] = x[..., :2] @ R.T + [tx, ty]
        y[..., 2] = x[..., 2] + theta
        return y

    a = cvae.decode(model, z, ctx_for(past, goal)).states
    b = cvae.decode(model, z, ctx_for(move(past), goal @ R.T + [tx, ty])).states
    np.testing.assert_allclose(b[:, :2], a[:, :2] @ R.T + [tx, ty], atol=1e-9)
    np.testing.assert_allclose(np.cos(b[:, 2] - a[:, 2] - theta), 1.0, atol=1e-9)


def test_learns_constant_velocity_corpus():
    rng = np.random.default_rng(0)
    pasts, futs, goals = [], [], []
    for _ in range(64):
        x0 = np.array([*rng.uniform(-4, 4, 2), rng.uniform(-np.pi, np.pi), rng.uniform(0.5, 1.0)])
        p, f = straight_window(x0)
        pasts.append(p)
        futs.append(f)
        goals.append(f[-1, :2] + 2 * np.array([np.cos(x0[2]), np.sin(x0[2])]))
    pasts, futs, goals = map(np.stack, (pasts, futs, goals))
    cfg = cvae.CvaeConfig(hidden=16, latent=2, n_dense=2)
    before = cvae.dataset_loss(cvae.init_cvae(cfg, seed=0), pasts, futs, goals)
    model, hist = cvae.train_cvae(pasts, futs, goals, model_cfg=cfg,
                                  train_cfg=cvae.CvaeTrainConfig(epochs=40, batch_size=16,
                                                                 lr=3e-3, seed=0))
    after = cvae.dataset_loss(model, pasts, futs, goals)
    assert hist[-1] < hist[0]
    assert after < 0.2 * before
    # prior samples should track the straight continuation within ~0.25 m on average
    s = cvae.sample_many(model, pasts[:8], goals[:8], 4, np.random.default_rng(1))
    err = np.linalg.norm(s[..., :2] - futs[:8, None, :, :2], axis=-1).mean()
    assert err < 0.25


def test_overfits_a_single_window():
    past, fut = straight_window([0, 0, 0.0, 0.7])
    fut = rollout_array(past[-1], np.tile([0.8, 0.2], (30, 1)))[1:]   # a left arc
    cfg = cvae.CvaeConfig(hidden=16, latent=2, n_dense=2)
    model, hist = cvae.train_cvae(past[None], fut[None], fut[-1:, :2], model_cfg=cfg,
                                  train_cfg=cvae.CvaeTrainConfig(epochs=150, batch_size=1,
                                                                 lr=1e-2, seed=0))
    mu, _ = cvae.encode(model, fut, ctx_for(past, fut[-1, :2]))
    tr = cvae.decode(model, mu, ctx_for(past, fut[-1, :2]))
    assert np.abs(tr.positions - fut[:, :2]).max() < 0.1
