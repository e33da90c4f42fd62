import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixgame import brne
from mixgame import diffkit as dk
from mixgame.brne import WeightedStrategy

from oracles import pairwise_expected_cost_bruteforce


def random_mats(rng, n, K, batch=()):
    mats = {}
    for i in range(n):
        for j in range(i + 1, n):
            m = rng.uniform(0, 2, batch + (K, K))
            mats[(i, j)] = m
            mats[(j, i)] = np.swapaxes(m, -1, -2)
    return mats


def strategies_for(n, K, rng, T=5):
    return [WeightedStrategy(rng.normal(size=(K, T, 4))) for _ in range(n)]


def test_single_update_example():
    # agent 0 sees cost 0 on its first sample and 1 on its second
    m = np.array([[0.0, 0.0], [1.0, 1.0]])
    mats = {(0, 1): m, (1, 0): m.T}
    g = dk.Graph(record=False)
    w, _ = brne.brne_sweeps(brne.cost_tensors(g, mats), 2, 2, g, sweeps=1)
    np.testing.assert_allclose(w[0].value, [0.7311, 0.2689], atol=1e-4)
    # agent 1 then sees identical rows, so it stays uniform
    np.testing.assert_allclose(w[1].value, [0.5, 0.5], atol=1e-12)


def test_zero_cost_keeps_uniform_weights():
    rng = np.random.default_rng(0)
    strats = strategies_for(3, 6, rng)
    out, report = brne.brne_update(strats, lambda a, b: 0.0)
    for s in out:
        np.testing.assert_array_equal(s.weights, np.full(6, 1 / 6))
    assert report.converged and report.iterations == 1


def test_constant_cost_shift_leaves_weights_unchanged():
    rng = np.random.default_rng(1)
    mats = random_mats(rng, 3, 5)
    shifted = {k: v + 7.5 for k, v in mats.items()}
    strats = strategies_for(3, 5, rng)
    a, _ = brne.brne_update(strats, mats)
    b, _ = brne.brne_update(strats, shifted)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.weights, y.weights, atol=1e-12)


def test_swapping_identical_agents_swaps_weights():
    rng = np.random.default_rng(2)
    K = 4
    m = rng.uniform(size=(K, K))
    m = 0.5 * (m + m.T)
    mats = {(0, 1): m, (1, 0): m.T}
    s = strategies_for(2, K, rng)
    out, _ = brne.brne_update(s, mats, sweeps=50)
    # sequential order breaks exact symmetry per sweep, but the fixed point is shared
    np.testing.assert_allclose(out[0].weights, out[1].weights, atol=1e-4)


def test_expected_cost_matches_bruteforce():
    rng = np.random.default_rng(3)
    strats = [WeightedStrategy(rng.normal(size=(3, 4, 4)), rng.dirichlet(np.ones(3)))
              for _ in range(3)]

    def cost(a, b):
        return float(np.exp(-np.sum((a[:, :2] - b[:, :2]) ** 2)))

    expected = pairwise_expected_cost_bruteforce([s.weights for s in strats],
                                                 [s.samples for s in strats], cost)
    assert brne.expected_joint_cost(strats, cost) == pytest.approx(expected, rel=1e-12)


def test_kl_examples():
    assert brne.kl_to_nominal(WeightedStrategy(np.zeros((4, 2, 4)))) == pytest.approx(0.0)
    w = np.array([1.0, 0.0, 0.0, 0.0])
    assert brne.kl_to_nominal(WeightedStrategy(np.zeros((4, 2, 4)), w)) == pytest.approx(np.log(4))


def test_every_update_lowers_the_updating_agents_objective():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n, K = rng.integers(2, 5), rng.integers(2, 8)
        mats = random_mats(rng, n, K)
        drops = []

        def observer(i, before, after):
            drops.append(brne.agent_objective(i, before, mats) -
                         brne.agent_objective(i, after, mats))

        g = dk.Graph(record=False)
        brne.brne_sweeps(brne.cost_tensors(g, mats), n, K, g, sweeps=4, observer=observer)
        assert min(drops) >= -1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 4), st.integers(1, 6), st.integers(0, 10_000))
def test_weights_are_distributions(n, K, seed):
    mats = random_mats(np.random.default_rng(seed), n, K)
    out, _ = brne.brne_update(strategies_for(n, K, np.random.default_rng(seed)), mats)
    for s in out:
        assert abs(s.weights.sum() - 1) < 1e-12 and np.all(s.weights >= 0)


def test_batched_solve_matches_individual_solves():
    rng = np.random.default_rng(5)
    mats = random_mats(rng, 3, 4, batch=(2,))
    g = dk.Graph(record=False)
    wb, _ = brne.brne_sweeps(brne.cost_tensors(g, mats), 3, 4, g, sweeps=3, trace=False)
    for b in range(2):
        g1 = dk.Graph(record=False)
        one = {k: v[b] for k, v in mats.items()}
        w1, _ = brne.brne_sweeps(brne.cost_tensors(g1, one), 3, 4, g1, sweeps=3)
        for i in range(3):
            np.testing.assert_allclose(wb[i].value[b], w1[i].value, atol=1e-14)


def test_unrolled_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    n, K = 3, 3
    base = {(i, j): rng.uniform(0, 1, (K, K)) for i in range(n) for j in range(i + 1, n)}
    c = rng.normal(size=(n, K))

    def loss(P, g):
        M = {}
        for (i, j), t in P.items():
            M[(i, j)] = t
            M[(j, i)] = dk.transpose(t)
        w, _ = brne.brne_sweeps(M, n, K, g, sweeps=3, trace=False)
        total = None
        for i in range(n):
            term = (w[i] * c[i]).sum()
            total = term if total is None else total + term
        return total

    g = dk.Graph()
    P = {k: g.param(v) for k, v in base.items()}
    grads = dk.backward(g, loss(P, g))
    h = 1e-5
    for key, value in base.items():
        fd = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            vals = []
            for sgn in (1, -1):
                v = {k: x.copy() for k, x in base.items()}
                v[key][idx] += sgn * h
                gg = dk.Graph(record=False)
                vals.append(float(loss({k: gg.const(x) for k, x in v.items()}, gg).value))
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        np.testing.assert_allclose(grads[P[key].id], fd, rtol=1e-5, atol=1e-8)


def test_strategy_mean_and_validation():
    s = np.zeros((2, 3, 4))
    s[1, :, 0] = 2.0
    m = brne.strategy_mean(WeightedStrategy(s, np.array([0.25, 0.75])))
    np.testing.assert_allclose(m.states[:, 0], 1.5)
    with pytest.raises(ValueError):
        brne.strategy_mean(WeightedStrategy(s, np.zeros(2)))
    with pytest.raises(ValueError):
        WeightedStrategy(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        brne.brne_update([WeightedStrategy(np.zeros((2, 3, 4))),
                          WeightedStrategy(np.zeros((3, 3, 4)))], lambda a, b: 0.0)
