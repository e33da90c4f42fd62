import numpy as np
import pytest

from mixgame import lqgame as lq
from mixgame.dynamics import AgentState, step_array

from oracles import ilqr_tracking


def test_reference_trajectory_examples():
    ref = lq.reference_trajectory(lq.AgentSpec((3.0, 0.0), 0.5), AgentState(0, 0, 0, 1), 30, 0.1)
    np.testing.assert_allclose(ref.positions, np.column_stack([0.1 * np.arange(31), np.zeros(31)]),
                               atol=1e-12)
    at_goal = lq.reference_trajectory(lq.AgentSpec((1.0, 2.0), 0.5), AgentState(1, 2, 0, 1))
    np.testing.assert_allclose(at_goal.positions, np.tile([1.0, 2.0], (31, 1)))
    up = lq.reference_trajectory(lq.AgentSpec((0.0, 4.0), 0.5), AgentState(0, 0, 0, 1))
    np.testing.assert_allclose(up.positions[10], [0.0, 1.0], atol=1e-12)
    # stops at the goal when it is reached early
    short = lq.reference_points([0, 0], [0.5, 0], 30, 0.1)
    np.testing.assert_allclose(short[-1], [0.5, 0.0])


def test_cost_examples():
    assert lq.nav_cost(AgentState(1, 1, 0, 1), (1, 1)) == 0
    assert lq.nav_cost(AgentState(0.3, 0.4, 0, 1), (0, 0)) == pytest.approx(0.25)
    assert lq.nav_cost(AgentState(1, 0, 0, 1), (0, 0)) == pytest.approx(1.0)
    two = lambda d: [np.array([0, 0, 0, 1.0]), np.array([d, 0, 0, 1.0])]
    assert lq.safety_cost(two(0.8))[0] == 0
    assert lq.safety_cost(two(0.5))[0] == pytest.approx(0.04)
    assert lq.safety_cost(two(0.7))[0] == 0
    assert lq.safety_cost(two(0.0))[0] == pytest.approx(0.49)
    with pytest.raises(ValueError):
        lq.safety_cost([np.zeros(4)])
    states = [np.array([0.3, 0.4, 0, 1.0]), np.array([5.0, 5.0, 0, 1.0])]
    refs = [(0, 0), (5, 5)]
    assert lq.combined_cost(states, refs, [0.5, 0.5])[0] == pytest.approx(12.5)
    assert lq.combined_cost(states, refs, [1.0, 1.0])[0] == pytest.approx(100 * 0.25)
    assert lq.combined_cost(states, [(0.3, 0.4), (5, 5)], [0.3, 0.3]).tolist() == [0, 0]


def test_single_agent_matches_ilqr_oracle():
    x0 = np.array([0.0, 0.0, 0.3, 0.8])
    spec = lq.AgentSpec((5.0, 0.0), 0.7, preferred_speed=0.8)
    prob = lq.LqGameProblem([spec], tol=1e-10, max_iters=300)
    sol = lq.solve_lq_game(prob, x0[None])
    refs = lq.reference_points(x0, spec.goal, prob.horizon, prob.dt, 0.8)
    us, xs = ilqr_tracking(x0, refs, 100 * spec.lam, np.array(prob.control_weights), prob.dt)
    # bounds stay inactive, so the bounded game and the unbounded oracle solve the same problem
    assert np.all(np.abs(us[:, 0]) < 1.5) and np.all(np.abs(us[:, 1]) < 1.0)
    assert np.all((xs[:, 3] > 0.5) & (xs[:, 3] < 1.0))
    np.testing.assert_allclose(sol.controls[:, 0], us, atol=1e-6)


def test_far_apart_agents_decouple():
    specs = [lq.AgentSpec((3.0, 0.0), 0.4), lq.AgentSpec((3.0, 10.0), 0.8)]
    x0 = np.array([[-3.0, 0.0, 0.2, 1.0], [-3.0, 10.0, -0.2, 1.0]])
    kw = dict(tol=1e-9, max_iters=300)
    joint = lq.solve_lq_game(lq.LqGameProblem(specs, **kw), x0)
    for i in range(2):
        alone = lq.solve_lq_game(lq.LqGameProblem([specs[i]], **kw), x0[i:i + 1])
        np.testing.assert_allclose(joint.controls[:, i], alone.controls[:, 0], atol=1e-4)


def head_on(lam=0.5):
    specs = [lq.AgentSpec((3.0, 0.0), lam), lq.AgentSpec((-3.0, 0.0), lam)]
    x0 = np.array([[-3.0, 0.0, 0.0, 1.0], [3.0, 0.0, np.pi, 1.0]])
    return specs, x0


def min_sep(states):
    return float(np.hypot(*(states[:, 0, :2] - states[:, 1, :2]).T).min())


@pytest.mark.xfail(strict=True, reason="with nav weight 100 and safety weight 1000 the head-on "
                   "lambda=0.5 pass settles near 0.6 m; see decisions ledger")
def test_head_on_converged_separation():
    specs, x0 = head_on()
    sol = lq.solve_lq_game(lq.LqGameProblem(specs), x0)
    assert min_sep(sol.states) >= 0.65


@pytest.mark.xfail(strict=True, reason="closed-loop head-on lambda=0.5 pass reaches ~0.59 m; "
                   "see decisions ledger")
def test_head_on_closed_loop_separation():
    specs, x0 = head_on()
    mpc = lq.MpcController()
    x = x0.copy()
    traj = [x]
    for _ in range(80):
        u, _ = mpc([0, 1], specs, x)
        x = step_array(x, u)
        traj.append(x)
    assert min_sep(np.array(traj)) >= 0.65


def test_head_on_agents_do_avoid():
    """What the cost weights do deliver: a clear lateral deviation, well above a pass-through."""
    specs, x0 = head_on()
    sol = lq.solve_lq_game(lq.LqGameProblem(specs), x0)
    assert sol.converged
    assert min_sep(sol.states) > 0.5


def test_head_on_is_point_symmetric():
    specs, x0 = head_on()
    sol = lq.solve_lq_game(lq.LqGameProblem(specs, tol=1e-8), x0)
    a, b = sol.states[:, 0], sol.states[:, 1]
    np.testing.assert_allclose(b[:, :2], -a[:, :2], atol=1e-4)
    np.testing.assert_allclose(sol.controls[:, 0], sol.controls[:, 1], atol=1e-4)


def test_line_search_cost_trace_non_increasing():
    rng = np.random.default_rng(0)
    for _ in range(5):
        ang = rng.uniform(-np.pi, np.pi, 3)
        pos = 3 * np.column_stack([np.cos(ang), np.sin(ang)])
        specs = [lq.AgentSpec(tuple(-p), float(l)) for p, l in zip(pos, rng.uniform(0.1, 0.9, 3))]
        x0 = np.column_stack([pos, np.arctan2(-pos[:, 1], -pos[:, 0]), np.ones(3)])
        sol = lq.solve_lq_game(lq.LqGameProblem(specs), x0)
        assert np.all(np.diff(sol.cost_trace) <= 1e-9)


def test_warm_start_matches_cold_start():
    specs, x0 = head_on()
    prob = lq.LqGameProblem(specs, tol=1e-8, max_iters=200)
    cold = lq.solve_lq_game(prob, x0)
    warm = lq.solve_lq_game(prob, x0, cold.controls)
    np.testing.assert_allclose(warm.controls, cold.controls, atol=1e-4)


def test_mpc_step_returns_first_control_and_is_deterministic():
    specs, x0 = head_on(0.3)
    prob = lq.LqGameProblem(specs)
    u1, sol1 = lq.mpc_step(prob, x0)
    u2, sol2 = lq.mpc_step(prob, x0)
    np.testing.assert_array_equal(u1, sol1.controls[0])
    np.testing.assert_array_equal(u1, u2)
    u3, _ = lq.mpc_step(prob, x0, warm_start=sol1.controls)
    assert u3.shape == (2, 2)


def test_non_convergence_sets_warning_flag():
    specs, x0 = head_on(0.9)
    sol = lq.solve_lq_game(lq.LqGameProblem(specs, max_iters=1, tol=0.0), x0)
    assert sol.warning and not sol.converged


def test_problem_validation():
    with pytest.raises(ValueError):
        lq.LqGameProblem([lq.AgentSpec((0, 0), 0.5)], horizon=0)
    with pytest.raises(ValueError):
        lq.LqGameProblem([])
