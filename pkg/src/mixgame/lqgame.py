"""Iterative linear-quadratic Nash games for the navigation benchmark agents.

Each agent tracks a straight-line reference to its goal and pays a safety
penalty when closer than the social distance to anyone else::

    l_i = 100 * lam_i * l_nav + 1000 * (1 - lam_i) * l_safety

A small quadratic control penalty keeps each agent's LQ subproblem strictly
convex (the benchmark cost has none). The coupled LQ game is solved with the
feedback-Nash Riccati recursion and the nonlinear iterate is advanced by a
backtracking line search on the sum of agent costs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (ACCEL_MAX, DT, OMEGA_MAX, V_MAX, V_MIN, AgentState,
                       Trajectory, clip_controls, step_array)

log = logging.getLogger(__name__)

SOCIAL_DISTANCE = 0.7
W_NAV, W_SAFETY = 100.0, 1000.0
PREFERRED_SPEED = 1.0
HORIZON = 30
CONTROL_WEIGHTS = (1.0, 1.0)
TIE_BREAK_HEADING = 1e-3


@dataclass
class AgentSpec:
    goal: tuple
    lam: float
    initial: AgentState | None = None
    preferred_speed: float = PREFERRED_SPEED


@dataclass
class LqGameProblem:
    specs: list
    horizon: int = HORIZON
    dt: float = DT
    social_distance: float = SOCIAL_DISTANCE
    w_nav: float = W_NAV
    w_safety: float = W_SAFETY
    control_weights: tuple = CONTROL_WEIGHTS
    max_iters: int = 50
    tol: float = 1e-3
    max_halvings: int = 10

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if len(self.specs) < 1:
            raise ValueError("need at least one agent")

    @property
    def n_agents(self) -> int:
        return len(self.specs)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([s.lam for s in self.specs], dtype=float)

    @property
    def goals(self) -> np.ndarray:
        return np.array([s.goal for s in self.specs], dtype=float).reshape(-1, 2)


@dataclass
class GameSolution:
    controls: np.ndarray          # (T, N, 2)
    states: np.ndarray            # (T+1, N, 4)
    costs: np.ndarray             # (N,)
    iterations: int
    converged: bool
    cost_trace: list = field(default_factory=list)

    @property
    def warning(self) -> bool:
        return not self.converged


# ----------------------------------------------------------------- references

def reference_points(position, goal, horizon: int, dt: float = DT,
                     speed: float = PREFERRED_SPEED) -> np.ndarray:
    """Straight-line reference positions for steps ``0..horizon``."""
    p = np.asarray(position, dtype=float)[:2]
    g = np.asarray(goal, dtype=float)
    delta = g - p
    dist = float(np.hypot(*delta))
    steps = np.arange(horizon + 1) * dt * speed
    if dist < 1e-12:
        return np.tile(p, (horizon + 1, 1))
    direction = delta / dist
    return p + np.minimum(steps, dist)[:, None] * direction


def reference_trajectory(spec: AgentSpec, state: AgentState, horizon: int = HORIZON,
                         dt: float = DT) -> Trajectory:
    x = state.to_array() if isinstance(state, AgentState) else np.asarray(state, float)
    pts = reference_points(x, spec.goal, horizon, dt, spec.preferred_speed)
    delta = np.asarray(spec.goal, float) - x[:2]
    heading = float(np.arctan2(delta[1], delta[0])) if np.hypot(*delta) > 0 else x[2]
    moving = np.r_[np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-12, False]
    states = np.column_stack([pts, np.full(horizon + 1, heading),
                              np.where(moving, spec.preferred_speed, 0.0)])
    return Trajectory(states, dt, generated=True)


# ---------------------------------------------------------------------- costs

def nav_cost(state, ref_point) -> float:
    x = state.to_array() if isinstance(state, AgentState) else np.asarray(state, float)
    r = np.asarray(ref_point, dtype=float)
    return float((x[0] - r[0]) ** 2 + (x[1] - r[1]) ** 2)


def safety_cost(states, social_distance: float = SOCIAL_DISTANCE) -> np.ndarray:
    """Per-agent sum of squared shortfall below the social distance."""
    x = np.array([s.to_array() if isinstance(s, AgentState) else s for s in states],
                 dtype=float)
    if x.shape[0] < 2:
        raise ValueError("safety cost needs at least two agents")
    diff = x[:, None, :2] - x[None, :, :2]
    d = np.hypot(diff[..., 0], diff[..., 1])
    short = np.where(d < social_distance, (d - social_distance) ** 2, 0.0)
    np.fill_diagonal(short, 0.0)
    return short.sum(axis=1)


def combined_cost(states, refs, lambdas, social_distance: float = SOCIAL_DISTANCE,
                  w_nav: float = W_NAV, w_safety: float = W_SAFETY) -> np.ndarray:
    x = np.array([s.to_array() if isinstance(s, AgentState) else s for s in states],
                 dtype=float)
    lam = np.asarray(lambdas, dtype=float)
    lr = np.array([nav_cost(xi, ri) for xi, ri in zip(x, refs)])
    ls = safety_cost(x, social_distance) if len(x) > 1 else np.zeros(1)
    return w_nav * lam * lr + w_safety * (1.0 - lam) * ls


# ------------------------------------------------------------------- internals

def _stage_costs(problem: LqGameProblem, xs, us, refs):
    """Total cost per agent for joint rollouts ``xs (...,T+1,N,4)``, ``us (...,T,N,2)``."""
    lam = problem.lambdas
    pos = xs[..., 1:, :, :2]
    nav = ((pos - refs[1:]) ** 2).sum(axis=-1).sum(axis=-2)
    total = problem.w_nav * lam * nav
    N = problem.n_agents
    if N > 1:
        diff = pos[..., :, None, :] - pos[..., None, :, :]
        d = np.sqrt((diff ** 2).sum(-1))
        short = np.where(d < problem.social_distance, (d - problem.social_distance) ** 2, 0.0)
        idx = np.arange(N)
        short[..., idx, idx] = 0.0
        total = total + problem.w_safety * (1.0 - lam) * short.sum(axis=-1).sum(axis=-2)
    rw = np.asarray(problem.control_weights)
    total = total + (us ** 2 * rw).sum(axis=-1).sum(axis=-2)
    return total


def _linearize(xs, us, dt):
    """Per-agent Jacobians ``a (T,N,4,4)``, ``b (T,N,4,2)`` along the iterate."""
    x, u = xs[:-1], us
    psi, v = x[..., 2], x[..., 3]
    T, N = u.shape[:2]
    a = np.zeros((T, N, 4, 4))
    a[..., 0, 0] = a[..., 1, 1] = a[..., 2, 2] = 1.0
    a[..., 0, 2] = -dt * v * np.sin(psi)
    a[..., 0, 3] = dt * np.cos(psi)
    a[..., 1, 2] = dt * v * np.cos(psi)
    a[..., 1, 3] = dt * np.sin(psi)
    v_next = v + dt * u[..., 1]
    free = (v_next <= V_MAX) & (v_next >= V_MIN)
    a[..., 3, 3] = np.where(free, 1.0, 0.0)
    b = np.zeros((T, N, 4, 2))
    b[..., 2, 0] = dt
    b[..., 3, 1] = np.where(free, dt, 0.0)
    return a, b


def _quadraticize(problem: LqGameProblem, xs, refs):
    """Gauss-Newton state costs ``Q (N,T+1,n,n)``, ``q (N,T+1,n)`` per agent."""
    N = problem.n_agents
    T1 = xs.shape[0]
    n = 4 * N
    Q = np.zeros((N, T1, n, n))
    q = np.zeros((N, T1, n))
    lam = problem.lambdas
    pos = xs[:, :, :2]
    for i in range(N):
        w = problem.w_nav * lam[i]
        q[i, 1:, 4 * i:4 * i + 2] = 2.0 * w * (pos[1:, i] - refs[1:, i])
        Q[i, 1:, 4 * i, 4 * i] = 2.0 * w
        Q[i, 1:, 4 * i + 1, 4 * i + 1] = 2.0 * w
    dbar = problem.social_distance
    for i in range(N):
        for j in range(i + 1, N):
            diff = pos[1:, i] - pos[1:, j]
            d = np.hypot(diff[:, 0], diff[:, 1])
            active = d < dbar
            if not np.any(active):
                continue
            e = diff / np.maximum(d, 1e-6)[:, None]
            e[d < 1e-6] = np.array([1.0, 0.0])
            shortfall = np.where(active, d - dbar, 0.0)
            outer = np.where(active[:, None, None], e[:, :, None] * e[:, None, :], 0.0)
            si, sj = slice(4 * i, 4 * i + 2), slice(4 * j, 4 * j + 2)
            for k in (i, j):
                w = problem.w_safety * (1.0 - lam[k])
                g = 2.0 * w * shortfall[:, None] * e
                q[k, 1:, si] += g
                q[k, 1:, sj] -= g
                H = 2.0 * w * outer
                Q[k, 1:, si, si] += H
                Q[k, 1:, sj, sj] += H
                Q[k, 1:, si, sj] -= H
                Q[k, 1:, sj, si] -= H
    return Q, q


def _block_diag(blocks):
    """``(T,N,r,c)`` per-agent blocks -> ``(T,N*r,N*c)`` block-diagonal matrices."""
    T, N, r, c = blocks.shape
    out = np.zeros((T, N, r, N, c))
    idx = np.arange(N)
    out[:, idx, :, idx, :] = np.moveaxis(blocks, 1, 0)
    return out.reshape(T, N * r, N * c)


def _solve_lq(a, b, Q, q, us, rw):
    """Feedback Nash recursion. Returns gains ``P (T,m,n)`` and offsets ``alpha (T,m)``."""
    T, N = a.shape[:2]
    n, m = 4 * N, 2 * N
    ar = np.arange(N)
    rows = 4 * ar[:, None] + np.arange(4)[None, :]          # (N,4)
    R = np.diag(2.0 * np.asarray(rw))                        # per-agent R_ii
    R_full = np.kron(np.eye(N), R)
    r_lin = 2.0 * us * np.asarray(rw)                        # (T,N,2)
    A_all = _block_diag(a)
    B_all = _block_diag(b)
    bT_all = np.swapaxes(b, -1, -2)                          # (T,N,2,4)
    Z = Q[:, T].copy()
    zeta = q[:, T].copy()
    Ps = np.empty((T, m, n))
    alphas = np.empty((T, m))
    for t in range(T - 1, -1, -1):
        A, B, bt = A_all[t], B_all[t], bT_all[t]
        Zrows = Z[ar[:, None], rows]                          # (N,4,n)
        S = (bt @ (Zrows @ B)).reshape(m, m) + R_full
        Y_P = (bt @ (Zrows @ A)).reshape(m, n)
        zrows = zeta[ar[:, None], rows]                       # (N,4)
        Y_a = (bt @ zrows[..., None])[..., 0] + r_lin[t]      # (N,2)
        sol = np.linalg.solve(S, np.concatenate([Y_P, Y_a.reshape(m, 1)], axis=1))
        P, alpha = sol[:, :n], sol[:, n]
        Ps[t], alphas[t] = P, alpha
        F = A - B @ P
        beta = -B @ alpha
        Pi = P.reshape(N, 2, n)
        ai = alpha.reshape(N, 2)
        PiT = np.swapaxes(Pi, -1, -2)
        zeta = (q[:, t] + (PiT @ (ai @ R - r_lin[t])[..., None])[..., 0]
                + ((Z @ beta) + zeta) @ F)
        Z = Q[:, t] + PiT @ R @ Pi + F.T @ Z @ F
    return Ps, alphas


_U_LO = np.array([-OMEGA_MAX, -ACCEL_MAX])
_U_HI = np.array([OMEGA_MAX, ACCEL_MAX])


def _forward(problem, x0, xs_hat, us_hat, Ps, alphas, step_sizes):
    """Closed-loop rollouts for every step size in ``step_sizes (S,)`` at once.

    Returns ``xs (S,T+1,N,4)`` and ``us (S,T,N,2)``.
    """
    T, N = us_hat.shape[:2]
    S = len(step_sizes)
    dt = problem.dt
    xs = np.empty((S,) + xs_hat.shape)
    us = np.empty((S,) + us_hat.shape)
    xs[:, 0] = x0
    ff = us_hat - np.asarray(step_sizes)[:, None, None, None] * alphas.reshape(T, N, 2)
    two_pi = 2.0 * np.pi
    for t in range(T):
        x = xs[:, t]
        dx = x - xs_hat[t]
        dx[..., 2] = np.pi - np.mod(np.pi - dx[..., 2], two_pi)
        u = ff[:, t] - (dx.reshape(S, -1) @ Ps[t].T).reshape(S, N, 2)
        u = np.minimum(np.maximum(u, _U_LO), _U_HI)
        us[:, t] = u
        # inlined step_array: this loop is the solver's hot path
        psi, v = x[..., 2], x[..., 3]
        nxt = xs[:, t + 1]
        nxt[..., 0] = x[..., 0] + dt * v * np.cos(psi)
        nxt[..., 1] = x[..., 1] + dt * v * np.sin(psi)
        nxt[..., 2] = np.pi - np.mod(np.pi - (psi + dt * u[..., 0]), two_pi)
        nxt[..., 3] = np.minimum(np.maximum(v + dt * u[..., 1], V_MIN), V_MAX)
    return xs, us


def initial_guess(n_agents: int, horizon: int, dt: float = DT) -> np.ndarray:
    """Zero controls plus a small common heading nudge that breaks head-on ties."""
    u = np.zeros((horizon, n_agents, 2))
    u[0, :, 0] = TIE_BREAK_HEADING / dt
    return u


def solve_lq_game(problem: LqGameProblem, x0, initial_controls=None) -> GameSolution:
    """Local feedback Nash equilibrium of the receding-horizon game from ``x0 (N,4)``."""
    x0 = np.asarray(x0, dtype=float).reshape(problem.n_agents, 4)
    T, N = problem.horizon, problem.n_agents
    if initial_controls is None:
        us = initial_guess(N, T, problem.dt)
    else:
        us = np.array(initial_controls, dtype=float).reshape(T, N, 2).copy()
        # a warm plan with no turning in it would stay on the straight-through
        # stationary point of a symmetric head-on game, so it gets the nudge too
        if np.max(np.abs(us[..., 0])) <= TIE_BREAK_HEADING / problem.dt:
            us[0, :, 0] += TIE_BREAK_HEADING / problem.dt
        us = clip_controls(us)
    refs = np.stack([reference_points(x0[i], problem.specs[i].goal, T, problem.dt,
                                      problem.specs[i].preferred_speed)
                     for i in range(N)], axis=1)             # (T+1,N,2)
    rw = np.asarray(problem.control_weights, dtype=float)
    xs = np.empty((T + 1, N, 4))
    xs[0] = x0
    for t in range(T):
        xs[t + 1] = step_array(xs[t], us[t], problem.dt)
    costs = _stage_costs(problem, xs, us, refs)
    trace = [float(costs.sum())]
    converged = False
    it = 0
    step_sizes = 0.5 ** np.arange(problem.max_halvings + 1)
    for it in range(1, problem.max_iters + 1):
        a, b = _linearize(xs, us, problem.dt)
        Q, q = _quadraticize(problem, xs, refs)
        Ps, alphas = _solve_lq(a, b, Q, q, us, rw)
        # backtracking line search; all halvings are rolled out in one batch and
        # the first (largest) step that lowers the summed cost is taken
        xs_all, us_all = _forward(problem, x0, xs, us, Ps, alphas, step_sizes)
        costs_all = _stage_costs(problem, xs_all, us_all, refs)
        better = np.flatnonzero(costs_all.sum(axis=-1) < costs.sum())
        if better.size:
            k = better[0]
            xs_new, us_new, costs_new = xs_all[k], us_all[k], costs_all[k]
        else:
            # no descent direction left for the joint cost: treat as stationary
            converged = True
            break
        change = float(np.max(np.abs(us_new - us)))
        xs, us, costs = xs_new, us_new, costs_new
        trace.append(float(costs.sum()))
        if change < problem.tol:
            converged = True
            break
    if not converged:
        log.warning("lq game did not converge in %d iterations", problem.max_iters)
    return GameSolution(us, xs, costs, it, converged, trace)


def shift_controls(us: np.ndarray) -> np.ndarray:
    """Drop the applied control and repeat the last one (warm start)."""
    return np.concatenate([us[1:], us[-1:]], axis=0)


def mpc_step(problem: LqGameProblem, states, warm_start=None):
    """Solve from the current joint state and return ``(first controls (N,2), solution)``."""
    init = None if warm_start is None else shift_controls(np.asarray(warm_start))
    sol = solve_lq_game(problem, states, init)
    return sol.controls[0].copy(), sol


class MpcController:
    """Receding-horizon wrapper keeping per-agent warm starts across steps."""

    def __init__(self, horizon: int = HORIZON, dt: float = DT, **problem_kwargs):
        self.horizon = horizon
        self.dt = dt
        self.problem_kwargs = problem_kwargs
        self._warm: dict = {}
        self.last_solution: GameSolution | None = None

    def reset(self):
        self._warm.clear()
        self.last_solution = None

    def __call__(self, agent_ids, specs, states):
        """Controls for ``agent_ids`` (any hashable keys) from joint ``states``."""
        agent_ids = list(agent_ids)
        problem = LqGameProblem(list(specs), self.horizon, self.dt, **self.problem_kwargs)
        if all(k in self._warm for k in agent_ids):
            warm = np.stack([self._warm[k] for k in agent_ids], axis=1)
            init = shift_controls(warm)
        else:
            init = None
        sol = solve_lq_game(problem, states, init)
        self._warm = {k: sol.controls[:, i] for i, k in enumerate(agent_ids)}
        self.last_solution = sol
        return sol.controls[0].copy(), sol
