"""Sample-based mixed-strategy Nash equilibrium (BRNE).

Every agent's mixed strategy is a set of K trajectory samples drawn from its
nominal distribution plus weights. Agents are swept in index order; agent i
reweights its samples by the Gibbs best response to the others' current
strategies (agents before i already updated this sweep, those after not yet):

    h_i(x_ik) = sum_{j != i} sum_k' w_jk' * l(x_ik, x_jk')
    w_i      = softmax(log(1/K) - h_i)

This is the exact minimizer of ``E[l] + KL(w_i || uniform)`` given the
others, so every agent's objective is non-increasing across its own updates.
The whole solve is written in diffkit ops so gradients flow from the final
weights back to whatever produced the pairwise cost matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffkit as dk
from .dynamics import Trajectory, mean_states

TV_TOL = 1e-4
MAX_SWEEPS = 100


@dataclass
class WeightedStrategy:
    """K samples ``(K, T, 4)`` with normalized weights."""

    samples: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 3 or self.samples.shape[0] < 1:
            raise ValueError(f"samples must be (K, T, 4), got {self.samples.shape}")
        K = self.samples.shape[0]
        if self.weights is None:
            self.weights = np.full(K, 1.0 / K)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (K,):
            raise ValueError("one weight per sample required")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")

    @property
    def K(self) -> int:
        return self.samples.shape[0]

    def trajectories(self, dt: float = 0.1) -> list:
        return [Trajectory(s, dt, generated=True) for s in self.samples]


@dataclass
class SolveReport:
    iterations: int
    cost_trace: list = field(default_factory=list)
    converged: bool = False


# --------------------------------------------------------------- cost matrices

def pair_cost_matrix(cost: Callable, A, B) -> np.ndarray:
    """``M[k, k'] = cost(A[k], B[k'])`` by direct evaluation."""
    A = [a.states if isinstance(a, Trajectory) else np.asarray(a) for a in A]
    B = [b.states if isinstance(b, Trajectory) else np.asarray(b) for b in B]
    if not A or not B:
        raise ValueError("sample sets must be nonempty")
    return np.array([[float(cost(a, b)) for b in B] for a in A])


def cost_tensors(graph: dk.Graph, matrices) -> dict:
    """Lift a ``{(i, j): (K, K)}`` dict of arrays to graph constants."""
    return {k: (v if isinstance(v, dk.Tensor) else graph.const(v)) for k, v in matrices.items()}


# --------------------------------------------------------------------- solver

def _others(i, n):
    return [j for j in range(n) if j != i]


def brne_sweeps(M: dict, n_agents: int, K: int, graph: dk.Graph, sweeps: int | None = None,
                tol: float = TV_TOL, max_sweeps: int = MAX_SWEEPS, trace: bool = True,
                observer: Callable | None = None):
    """Run BRNE on pairwise cost tensors.

    ``M[(i, j)]`` is a Tensor of shape ``(..., K, K)`` holding ``l(x_i, x_j)``;
    any leading batch axes are solved independently and in lockstep. With
    ``sweeps`` set, exactly that many sweeps are unrolled (training); otherwise
    the total-variation criterion decides (planning).

    ``observer(i, weights_before, weights_after)`` is called with numpy copies
    around every single-agent update.

    Returns ``(weights list of Tensors, SolveReport)``.
    """
    batch = None
    for v in M.values():
        batch = v.shape[:-2]
        break
    if batch is None:
        batch = ()
    uniform = np.full(batch + (K,), 1.0 / K)
    w = [graph.const(uniform) for _ in range(n_agents)]
    report = SolveReport(0, [], False)
    if trace:
        report.cost_trace.append(_expected_cost_value(M, [x.value for x in w], n_agents))
    limit = sweeps if sweeps is not None else max_sweeps
    log_prior = np.log(1.0 / K)
    for m in range(limit):
        change = 0.0
        for i in range(n_agents):
            h = None
            for j in _others(i, n_agents):
                term = (M[(i, j)] * w[j].reshape(w[j].shape[:-1] + (1, K))).sum(axis=-1)
                h = term if h is None else h + term
            if h is None:
                continue
            new = dk.softmax(log_prior - h, axis=-1)
            change = max(change, 0.5 * float(np.max(np.abs(new.value - w[i].value).sum(-1))))
            if observer is not None:
                before = [x.value.copy() for x in w]
                w[i] = new
                observer(i, before, [x.value.copy() for x in w])
            else:
                w[i] = new
        report.iterations = m + 1
        if trace:
            report.cost_trace.append(_expected_cost_value(M, [x.value for x in w], n_agents))
        if change < tol:
            report.converged = True
            if sweeps is None:
                break
    return w, report


def _expected_cost_value(M: dict, w: list, n: int) -> float:
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            m = M[(i, j)].value if isinstance(M[(i, j)], dk.Tensor) else M[(i, j)]
            total += float(np.sum(w[i][..., :, None] * m * w[j][..., None, :]))
    return total


def brne_update(strategies: list, cost: Callable | dict, sweeps: int | None = None,
                tol: float = TV_TOL, max_sweeps: int = MAX_SWEEPS):
    """Solve the forward game for plain numpy inputs.

    ``cost`` is either a pairwise callable on ``(T, 4)`` arrays or a dict of
    precomputed ``(K, K)`` matrices keyed by ordered agent pairs. Weights in
    ``strategies`` are reset to uniform first. Returns
    ``(list of WeightedStrategy, SolveReport)``.
    """
    n = len(strategies)
    K = strategies[0].K
    if any(s.K != K for s in strategies):
        raise ValueError("all agents need the same number of samples")
    if callable(cost):
        mats = {(i, j): pair_cost_matrix(cost, strategies[i].samples, strategies[j].samples)
                for i in range(n) for j in range(n) if i != j}
    else:
        mats = cost
    g = dk.Graph(record=False)
    w, report = brne_sweeps(cost_tensors(g, mats), n, K, g, sweeps, tol, max_sweeps)
    out = [WeightedStrategy(s.samples, wi.value.copy()) for s, wi in zip(strategies, w)]
    return out, report


# -------------------------------------------------------------- diagnostics

def expected_joint_cost(strategies: list, cost: Callable | dict) -> float:
    """``sum_{i<j} sum_k sum_k' w_ik w_jk' l(x_ik, x_jk')``."""
    n = len(strategies)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            if callable(cost):
                m = pair_cost_matrix(cost, strategies[i].samples, strategies[j].samples)
            else:
                m = cost[(i, j)]
            total += float(strategies[i].weights @ m @ strategies[j].weights)
    return total


def kl_to_nominal(strategy: WeightedStrategy) -> float:
    """Discrete KL of the weights against uniform ``1/K`` (0 log 0 = 0)."""
    w = strategy.weights
    K = w.size
    nz = w > 0
    return float(np.sum(w[nz] * np.log(w[nz] * K)))


def agent_objective(i: int, weights: list, mats: dict) -> float:
    """Agent i's regularized objective given everyone's current weights."""
    w = weights[i]
    K = w.size
    h = sum(mats[(i, j)] @ weights[j] for j in range(len(weights)) if j != i)
    nz = w > 0
    return float(w @ h + np.sum(w[nz] * np.log(w[nz] * K)))


def strategy_mean(strategy: WeightedStrategy, dt: float = 0.1) -> Trajectory:
    """Pointwise weighted mean trajectory (heading averaged on the circle)."""
    w = strategy.weights
    if not np.any(w > 0):
        raise ValueError("degenerate strategy: no positive weights")
    return Trajectory(mean_states(strategy.samples, w / w.sum()), dt, generated=True)
