"""Unicycle agents: state containers, Euler integration, mean-strategy tracking.

States are ``[x, y, psi, v]`` and controls ``[omega, a]``. Array helpers work
on any leading batch shape; the dataclasses are thin wrappers for callers
that want named fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DT = 0.1
V_MIN, V_MAX = 0.5, 1.0
OMEGA_MAX, ACCEL_MAX = 1.5, 1.0

TRACK_HORIZON = 10
TRACK_W_POS, TRACK_W_HEADING, TRACK_W_CONTROL = 1.0, 0.1, 0.01


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    psi: float
    v: float

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "AgentState":
        x, y, psi, v = (float(c) for c in np.asarray(arr, dtype=float))
        return cls(x, y, psi, v)


@dataclass(frozen=True)
class Control:
    omega: float
    a: float

    def to_array(self) -> np.ndarray:
        return np.array([self.omega, self.a], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "Control":
        omega, a = (float(c) for c in np.asarray(arr, dtype=float))
        return cls(omega, a)


@dataclass
class Trajectory:
    """Time-indexed states, shape ``(T, 4)``.

    ``generated`` marks samples from a learned model, which need not be
    dynamically feasible.
    """

    states: np.ndarray
    dt: float = DT
    generated: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != 4:
            raise ValueError(f"trajectory states must be (T, 4), got {self.states.shape}")

    def __len__(self):
        return self.states.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    def state(self, t: int) -> AgentState:
        return AgentState.from_array(self.states[t])


def clip_controls(u):
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    out[..., 0] = np.clip(u[..., 0], -OMEGA_MAX, OMEGA_MAX)
    out[..., 1] = np.clip(u[..., 1], -ACCEL_MAX, ACCEL_MAX)
    return out


def step_array(x, u, dt: float = DT):
    """Batched Euler step with velocity clamping and heading wrap."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    psi, v = x[..., 2], x[..., 3]
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (4,)))
    out[..., 0] = x[..., 0] + dt * v * np.cos(psi)
    out[..., 1] = x[..., 1] + dt * v * np.sin(psi)
    out[..., 2] = wrap_angle(psi + dt * u[..., 0])
    out[..., 3] = np.clip(v + dt * u[..., 1], V_MIN, V_MAX)
    return out


def step(state: AgentState, control: Control, dt: float = DT) -> AgentState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    xs, us = state.to_array(), control.to_array()
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(us))):
        raise ValueError("non-finite state or control")
    return AgentState.from_array(step_array(xs, us, dt))


def rollout_array(x0, controls, dt: float = DT) -> np.ndarray:
    """Roll ``controls`` of shape ``(T, ..., 2)`` from ``x0``; returns ``(T+1, ..., 4)``."""
    controls = np.asarray(controls, dtype=float)
    xs = np.empty((controls.shape[0] + 1,) + np.shape(x0))
    xs[0] = x0
    for t in range(controls.shape[0]):
        xs[t + 1] = step_array(xs[t], controls[t], dt)
    return xs


def rollout(initial: AgentState, controls, dt: float = DT) -> Trajectory:
    controls = [c.to_array() if isinstance(c, Control) else np.asarray(c, float)
                for c in controls]
    if not controls:
        raise ValueError("rollout needs at least one control")
    if dt <= 0:
        raise ValueError("dt must be positive")
    x0 = initial.to_array()
    u = np.stack(controls)
    if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or control")
    return Trajectory(rollout_array(x0, u, dt), dt)


def states_from_positions(positions, start, dt: float = DT) -> np.ndarray:
    """Rebuild ``[x, y, psi, v]`` from positions by finite differences.

    ``start`` is the position preceding ``positions[0]``. Where a step has no
    displacement the previous heading is kept.
    """
    positions = np.asarray(positions, dtype=float)
    start = np.asarray(start, dtype=float)
    prev = np.concatenate([start[..., None, :2], positions[..., :-1, :]], axis=-2)
    d = positions - prev
    speed = np.hypot(d[..., 0], d[..., 1])
    psi = np.arctan2(d[..., 1], d[..., 0])
    still = speed < 1e-9
    if np.any(still):
        psi = psi.copy()
        fill = np.zeros(psi.shape[:-1])
        for t in range(psi.shape[-1]):
            psi[..., t] = np.where(still[..., t], fill, psi[..., t])
            fill = psi[..., t]
    out = np.empty(positions.shape[:-1] + (4,))
    out[..., :2] = positions
    out[..., 2] = psi
    out[..., 3] = speed / dt
    return out


def mean_states(samples, weights) -> np.ndarray:
    """Weighted pointwise mean of ``(K, T, 4)`` samples; heading via sin/cos."""
    samples = np.asarray(samples, dtype=float)
    w = np.asarray(weights, dtype=float)
    out = np.empty(samples.shape[1:])
    out[:, 0] = np.tensordot(w, samples[:, :, 0], axes=1)
    out[:, 1] = np.tensordot(w, samples[:, :, 1], axes=1)
    s = np.tensordot(w, np.sin(samples[:, :, 2]), axes=1)
    c = np.tensordot(w, np.cos(samples[:, :, 2]), axes=1)
    out[:, 2] = np.arctan2(s, c)
    out[:, 3] = np.tensordot(w, samples[:, :, 3], axes=1)
    return out


def _linearize(x, u, dt):
    """Jacobians of ``step_array`` at one state, honoring the velocity clamp."""
    psi, v = x[2], x[3]
    A = np.eye(4)
    A[0, 2] = -dt * v * np.sin(psi)
    A[0, 3] = dt * np.cos(psi)
    A[1, 2] = dt * v * np.cos(psi)
    A[1, 3] = dt * np.sin(psi)
    B = np.zeros((4, 2))
    B[2, 0] = dt
    v_next = v + dt * u[1]
    if V_MIN <= v_next <= V_MAX:
        B[3, 1] = dt
    else:
        A[3, 3] = 0.0
    return A, B


def track_reference(x0, ref, dt: float = DT, horizon: int = TRACK_HORIZON,
                    iters: int = 8) -> np.ndarray:
    """Bounded Gauss-Newton tracking of ``ref`` (``(>=horizon, 4)``); returns controls."""
    x0 = np.asarray(x0, dtype=float)
    ref = np.asarray(ref, dtype=float)[:horizon]
    H = ref.shape[0]
    w_pos, w_psi, w_u = (np.sqrt(TRACK_W_POS), np.sqrt(TRACK_W_HEADING),
                         np.sqrt(TRACK_W_CONTROL))
    U = np.zeros((H, 2))
    lo = np.tile([-OMEGA_MAX, -ACCEL_MAX], H)
    hi = np.tile([OMEGA_MAX, ACCEL_MAX], H)

    def residual(U):
        xs = rollout_array(x0, U, dt)[1:]
        r_pos = w_pos * (xs[:, :2] - ref[:, :2])
        r_psi = w_psi * wrap_angle(xs[:, 2] - ref[:, 2])
        return np.concatenate([r_pos.ravel(), r_psi, w_u * U.ravel()]), xs

    r, xs = residual(U)
    cost = r @ r
    mu = 1e-6
    for _ in range(iters):
        # sensitivities dx_t/dU via forward recursion of the linearization
        J_pos = np.zeros((H, 2, 2 * H))
        J_psi = np.zeros((H, 2 * H))
        S = np.zeros((4, 2 * H))
        x = x0
        for t in range(H):
            A, B = _linearize(x, U[t], dt)
            S = A @ S
            S[:, 2 * t:2 * t + 2] += B
            J_pos[t] = S[:2]
            J_psi[t] = S[2]
            x = xs[t]
        J = np.concatenate([w_pos * J_pos.reshape(2 * H, 2 * H), w_psi * J_psi,
                            w_u * np.eye(2 * H)])
        g = J.T @ r
        Hm = J.T @ J + mu * np.eye(2 * H)
        delta = np.linalg.solve(Hm, -g)
        flat = U.ravel()
        improved = False
        for alpha in (1.0, 0.5, 0.25, 0.125):
            cand = np.clip(flat + alpha * delta, lo, hi).reshape(H, 2)
            r_new, xs_new = residual(cand)
            c_new = r_new @ r_new
            if c_new < cost:
                U, r, xs, cost = cand, r_new, xs_new, c_new
                improved = True
                break
        if not improved or np.max(np.abs(alpha * delta)) < 1e-6:
            break
    return U


def track_mean(strategy, current: AgentState | np.ndarray, dt: float = DT) -> Control:
    """First control of a short-horizon fit to the strategy's weighted mean."""
    w = np.asarray(strategy.weights, dtype=float)
    if w.size == 0 or not np.any(w > 0):
        raise ValueError("degenerate strategy: no positive weights")
    w = w / w.sum()
    mean = mean_states(strategy.samples, w)
    x0 = current.to_array() if isinstance(current, AgentState) else np.asarray(current, float)
    U = track_reference(x0, mean, dt)
    return Control.from_array(clip_controls(U[0]))
