"""Episode records, measurement noise and the line-delimited JSON dataset format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DT, states_from_positions


@dataclass
class EpisodeRecord:
    """One closed-loop trial. ``states`` is ``(T, N, 4)``, clean."""

    trial_id: int
    seed: int
    goals: np.ndarray
    lambdas: np.ndarray
    states: np.ndarray
    dt: float = DT
    plan_times: list = field(default_factory=list)
    game_plan_times: list = field(default_factory=list)
    solver_warnings: int = 0
    failed: bool = False
    policy: str = "lq"
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.goals = np.asarray(self.goals, dtype=float)
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 3 or self.states.shape[1] != len(self.goals):
            raise ValueError(f"states must be (T, N, 4) with N = {len(self.goals)}")

    @property
    def n_agents(self) -> int:
        return self.states.shape[1]

    @property
    def length(self) -> int:
        return self.states.shape[0]

    def noisy_states(self, sigma: float) -> np.ndarray:
        """Noisy copy with a stream fixed by ``(seed, trial_id, sigma)``."""
        if sigma == 0:
            return self.states.copy()
        rng = np.random.default_rng([self.seed, self.trial_id, int(round(sigma * 1e6))])
        per_agent = np.swapaxes(self.states, 0, 1)
        return np.swapaxes(add_noise(per_agent, sigma, rng), 0, 1)


def add_noise(states, sigma: float, rng) -> np.ndarray:
    """Gaussian noise on x, y; heading and speed rebuilt by finite differences.

    ``states`` is ``(..., T, 4)``. The first heading/speed of each sequence
    has no predecessor and keeps the clean value.
    """
    states = np.asarray(states, dtype=float)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return states.copy()
    pos = states[..., :2] + rng.normal(0.0, sigma, size=states[..., :2].shape)
    out = np.empty_like(states)
    out[..., 0, :2] = pos[..., 0, :]
    out[..., 0, 2:] = states[..., 0, 2:]
    if states.shape[-2] > 1:
        out[..., 1:, :] = states_from_positions(pos[..., 1:, :], pos[..., 0, :], DT)
    return out


# ------------------------------------------------------------------ JSONL

def _num(x) -> str:
    return "%.17g" % float(x)


def _arr(a) -> str:
    a = np.asarray(a)
    if a.ndim == 1:
        return "[" + ",".join(_num(x) for x in a) + "]"
    return "[" + ",".join(_arr(r) for r in a) + "]"


def record_line(rec: EpisodeRecord) -> str:
    agents = []
    for i in range(rec.n_agents):
        agents.append('{"goal":%s,"lambda":%s,"states":%s}'
                      % (_arr(rec.goals[i]), _num(rec.lambdas[i]), _arr(rec.states[:, i])))
    return ('{"trial_id":%d,"seed":%d,"dt":%s,"agents":[%s]}'
            % (rec.trial_id, rec.seed, _num(rec.dt), ",".join(agents)))


def save_dataset(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(record_line(rec) + "\n")
    return path


def load_dataset(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                agents = d["agents"]
                states = np.stack([np.asarray(a["states"], dtype=float) for a in agents], axis=1)
                out.append(EpisodeRecord(
                    trial_id=int(d["trial_id"]), seed=int(d["seed"]),
                    goals=[a["goal"] for a in agents], lambdas=[a["lambda"] for a in agents],
                    states=states, dt=float(d["dt"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed trial ({exc})") from None
    return out


def split_trials(records, holdout: float = 0.1, seed: int = 0):
    """Split by trial (not by window) so overlapping windows never leak."""
    n = len(records)
    n_hold = max(1, int(round(holdout * n))) if n > 1 else 0
    order = np.random.default_rng(seed).permutation(n)
    hold = set(order[:n_hold].tolist())
    train = [r for k, r in enumerate(records) if k not in hold]
    test = [r for k, r in enumerate(records) if k in hold]
    return train, test
