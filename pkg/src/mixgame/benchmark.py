"""Circle-crossing benchmark: scenarios, data collection and robot evaluation.

Agent 0 is the robot. The other agents are iLQGames MPC agents that know
each other's true costs and assume ``ROBOT_LAMBDA`` for the robot. Agents
within ``goal_tolerance`` of their goal are frozen and leave the game.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffkit as dk
from .brne import WeightedStrategy, brne_sweeps
from .cvae import CvaeModel, sample_many
from .data import EpisodeRecord
from .dynamics import (DT, Control, clip_controls, states_from_positions, step_array,
                       track_mean)
from .inverse import CostNet, cost_matrices
from .lqgame import AgentSpec, MpcController, combined_cost, reference_points

log = logging.getLogger(__name__)

POLICIES = ("gt", "oracle", "blind", "cvae", "ours")
ROBOT = 0
ROBOT_LAMBDA = 0.5
WAYPOINT_AHEAD = 3.0      # tau1 * dt * preferred speed


@dataclass
class ScenarioConfig:
    n_agents: int = 5
    circle_radius: float = 4.0
    dt: float = DT
    episode_max_steps: int = 300
    lambda_range: tuple = (0.1, 0.9)
    min_separation_deg: float = 15.0
    goal_tolerance: float = 0.4     # above the 0.333 m minimum turning radius
    preferred_speed: float = 1.0


@dataclass
class Scenario:
    initial: np.ndarray     # (N, 4)
    goals: np.ndarray       # (N, 2)
    lambdas: np.ndarray     # (N,)

    @property
    def n_agents(self) -> int:
        return len(self.goals)


@dataclass
class Metrics:
    robot_runtime_cost: float
    min_distance: float
    collided: bool
    mean_plan_time: float


# ------------------------------------------------------------------ scenarios

def generate_scenario(config: ScenarioConfig, rng, max_tries: int = 1000) -> Scenario:
    N = config.n_agents
    sep = np.deg2rad(config.min_separation_deg)
    for _ in range(max_tries):
        ang = rng.uniform(-np.pi, np.pi, size=N)
        diff = np.abs(ang[:, None] - ang[None, :])
        diff = np.minimum(diff, 2 * np.pi - diff)
        np.fill_diagonal(diff, np.inf)
        if diff.min() >= sep:
            break
    else:
        raise RuntimeError(f"no spawn layout with {config.min_separation_deg} deg separation "
                           f"after {max_tries} tries")
    lam = rng.uniform(*config.lambda_range, size=N)
    pos = config.circle_radius * np.column_stack([np.cos(ang), np.sin(ang)])
    goals = -pos
    heading = np.arctan2(goals[:, 1] - pos[:, 1], goals[:, 0] - pos[:, 0])
    initial = np.column_stack([pos, heading, np.full(N, config.preferred_speed)])
    return Scenario(initial, goals, lam)


def scenario_for(config: ScenarioConfig, seed: int, index: int) -> Scenario:
    return generate_scenario(config, np.random.default_rng([seed, index]))


# ------------------------------------------------------------ observations

def observe(state, sigma: float, prev_obs, rng):
    """Noisy observation ``(N, 4)``; heading/speed from the previous observation."""
    if sigma == 0:
        return state.copy()
    pos = state[:, :2] + rng.normal(0.0, sigma, size=(len(state), 2))
    if prev_obs is None:
        return np.column_stack([pos, state[:, 2:]])
    return states_from_positions(pos[:, None, :], prev_obs[:, :2], DT)[:, 0]


def past_window(history: np.ndarray, tau2: int) -> np.ndarray:
    """Last ``tau2`` rows of ``(t+1, ..., 4)``, front-padded with the first row."""
    if len(history) >= tau2:
        return history[-tau2:]
    pad = np.repeat(history[:1], tau2 - len(history), axis=0)
    return np.concatenate([pad, history], axis=0)


def waypoint(position, goal, ahead: float = WAYPOINT_AHEAD):
    d = np.asarray(goal, float) - np.asarray(position, float)[:2]
    dist = float(np.hypot(*d))
    if dist <= ahead:
        return np.asarray(goal, float).copy()
    return np.asarray(position, float)[:2] + d * (ahead / dist)


# ------------------------------------------------------------------ policies

class RobotPolicy:
    name = "base"

    def reset(self, scenario: Scenario):
        pass

    def plan(self, t: int, obs_history: np.ndarray, active: np.ndarray,
             scenario: Scenario, rng) -> np.ndarray:
        raise NotImplementedError


class OraclePolicy(RobotPolicy):
    """iLQGames with the others' lambda resampled from the prior on every replan."""

    name = "oracle"

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.mpc = MpcController(dt=config.dt)

    def reset(self, scenario):
        self.mpc.reset()

    def plan(self, t, obs_history, active, scenario, rng):
        ids = [i for i in range(scenario.n_agents) if active[i]]
        lam = rng.uniform(*self.config.lambda_range, size=scenario.n_agents)
        lam[ROBOT] = ROBOT_LAMBDA
        specs = [AgentSpec(tuple(scenario.goals[i]), float(lam[i])) for i in ids]
        u, _ = self.mpc(ids, specs, obs_history[-1][ids])
        return u[ids.index(ROBOT)]


class BlindPolicy(RobotPolicy):
    """Navigation cost only; with lambda = 1 the robot's problem decouples from the others."""

    name = "blind"

    def __init__(self, config: ScenarioConfig):
        self.mpc = MpcController(dt=config.dt)

    def reset(self, scenario):
        self.mpc.reset()

    def plan(self, t, obs_history, active, scenario, rng):
        spec = AgentSpec(tuple(scenario.goals[ROBOT]), 1.0)
        u, _ = self.mpc([ROBOT], [spec], obs_history[-1][[ROBOT]])
        return u[0]


class SamplingPolicy(RobotPolicy):
    """CVAE-only (``use_game=False``) or the mixed-strategy game planner (``use_game=True``).

    The robot's samples are always drawn first from the step rng, so both
    variants see identical robot samples under a shared seed.
    """

    def __init__(self, cvae: CvaeModel, cost: CostNet | None = None, K: int = 200,
                 use_game: bool = True):
        self.cvae = cvae
        self.cost = cost
        self.K = K
        self.use_game = use_game
        self.name = "ours" if use_game else "cvae"
        self.last_weights = None
        self.last_sweeps = 0

    def contexts(self, obs_history, ids, scenario):
        tau2 = self.cvae.config.tau2
        pasts, betas = [], []
        for i in ids:
            past = past_window(obs_history[:, i], tau2)
            beta = waypoint(past[-1], scenario.goals[i]) if i == ROBOT else scenario.goals[i]
            pasts.append(past)
            betas.append(beta)
        return np.stack(pasts), np.stack(betas)

    def plan(self, t, obs_history, active, scenario, rng):
        ids = [ROBOT] + [i for i in range(scenario.n_agents) if i != ROBOT and active[i]]
        pasts, betas = self.contexts(obs_history, ids, scenario)
        # both variants decode every active agent in one call so the robot's
        # samples are bit-identical between them under a shared rng
        samples = sample_many(self.cvae, pasts, betas, self.K, rng)
        weights = np.full(self.K, 1.0 / self.K)
        if self.use_game and len(ids) > 1:
            # non-finite plans surface as a failed episode, so skip the per-op checks
            g = dk.Graph(record=False, check_finite=False)
            P = None if self.cost is None else self.cost.params
            cfg = None if self.cost is None else self.cost.config
            mats = cost_matrices(P, cfg, g, samples)
            w, report = brne_sweeps(mats, len(ids), self.K, g, trace=False)
            weights = w[0].value
            self.last_sweeps = report.iterations
        self.last_weights = weights
        strat = WeightedStrategy(samples[0], weights)
        return track_mean(strat, obs_history[-1][ROBOT], self.cvae.config.dt).to_array()


def ours_policy(cvae, cost_net, obs_history, scenario, active=None, K: int = 200, rng=None):
    """One planning call of the game-theoretic robot; returns its ``Control``."""
    obs_history = np.asarray(obs_history, dtype=float)
    if active is None:
        active = np.ones(scenario.n_agents, dtype=bool)
    rng = rng if rng is not None else np.random.default_rng(0)
    u = SamplingPolicy(cvae, cost_net, K, True).plan(len(obs_history) - 1, obs_history,
                                                      active, scenario, rng)
    return Control.from_array(u)


def make_policy(name: str, config: ScenarioConfig, cvae=None, cost=None, K: int = 200):
    if name == "oracle":
        return OraclePolicy(config)
    if name == "blind":
        return BlindPolicy(config)
    if name in ("cvae", "ours"):
        if cvae is None:
            raise ValueError(f"policy {name!r} needs a CVAE model")
        if name == "ours" and cost is None:
            raise ValueError("policy 'ours' needs a cost net")
        return SamplingPolicy(cvae, cost if name == "ours" else None, K, name == "ours")
    if name == "gt":
        return None
    raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICIES)}")


# ----------------------------------------------------------------- simulation

def run_episode(policy: RobotPolicy | None, scenario: Scenario, config: ScenarioConfig,
                noise_sigma: float = 0.0, seed: int = 0, trial_id: int = 0,
                policy_name: str | None = None) -> EpisodeRecord:
    """Closed-loop rollout. ``policy=None`` makes the robot a fifth LQ agent (GT / data)."""
    N = scenario.n_agents
    lam = scenario.lambdas
    goals = scenario.goals
    x = scenario.initial.copy()
    states = [x.copy()]
    noise_rng = np.random.default_rng([seed, trial_id, 2])
    obs = [observe(x, noise_sigma, None, noise_rng)]
    obs[0][ROBOT] = x[ROBOT]
    game = MpcController(dt=config.dt)
    if policy is not None:
        policy.reset(scenario)
    plan_times, game_times = [], []
    warnings, failed = 0, False
    for t in range(config.episode_max_steps):
        active = np.hypot(*(x[:, :2] - goals).T) > config.goal_tolerance
        if not active.any():
            break
        u = np.zeros((N, 2))
        if policy is None:
            ids = [i for i in range(N) if active[i]]
            specs = [AgentSpec(tuple(goals[i]), float(lam[i])) for i in ids]
            t0 = time.perf_counter()
            ug, sol = game(ids, specs, x[ids])
            game_times.append(time.perf_counter() - t0)
            plan_times.append(game_times[-1])
            u[ids] = ug
            warnings += int(sol.warning)
        else:
            ids = [i for i in range(N) if active[i]]
            game_ids = [i for i in ids if i != ROBOT]
            if game_ids:
                # the robot stays in the others' game while active, with the assumed lambda
                ids_g = ids
                specs = [AgentSpec(tuple(goals[i]),
                                   ROBOT_LAMBDA if i == ROBOT else float(lam[i])) for i in ids_g]
                t0 = time.perf_counter()
                ug, sol = game(ids_g, specs, x[ids_g])
                game_times.append(time.perf_counter() - t0)
                warnings += int(sol.warning)
                for k, i in enumerate(ids_g):
                    if i != ROBOT:
                        u[i] = ug[k]
            if active[ROBOT]:
                rng = np.random.default_rng([seed, trial_id, t, 1])
                t0 = time.perf_counter()
                u[ROBOT] = policy.plan(t, np.stack(obs), active, scenario, rng)
                plan_times.append(time.perf_counter() - t0)
        u = clip_controls(u)
        nxt = step_array(x, u, config.dt)
        x = np.where(active[:, None], nxt, x)
        if not np.all(np.isfinite(x)):
            failed = True
            log.warning("episode %d aborted: non-finite state at step %d", trial_id, t)
            break
        states.append(x.copy())
        o = observe(x, noise_sigma, obs[-1], noise_rng)
        o[ROBOT] = x[ROBOT]
        obs.append(o)
    return EpisodeRecord(trial_id=trial_id, seed=seed, goals=goals, lambdas=lam,
                         states=np.stack(states), dt=config.dt, plan_times=plan_times,
                         game_plan_times=game_times, solver_warnings=warnings, failed=failed,
                         policy=policy_name or (policy.name if policy else "gt"),
                         noise_sigma=noise_sigma)


def collect_dataset(n_trials: int, config: ScenarioConfig, seed: int, workers: int = 1) -> list:
    """All agents LQ-controlled with their true costs; trial ``k`` uses scenario ``(seed, k)``."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    jobs = [(None, None, k, config, 0.0, seed) for k in range(n_trials)]
    return _map(_episode_job, jobs, workers)


# -------------------------------------------------------------------- metrics

def pairwise_min_distance(states: np.ndarray) -> float:
    """Minimum distance between any two agents over a ``(T, N, 4)`` record."""
    p = states[:, :, :2]
    d = np.hypot(*(p[:, :, None] - p[:, None, :]).transpose(3, 0, 1, 2))
    N = p.shape[1]
    d[:, np.arange(N), np.arange(N)] = np.inf
    return float(d.min())


def robot_distances(states: np.ndarray) -> np.ndarray:
    """Robot-to-agent distances ``(T, N-1)``."""
    p = states[:, :, :2]
    return np.hypot(*(p[:, 1:] - p[:, :1]).transpose(2, 0, 1))


def compute_metrics(record: EpisodeRecord, collision_threshold: float,
                    tolerance: float = 0.4) -> Metrics:
    s = record.states
    goals = record.goals
    T = s.shape[0]
    robot_active = np.hypot(*(s[:, ROBOT, :2] - goals[ROBOT]).T) > tolerance
    # distances while the robot is still moving, plus its final arrival state
    upto = int(np.argmin(robot_active)) if not robot_active.all() else T - 1
    dist = robot_distances(s[:upto + 1])
    min_d = float(dist.min())
    lam = np.full(s.shape[1], ROBOT_LAMBDA)
    costs = []
    for t in range(1, T):
        if not robot_active[t - 1]:
            break
        act = np.hypot(*(s[t - 1, :, :2] - goals).T) > tolerance
        idx = [ROBOT] + [i for i in range(1, s.shape[1]) if act[i]]
        ref = reference_points(s[t - 1, ROBOT], goals[ROBOT], 1, record.dt)[1]
        refs = [ref] + [s[t, i, :2] for i in idx[1:]]
        costs.append(float(combined_cost(s[t, idx], refs, lam[idx])[0]))
    mean_cost = float(np.mean(costs)) if costs else 0.0
    mpt = float(np.mean(record.plan_times)) if record.plan_times else 0.0
    return Metrics(mean_cost, min_d, bool(min_d < collision_threshold), mpt)


def calibrate_threshold(records) -> float:
    """Smallest inter-agent distance seen in all-LQ (GT) episodes."""
    return min(pairwise_min_distance(r.states) for r in records)


# ----------------------------------------------------------------- evaluation

@dataclass
class EvalModels:
    cvae: CvaeModel | None = None
    cost: CostNet | None = None
    noisy_cvae: dict = field(default_factory=dict)   # sigma -> model trained on noisy pasts
    K: int = 200

    def cvae_for(self, sigma: float):
        return self.noisy_cvae.get(sigma, self.cvae)


def _episode_job(args):
    name, models, index, config, sigma, seed = args
    scenario = scenario_for(config, seed, index)
    if name is None or name == "gt":
        policy = None
    else:
        policy = make_policy(name, config, models.cvae_for(sigma), models.cost, models.K)
    return run_episode(policy, scenario, config, sigma, seed, index,
                       policy_name=name or "lq")


def _map(fn, jobs, workers):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))       # map keeps submission order


def run_policy_episodes(name: str, episodes: int, config: ScenarioConfig, models: EvalModels,
                        sigma: float = 0.0, seed: int = 0, workers: int = 1) -> list:
    if name not in POLICIES:
        raise ValueError(f"unknown policy {name!r}")
    jobs = [(name, models, k, config, sigma, seed) for k in range(episodes)]
    return _map(_episode_job, jobs, workers)


RESULT_COLUMNS = ("policy", "episode", "seed", "noise_sigma", "robot_runtime_cost",
                  "min_distance", "collided", "mean_plan_time")


def result_row(record: EpisodeRecord, metrics: Metrics, timing: bool = True) -> dict:
    return {"policy": record.policy, "episode": record.trial_id, "seed": record.seed,
            "noise_sigma": record.noise_sigma, "robot_runtime_cost": metrics.robot_runtime_cost,
            "min_distance": metrics.min_distance, "collided": int(metrics.collided),
            "mean_plan_time": metrics.mean_plan_time if timing else float("nan")}


def _fmt(v):
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])
    return buf.getvalue()


def read_results(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({"policy": r["policy"], "episode": int(r["episode"]), "seed": int(r["seed"]),
                    "noise_sigma": float(r["noise_sigma"]),
                    "robot_runtime_cost": float(r["robot_runtime_cost"]),
                    "min_distance": float(r["min_distance"]), "collided": int(r["collided"]),
                    "mean_plan_time": float(r["mean_plan_time"])})
    return out


def quartiles(values) -> dict:
    """Median and quartiles with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"q1": float(q1), "median": float(med), "q3": float(q3),
            "min": float(v.min()), "max": float(v.max())}


def group_key(row) -> str:
    s = row["noise_sigma"]
    return row["policy"] if s == 0 else f"{row['policy']}@{s:g}"


def summarize(rows) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(group_key(r), []).append(r)
    out = {}
    for key in sorted(groups):
        g = groups[key]
        times = [r["mean_plan_time"] for r in g]
        out[key] = {
            "episodes": len(g),
            "collision_rate": sum(r["collided"] for r in g) / len(g),
            "robot_runtime_cost": quartiles([r["robot_runtime_cost"] for r in g]),
            "min_distance": quartiles([r["min_distance"] for r in g]),
            "mean_plan_time": None if any(np.isnan(times)) else float(np.mean(times)),
        }
    return out


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=1, sort_keys=True) + "\n"


def config_dict(config: ScenarioConfig) -> dict:
    d = asdict(config)
    d["lambda_range"] = list(d["lambda_range"])
    return d
