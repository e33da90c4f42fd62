"""Conditional VAE over future trajectories: the nominal mixed strategy.

Conditioning is the last ``tau2`` observed states plus a task waypoint
``beta``. Everything is expressed in an agent-centric frame: origin at the
last observed position, +x pointing at ``beta`` (falling back to the last
heading when ``beta`` coincides with the position). Decoded outputs are
per-step displacements in units of ``LENGTH_SCALE``; the reconstruction
likelihood is a unit-variance Gaussian in those units.

Architecture (H = hidden width, Z = latent size)::

    encoder:  GRU over past+future -> [h, beta] -> 3 x dense(H, tanh) -> (mu, logvar)
    context:  GRU over past -> h_c
    decoder:  [z, h_c, beta] -> 3 x dense(H, tanh) -> h0 -> GRU x tau1 -> displacement
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import diffkit as dk
from .dynamics import DT, Trajectory, states_from_positions

log = logging.getLogger(__name__)

TAU1, TAU2 = 30, 10
LENGTH_SCALE = 0.1      # metres per decoder output unit
BETA_SCALE = 4.0        # metres; waypoint input normalization
IN_DIM = 4              # canonical x, y, vx, vy


@dataclass
class CvaeConfig:
    hidden: int = 256
    latent: int = 4
    tau1: int = TAU1
    tau2: int = TAU2
    dt: float = DT
    n_dense: int = 3


@dataclass
class ConditioningContext:
    past: np.ndarray        # (tau2, 4)
    beta: np.ndarray        # (2,)

    def __post_init__(self):
        self.past = np.asarray(self.past, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float).reshape(2)
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta must be finite")


@dataclass
class CvaeModel:
    config: CvaeConfig
    params: dict = field(default_factory=dict)

    def save(self, path):
        return checkpoint.save(path, self.params, {"kind": "cvae", **asdict(self.config)})

    @classmethod
    def load(cls, path) -> "CvaeModel":
        params, meta = checkpoint.load(path)
        if meta.get("kind") != "cvae":
            raise checkpoint.CheckpointError("checkpoint is not a CVAE")
        cfg = CvaeConfig(**{k: meta[k] for k in CvaeConfig.__dataclass_fields__})
        return cls(cfg, params)


# ------------------------------------------------------------------ init

def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _gru_params(rng, prefix, in_dim, H):
    return {
        f"{prefix}.w_ih": _glorot(rng, in_dim, 3 * H),
        f"{prefix}.w_hh": np.concatenate([_glorot(rng, H, H) for _ in range(3)], axis=1),
        f"{prefix}.b_ih": np.zeros(3 * H),
        f"{prefix}.b_hh": np.zeros(3 * H),
    }


def _mlp_params(rng, prefix, dims):
    p = {}
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        p[f"{prefix}.{k}.w"] = _glorot(rng, a, b)
        p[f"{prefix}.{k}.b"] = np.zeros(b)
    return p


def init_cvae(config: CvaeConfig | None = None, seed: int = 0) -> CvaeModel:
    cfg = config or CvaeConfig()
    rng = np.random.default_rng(seed)
    H, Z = cfg.hidden, cfg.latent
    p = {}
    p.update(_gru_params(rng, "enc.gru", IN_DIM, H))
    p.update(_mlp_params(rng, "enc.mlp", [H + 2] + [H] * cfg.n_dense))
    p["enc.head.w"] = np.zeros((H, 2 * Z))
    p["enc.head.b"] = np.zeros(2 * Z)
    p.update(_gru_params(rng, "ctx.gru", IN_DIM, H))
    p.update(_mlp_params(rng, "dec.mlp", [Z + H + 2] + [H] * cfg.n_dense))
    p.update(_mlp_params(rng, "dec.h0", [H, H]))
    p.update(_gru_params(rng, "dec.gru", 2, H))
    p["dec.out.w"] = _glorot(rng, H, 2) * 0.1
    p["dec.out.b"] = np.array([1.0, 0.0])
    return CvaeModel(cfg, p)


# ------------------------------------------------------------- canonical frame

def canonical_frame(past, beta):
    """Origin ``(..., 2)`` and heading ``(...)`` of the agent-centric frame."""
    past = np.asarray(past, dtype=float)
    beta = np.asarray(beta, dtype=float)
    origin = past[..., -1, :2]
    d = beta - origin
    dist = np.hypot(d[..., 0], d[..., 1])
    heading = np.where(dist > 1e-6, np.arctan2(d[..., 1], d[..., 0]), past[..., -1, 2])
    return origin, heading


def _rotate(xy, c, s):
    """Rotate ``(..., T, 2)`` by angle with cosine ``c`` / sine ``s`` of shape ``(...)``."""
    c, s = c[..., None], s[..., None]
    return np.stack([c * xy[..., 0] - s * xy[..., 1], s * xy[..., 0] + c * xy[..., 1]], -1)


def _features(states, origin, heading):
    """Canonical ``[x, y, vx, vy]`` of world states ``(..., T, 4)``."""
    c, s = np.cos(-heading), np.sin(-heading)
    pos = _rotate(states[..., :2] - origin[..., None, :], c, s)
    rel = states[..., 2] - heading[..., None]
    vel = states[..., 3:4] * np.stack([np.cos(rel), np.sin(rel)], -1)
    return np.concatenate([pos, vel], axis=-1)


def prepare_batch(pasts, betas, futures=None):
    """Canonicalize a batch. Returns a dict of numpy inputs for the networks."""
    pasts = np.asarray(pasts, dtype=float)
    betas = np.asarray(betas, dtype=float)
    origin, heading = canonical_frame(pasts, betas)
    c, s = np.cos(-heading), np.sin(-heading)
    beta_c = _rotate((betas - origin)[..., None, :], c, s)[..., 0, :]
    past_f = _features(pasts, origin, heading)
    last_disp = past_f[..., -1, :2] - past_f[..., -2, :2] if pasts.shape[-2] > 1 \
        else np.zeros(past_f.shape[:-2] + (2,))
    out = {"origin": origin, "heading": heading, "beta": beta_c / BETA_SCALE,
           "past": past_f, "last_disp": last_disp / LENGTH_SCALE}
    if futures is not None:
        fut_f = _features(np.asarray(futures, dtype=float), origin, heading)
        out["future"] = fut_f
        out["target"] = fut_f[..., :2] / LENGTH_SCALE
    return out


# ------------------------------------------------------------------- networks

def _gru(P, prefix, xs, h0=None):
    """Run a GRU over ``xs`` Tensor ``(B, L, in)``; returns the final hidden state."""
    w_ih, w_hh = P[f"{prefix}.w_ih"], P[f"{prefix}.w_hh"]
    b_ih, b_hh = P[f"{prefix}.b_ih"], P[f"{prefix}.b_hh"]
    B, L, _ = xs.shape
    H = w_hh.shape[0]
    gx = xs @ w_ih + b_ih                                # (B, L, 3H)
    h = h0
    for t in range(L):
        gxt = gx[:, t]
        h = _gru_cell(gxt, h, w_hh, b_hh, H, B)
    return h


def _gru_cell(gx, h, w_hh, b_hh, H, B):
    if h is None:
        h = gx.graph.const(np.zeros((B, H)))
    gh = h @ w_hh + b_hh
    rz = dk.sigmoid(gx[:, :2 * H] + gh[:, :2 * H])
    r, z = rz[:, :H], rz[:, H:]
    n = dk.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
    return n + z * (h - n)


def _mlp(P, prefix, x, n_layers, final_act=True):
    for k in range(n_layers):
        x = x @ P[f"{prefix}.{k}.w"] + P[f"{prefix}.{k}.b"]
        if final_act or k < n_layers - 1:
            x = dk.tanh(x)
    return x


def encode_tensor(P, cfg: CvaeConfig, g: dk.Graph, batch):
    seq = np.concatenate([batch["past"], batch["future"]], axis=1)
    h = _gru(P, "enc.gru", g.const(seq))
    x = dk.concat([h, g.const(batch["beta"])], axis=-1)
    x = _mlp(P, "enc.mlp", x, cfg.n_dense)
    out = x @ P["enc.head.w"] + P["enc.head.b"]
    Z = cfg.latent
    return out[:, :Z], out[:, Z:]


def decode_tensor(P, cfg: CvaeConfig, g: dk.Graph, batch, z, rows=None):
    """Decoder: latent Tensor ``(B, Z)`` -> canonical positions ``(B, tau1, 2)`` in units.

    ``rows`` (length B) maps each latent to a context row of ``batch``, so a
    context shared by many samples is encoded once.
    """
    B = z.shape[0]
    h_c = _gru(P, "ctx.gru", g.const(batch["past"]))
    beta, last_disp = batch["beta"], batch["last_disp"]
    if rows is not None:
        h_c = h_c[rows]
        beta, last_disp = beta[rows], last_disp[rows]
    x = dk.concat([z, h_c, g.const(beta)], axis=-1)
    x = _mlp(P, "dec.mlp", x, cfg.n_dense)
    h = dk.tanh(x @ P["dec.h0.0.w"] + P["dec.h0.0.b"])
    w_ih, w_hh = P["dec.gru.w_ih"], P["dec.gru.w_hh"]
    b_ih, b_hh = P["dec.gru.b_ih"], P["dec.gru.b_hh"]
    H = w_hh.shape[0]
    inp = g.const(last_disp)
    pos = None
    positions = []
    for _ in range(cfg.tau1):
        h = _gru_cell(inp @ w_ih + b_ih, h, w_hh, b_hh, H, B)
        disp = h @ P["dec.out.w"] + P["dec.out.b"]
        pos = disp if pos is None else pos + disp
        positions.append(pos.reshape(B, 1, 2))
        inp = disp
    return dk.concat(positions, axis=1)


def _to_world(canon_units, origin, heading, dt):
    pos = _rotate(canon_units * LENGTH_SCALE, np.cos(heading), np.sin(heading))
    pos = pos + origin[..., None, :]
    return states_from_positions(pos, origin, dt)


def kl_standard_normal(mu, logvar):
    """Per-row ``KL(N(mu, exp(logvar)) || N(0, I))`` as a Tensor ``(B,)``."""
    return 0.5 * (mu * mu + dk.exp(logvar) - 1.0 - logvar).sum(axis=-1)


def elbo_tensor(P, cfg, g, batch, eps=None):
    """Mean negative ELBO over the batch; ``eps=None`` decodes the posterior mean."""
    mu, logvar = encode_tensor(P, cfg, g, batch)
    z = mu if eps is None else mu + dk.exp(0.5 * logvar) * eps
    pos = decode_tensor(P, cfg, g, batch, z)
    err = pos - batch["target"]
    recon = 0.5 * (err * err).sum(axis=(1, 2))
    kl = kl_standard_normal(mu, logvar)
    return (recon + kl).mean(), recon, kl


# ------------------------------------------------------------------ public API

def _check_lengths(cfg, past=None, future=None):
    if past is not None and past.shape[-2] != cfg.tau2:
        raise ValueError(f"past must have {cfg.tau2} states, got {past.shape[-2]}")
    if future is not None and future.shape[-2] != cfg.tau1:
        raise ValueError(f"future must have {cfg.tau1} states, got {future.shape[-2]}")


def _states(x):
    return x.states if isinstance(x, Trajectory) else np.asarray(x, dtype=float)


def encode(model: CvaeModel, future, context: ConditioningContext):
    """Posterior ``(mu, logvar)``, each of shape ``(latent,)``."""
    fut = _states(future)
    _check_lengths(model.config, context.past, fut)
    batch = prepare_batch(context.past[None], context.beta[None], fut[None])
    g = dk.Graph(record=False)
    mu, logvar = encode_tensor(model.params, model.config, g, batch)
    return mu.value[0].copy(), logvar.value[0].copy()


def decode_batch(model: CvaeModel, pasts, betas, z, rows=None) -> np.ndarray:
    """Decode latents ``(B, Z)`` to world states ``(B, tau1, 4)``.

    Contexts are ``pasts (M, tau2, 4)`` and ``betas (M, 2)``; latent ``b`` uses
    context ``rows[b]`` (``M == B`` and the identity when ``rows`` is None).
    """
    cfg = model.config
    pasts = np.asarray(pasts, dtype=float)
    _check_lengths(cfg, pasts)
    batch = prepare_batch(pasts, betas)
    g = dk.Graph(record=False, check_finite=False)
    pos = decode_tensor(model.params, cfg, g, batch, g.const(np.asarray(z, dtype=float)), rows)
    origin, heading = batch["origin"], batch["heading"]
    if rows is not None:
        origin, heading = origin[rows], heading[rows]
    return _to_world(pos.value, origin, heading, cfg.dt)


def decode(model: CvaeModel, z, context: ConditioningContext) -> Trajectory:
    z = np.asarray(z, dtype=float).reshape(1, -1)
    if not np.all(np.isfinite(z)):
        raise ValueError("latent must be finite")
    states = decode_batch(model, context.past[None], context.beta[None], z)[0]
    return Trajectory(states, model.config.dt, generated=True)


def elbo_loss(model: CvaeModel, future, context: ConditioningContext, rng=None) -> float:
    fut = _states(future)
    _check_lengths(model.config, context.past, fut)
    batch = prepare_batch(context.past[None], context.beta[None], fut[None])
    g = dk.Graph(record=False)
    eps = None if rng is None else rng.standard_normal((1, model.config.latent))
    loss, _, _ = elbo_tensor(model.params, model.config, g, batch, eps)
    return float(loss.value)


def sample_many(model: CvaeModel, pasts, betas, K: int, rng) -> np.ndarray:
    """``K`` nominal samples for each of ``M`` contexts: ``(M, K, tau1, 4)``.

    Latents are drawn in context order, so the first context's samples do not
    depend on how many contexts follow it.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    pasts = np.asarray(pasts, dtype=float)
    betas = np.asarray(betas, dtype=float)
    M = pasts.shape[0]
    z = rng.standard_normal((M, K, model.config.latent))
    out = decode_batch(model, pasts, betas, z.reshape(M * K, -1), np.repeat(np.arange(M), K))
    return out.reshape(M, K, model.config.tau1, 4)


def sample_nominal(model: CvaeModel, context: ConditioningContext, K: int, rng) -> list:
    arr = sample_many(model, context.past[None], context.beta[None], K, rng)[0]
    return [Trajectory(s, model.config.dt, generated=True) for s in arr]


# -------------------------------------------------------------------- training

@dataclass
class CvaeTrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0


def train_cvae(pasts, futures, betas, model: CvaeModel | None = None,
               train_cfg: CvaeTrainConfig | None = None, model_cfg: CvaeConfig | None = None,
               callback=None):
    """Fit by minibatch Adam on the mean negative ELBO over per-agent windows.

    Inputs are stacked per-agent windows: ``pasts (W, tau2, 4)``,
    ``futures (W, tau1, 4)``, ``betas (W, 2)``. Returns ``(model, epoch_losses)``.
    """
    tc = train_cfg or CvaeTrainConfig()
    pasts = np.asarray(pasts, dtype=float)
    futures = np.asarray(futures, dtype=float)
    betas = np.asarray(betas, dtype=float)
    W = pasts.shape[0]
    if W == 0:
        raise ValueError("empty dataset")
    if model is None:
        model = init_cvae(model_cfg, seed=tc.seed)
    cfg = model.config
    _check_lengths(cfg, pasts, futures)
    data = prepare_batch(pasts, betas, futures)
    rng = np.random.default_rng(tc.seed + 1)
    params = {k: v.copy() for k, v in model.params.items()}
    state = dk.AdamState.zeros_like(params)
    history = []
    for epoch in range(tc.epochs):
        order = rng.permutation(W)
        total = 0.0
        for start in range(0, W, tc.batch_size):
            idx = order[start:start + tc.batch_size]
            batch = {k: v[idx] for k, v in data.items()}
            eps = rng.standard_normal((len(idx), cfg.latent))
            g = dk.Graph()
            P = g.params(params)
            loss, _, _ = elbo_tensor(P, cfg, g, batch, eps)
            grads = dk.grads_by_name(g, dk.backward(g, loss))
            params, state = dk.adam_step(params, grads, state, tc.lr)
            total += float(loss.value) * len(idx)
        history.append(total / W)
        log.info("cvae epoch %d loss %.4f", epoch + 1, history[-1])
        if callback is not None:
            callback(epoch, history[-1], CvaeModel(cfg, params))
    return CvaeModel(cfg, params), history


def dataset_loss(model: CvaeModel, pasts, futures, betas, batch_size: int = 256) -> float:
    """Mean negative ELBO decoded at the posterior mean (deterministic)."""
    data = prepare_batch(pasts, betas, futures)
    W = len(pasts)
    total = 0.0
    for start in range(0, W, batch_size):
        batch = {k: v[start:start + batch_size] for k, v in data.items()}
        g = dk.Graph(record=False)
        loss, _, _ = elbo_tensor(model.params, model.config, g, batch, None)
        total += float(loss.value) * len(batch["past"])
    return total / W
