"""Inverse game: learn the pairwise cost ``l_theta`` from windowed demonstrations.

For a window, every agent's nominal samples come from the frozen CVAE; the
cost net fills the pairwise cost matrices, a fixed number of BRNE sweeps is
unrolled on the tape, and the loss is the equilibrium-weighted squared
position error to the demonstrated futures::

    loss = sum_i sum_k w_ik * || sbar_i - s_ik ||^2

Windows are processed in batches: the solver and the net broadcast over a
leading window axis, so one graph covers a whole chunk.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import diffkit as dk
from .brne import brne_sweeps
from .cvae import CvaeModel, sample_many

log = logging.getLogger(__name__)

TRAIN_SWEEPS = 3
DISPLACEMENT_SCALE = 2.0    # metres
PROXIMITY_WIDTH2 = 0.5      # squared metres; kernel exp(-d^2 / width2)


# ------------------------------------------------------------------- features

def _components(x):
    """Contiguous ``(x, y, vx, vy)`` arrays of states ``(..., 4)``."""
    return (np.ascontiguousarray(x[..., 0]), np.ascontiguousarray(x[..., 1]),
            x[..., 3] * np.cos(x[..., 2]), x[..., 3] * np.sin(x[..., 2]))


def _blocks(ca, cb):
    ax, ay, avx, avy = ca
    bx, by, bvx, bvy = cb
    dx = ax - bx
    dy = ay - by
    dist = np.sqrt(dx * dx + dy * dy)
    radial = dx * (avx - bvx) + dy * (avy - bvy)
    ok = dist > 1e-12
    closing = np.where(ok, -radial / np.where(ok, dist, 1.0), 0.0)
    return dx, dy, dist, closing


def _pair_blocks(a, b):
    """Per-step ``(dx, dy, distance, closing speed)`` of ``a`` relative to ``b``."""
    return _blocks(_components(a), _components(b))


def pair_features(a, b) -> np.ndarray:
    """Feature vector ``[dx_1..T, dy_1..T, dist_1..T, closing_1..T]`` (broadcasts)."""
    a = getattr(a, "states", a)
    b = getattr(b, "states", b)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-2] != b.shape[-2]:
        raise ValueError(f"trajectory lengths differ: {a.shape[-2]} vs {b.shape[-2]}")
    return np.concatenate(_pair_blocks(a, b), axis=-1)


def swap_features(f: np.ndarray) -> np.ndarray:
    """Features of ``(b, a)`` from those of ``(a, b)``: displacement flips sign."""
    T = f.shape[-1] // 4
    out = f.copy()
    out[..., :2 * T] *= -1.0
    return out


# ------------------------------------------------------------------- cost net

@dataclass
class CostNetConfig:
    width: int = 256
    depth: int = 3
    tau1: int = 30


@dataclass
class CostNet:
    """``l(a, b) = (g(f(a, b)) + g(f(b, a))) / 2`` with ``g`` a softplus-headed MLP."""

    config: CostNetConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: CostNetConfig | None = None, seed: int = 0) -> "CostNet":
        cfg = config or CostNetConfig()
        rng = np.random.default_rng(seed)
        dims = [4 * cfg.tau1] + [cfg.width] * cfg.depth
        p = {}
        for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            lim = np.sqrt(6.0 / (a + b))
            p[f"l{k}.w"] = rng.uniform(-lim, lim, size=(a, b))
            p[f"l{k}.b"] = np.zeros(b)
        p["out.w"] = rng.normal(0.0, 0.01, size=(cfg.width, 1))
        p["out.b"] = np.array([-2.0])
        return cls(cfg, p)

    def save(self, path):
        return checkpoint.save(path, self.params, {"kind": "cost", **asdict(self.config)})

    @classmethod
    def load(cls, path) -> "CostNet":
        params, meta = checkpoint.load(path)
        if meta.get("kind") != "cost":
            raise checkpoint.CheckpointError("checkpoint is not a cost net")
        cfg = CostNetConfig(**{k: meta[k] for k in CostNetConfig.__dataclass_fields__})
        return cls(cfg, params)

    def __call__(self, a, b) -> float:
        """Plain numeric evaluation for one trajectory pair."""
        g = dk.Graph(record=False)
        f = pair_features(a, b)
        return float(cost_tensor(self.params, self.config, g, f[None])[0].value)


def normalize_features(feats: np.ndarray, tau1: int) -> np.ndarray:
    """Fixed input map inside the net: displacement scaled, distance turned into a
    proximity kernel, closing speed gated by proximity. Far-apart pairs map to
    near-zero interaction inputs."""
    T = tau1
    prox = np.exp(-feats[..., 2 * T:3 * T] ** 2 / PROXIMITY_WIDTH2)
    return np.concatenate([feats[..., :2 * T] / DISPLACEMENT_SCALE, prox,
                           feats[..., 3 * T:] * prox], axis=-1)


def _g(P, cfg, x):
    return _g_tail(P, cfg, dk.tanh(x @ P["l0.w"] + P["l0.b"]))


def _g_tail(P, cfg, h):
    """Everything after the first hidden layer."""
    for k in range(1, cfg.depth):
        h = dk.tanh(h @ P[f"l{k}.w"] + P[f"l{k}.b"])
    out = dk.softplus(h @ P["out.w"] + P["out.b"])
    return out.reshape(out.shape[:-1])


def cost_tensor(P, cfg: CostNetConfig, g: dk.Graph, feats: np.ndarray):
    """Symmetrized cost for a ``(..., 4*tau1)`` feature array; returns ``(...)``."""
    if feats.shape[-1] != 4 * cfg.tau1:
        raise ValueError(f"expected {4 * cfg.tau1} features, got {feats.shape[-1]}")
    both = np.stack([normalize_features(feats, cfg.tau1),
                     normalize_features(swap_features(feats), cfg.tau1)])
    out = _g(P, cfg, g.const(both))
    return 0.5 * (out[0] + out[1])


def cost_matrices(P, cfg: CostNetConfig | None, g: dk.Graph, samples: np.ndarray) -> dict:
    """Pairwise matrices for samples ``(..., N, K, T, 4)``; ``P=None`` is the zero cost.

    All unordered pairs go through the net in one batched call. Returns
    ``{(i, j): Tensor (..., K, K)}`` with ``M[(j, i)] = M[(i, j)]^T``.
    """
    N, K = samples.shape[-4], samples.shape[-3]
    lead = samples.shape[:-4]
    pairs = [(i, j) for i in range(N) for j in range(i + 1, N)]
    mats = {}
    if not pairs:
        return mats
    if P is None:
        zero = g.const(np.zeros(lead + (K, K)))
        for i, j in pairs:
            mats[(i, j)] = zero
            mats[(j, i)] = zero
        return mats
    ii = [i for i, _ in pairs]
    jj = [j for _, j in pairs]
    allm = _pair_costs(P, cfg, g, samples, ii, jj)          # (..., n_pairs, K, K)
    for p, (i, j) in enumerate(pairs):
        m = allm[(Ellipsis, p, slice(None), slice(None))]
        mats[(i, j)] = m
        mats[(j, i)] = dk.transpose(m)
    return mats


def _pair_costs(P, cfg, g, samples, ii, jj):
    """``cost_tensor`` on every sample pair of agents ``ii[p]``, ``jj[p]``, computed smartly.

    The displacement inputs enter the first layer linearly, so their
    contribution is computed once per sample and differenced per pair; the
    swapped orientation only flips its sign. Equal to ``cost_tensor`` on
    ``pair_features`` up to rounding.
    """
    T = cfg.tau1
    if samples.shape[-2] != T:
        raise ValueError(f"expected trajectories of {T} states, got {samples.shape[-2]}")
    lead = samples.shape[:-4]
    K = samples.shape[-3]
    n = len(ii)
    w0 = P["l0.w"]
    w_disp, w_rest = w0[:2 * T], w0[2 * T:]
    flat = np.concatenate([samples[..., 0], samples[..., 1]], axis=-1) / DISPLACEMENT_SCALE
    hs = g.const(flat) @ w_disp                                 # (..., N, K, W)
    width = hs.shape[-1]
    ha = hs[(Ellipsis, ii, slice(None), slice(None))].reshape(lead + (n, K, 1, width))
    hb = hs[(Ellipsis, jj, slice(None), slice(None))].reshape(lead + (n, 1, K, width))
    h_disp = ha - hb
    comps = _components(samples)                                # each (..., N, K, T)
    _, _, dist, closing = _blocks([c[..., ii, :, None, :] for c in comps],
                                  [c[..., jj, None, :, :] for c in comps])
    prox = np.exp(-dist ** 2 / PROXIMITY_WIDTH2)
    h_rest = g.const(np.concatenate([prox, closing * prox], axis=-1)) @ w_rest + P["l0.b"]
    fwd = _g_tail(P, cfg, dk.tanh(h_rest + h_disp))
    rev = _g_tail(P, cfg, dk.tanh(h_rest - h_disp))
    return 0.5 * (fwd + rev)


# -------------------------------------------------------------------- windows

@dataclass
class DataWindow:
    past: np.ndarray        # (N, tau2, 4), possibly noisy
    future: np.ndarray      # (N, tau1, 4), clean
    beta: np.ndarray        # (N, 2)

    def __post_init__(self):
        if not (self.past.shape[0] == self.future.shape[0] == self.beta.shape[0]):
            raise ValueError("every agent needs a past, a future and a beta")


def window_dataset(trials, tau1: int = 30, tau2: int = 10, stride: int = 1,
                   noise_sigma: float = 0.0):
    """Slide a ``tau2 + tau1`` window over each trial. Returns ``(windows, n_skipped)``.

    Pasts come from the noisy observation stream when ``noise_sigma > 0``;
    futures are always the clean states.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    span = tau1 + tau2
    windows, skipped = [], 0
    for rec in trials:
        clean = rec.states
        if clean.shape[0] < span:
            skipped += 1
            continue
        obs = rec.noisy_states(noise_sigma) if noise_sigma > 0 else clean
        for s in range(0, clean.shape[0] - span + 1, stride):
            windows.append(DataWindow(
                past=np.swapaxes(obs[s:s + tau2], 0, 1).copy(),
                future=np.swapaxes(clean[s + tau2:s + span], 0, 1).copy(),
                beta=rec.goals.copy()))
    if skipped:
        log.info("skipped %d trials shorter than %d steps", skipped, span)
    return windows, skipped


def agent_windows(windows):
    """Flatten joint windows into per-agent ``(pasts, futures, betas)`` arrays."""
    pasts = np.concatenate([w.past for w in windows])
    futures = np.concatenate([w.future for w in windows])
    betas = np.concatenate([w.beta for w in windows])
    return pasts, futures, betas


def sample_windows(cvae: CvaeModel, windows, K: int, rng) -> np.ndarray:
    """Nominal samples ``(B, N, K, tau1, 4)`` from the frozen CVAE."""
    pasts = np.stack([w.past for w in windows])
    betas = np.stack([w.beta for w in windows])
    B, N = pasts.shape[:2]
    s = sample_many(cvae, pasts.reshape(B * N, *pasts.shape[2:]), betas.reshape(B * N, 2), K, rng)
    return s.reshape(B, N, K, *s.shape[2:])


def batch_loss(P, cfg, g: dk.Graph, samples: np.ndarray, targets: np.ndarray,
               sweeps: int | None = TRAIN_SWEEPS):
    """Per-window losses ``(B,)`` for samples ``(B, N, K, T, 4)`` and targets ``(B, N, T, 4)``."""
    B, N, K = samples.shape[:3]
    if K < 2:
        log.debug("K = 1: weights are a point mass")
    mats = cost_matrices(P, cfg, g, samples)
    w, _ = brne_sweeps(mats, N, K, g, sweeps=sweeps, trace=False)
    err = samples[..., :2] - targets[:, :, None, :, :2]
    sq = (err ** 2).sum(axis=(-1, -2))                      # (B, N, K)
    total = None
    for i in range(N):
        term = (w[i] * sq[:, i]).sum(axis=-1)
        total = term if total is None else total + term
    return total


def window_loss(cost: CostNet | None, cvae: CvaeModel, window: DataWindow, K: int, rng,
                graph: dk.Graph | None = None, sweeps: int | None = TRAIN_SWEEPS):
    """Scalar loss Tensor for one window (``cost=None`` means ``l = 0``)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    g = graph or dk.Graph()
    samples = sample_windows(cvae, [window], K, rng)
    P = None if cost is None else g.params(cost.params)
    cfg = None if cost is None else cost.config
    return batch_loss(P, cfg, g, samples, window.future[None], sweeps).sum()


# ------------------------------------------------------------------- training

@dataclass
class CostTrainConfig:
    epochs: int = 10
    batch_size: int = 48
    lr: float = 1e-4
    K: int = 100
    sweeps: int = TRAIN_SWEEPS
    chunk: int = 8          # windows per graph inside a batch (memory bound)
    seed: int = 0


def _batch_grads(params, cfg, cvae, windows, K, sweeps, chunk, rng):
    grads, total = None, 0.0
    n = len(windows)
    for start in range(0, n, chunk):
        part = windows[start:start + chunk]
        samples = sample_windows(cvae, part, K, rng)
        targets = np.stack([w.future for w in part])
        g = dk.Graph()
        P = g.params(params)
        losses = batch_loss(P, cfg, g, samples, targets, sweeps)
        loss = losses.sum() * (1.0 / n)
        gr = dk.grads_by_name(g, dk.backward(g, loss))
        grads = gr if grads is None else {k: grads[k] + gr[k] for k in grads}
        total += float(losses.value.sum())
    return grads, total


def train_cost(cost: CostNet, cvae: CvaeModel, windows, train_cfg: CostTrainConfig | None = None,
               callback=None):
    """Minibatch Adam on the mean window loss. Returns ``(cost_net, epoch_losses)``.

    Nominal samples are drawn fresh on every visit to a window.
    ``callback(epoch, loss, net)`` runs after each epoch (checkpointing).
    """
    tc = train_cfg or CostTrainConfig()
    if not windows:
        raise ValueError("no training windows")
    if tc.K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(tc.seed)
    params = {k: v.copy() for k, v in cost.params.items()}
    state = dk.AdamState.zeros_like(params)
    history = []
    n = len(windows)
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, tc.batch_size):
            batch = [windows[k] for k in order[start:start + tc.batch_size]]
            grads, loss_sum = _batch_grads(params, cost.config, cvae, batch, tc.K,
                                           tc.sweeps, tc.chunk, rng)
            params, state = dk.adam_step(params, grads, state, tc.lr)
            total += loss_sum
        history.append(total / n)
        log.info("cost epoch %d loss %.4f", epoch + 1, history[-1])
        if callback is not None:
            callback(epoch, history[-1], CostNet(cost.config, params))
    return CostNet(cost.config, params), history


def mean_window_loss(cost: CostNet | None, cvae: CvaeModel, windows, K: int, seed: int = 0,
                     sweeps: int | None = TRAIN_SWEEPS, chunk: int = 16) -> float:
    """Deterministic evaluation: window ``k`` always sees the samples of ``rng([seed, k])``.

    Two cost nets evaluated with the same seed therefore face identical
    nominal sample sets, which makes their losses directly comparable.
    """
    if not windows:
        raise ValueError("no windows")
    total = 0.0
    for start in range(0, len(windows), chunk):
        part = windows[start:start + chunk]
        samples = np.concatenate([
            sample_windows(cvae, [w], K, np.random.default_rng([seed, start + k]))
            for k, w in enumerate(part)])
        targets = np.stack([w.future for w in part])
        g = dk.Graph(record=False)
        P = None if cost is None else cost.params
        cfg = None if cost is None else cost.config
        total += float(batch_loss(P, cfg, g, samples, targets, sweeps).value.sum())
    return total / len(windows)
