"""The ZeUS model: encoders, learned dynamics/reward, the context loss, acting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import ValidationError
from .nn import DenseNet, parameter_checksum, stop_gradient, stop_gradient_backward

AGGREGATORS = ("sum", "mean", "concat", "product", "min", "max")


@dataclass(frozen=True)
class LossBreakdown:
    context_term: float
    dynamics_term: float
    reward_term: float
    total: float
    alpha: float = 1.0


@dataclass
class ModelConfig:
    obs_dim: int
    action_dim: int
    n_actions: int
    latent_dim: int = 16
    context_dim: int = 8
    hidden: int = 64
    q_hidden: int = 64
    k: int = 5
    aggregator: str = "mean"
    alpha: float = 1.0

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValidationError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.k < 1:
            raise ValidationError("context length k must be >= 1")
        if self.alpha < 0:
            raise ValidationError("alpha must be nonnegative")

    @property
    def transition_dim(self) -> int:
        return 2 * self.obs_dim + self.action_dim + 1

    @property
    def embedding_dim(self) -> int:
        return self.context_dim * (self.k if self.aggregator == "concat" else 1)


def aggregate(h, how):
    """Reduce per-transition codes ``h`` (B, k, C) to one embedding per window."""
    B, k, C = h.shape
    if how == "sum":
        return h.sum(axis=1)
    if how == "mean":
        return h.mean(axis=1)
    if how == "concat":
        return h.reshape(B, k * C)
    if how == "product":
        return h.prod(axis=1)
    if how == "min":
        return h.min(axis=1)
    if how == "max":
        return h.max(axis=1)
    raise ValidationError(f"unknown aggregator {how!r}")


def aggregate_backward(h, how, g):
    B, k, C = h.shape
    if how == "sum":
        return np.repeat(g[:, None, :], k, axis=1)
    if how == "mean":
        return np.repeat(g[:, None, :], k, axis=1) / k
    if how == "concat":
        return g.reshape(B, k, C)
    if how == "product":
        out = np.empty_like(h)
        for j in range(k):
            others = np.delete(h, j, axis=1).prod(axis=1) if k > 1 else np.ones((B, C))
            out[:, j] = g * others
        return out
    idx = h.argmin(axis=1) if how == "min" else h.argmax(axis=1)
    out = np.zeros_like(h)
    np.put_along_axis(out, idx[:, None, :], g[:, None, :], axis=1)
    return out


class ZeusModel:
    """phi (observation encoder), psi (transition encoder + aggregator),
    the latent dynamics and reward models, and a Q head over the action grid."""

    NETS = ("phi", "psi", "dynamics", "reward", "q")

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        z, c, h = cfg.latent_dim, cfg.embedding_dim, cfg.hidden
        self.phi = DenseNet([cfg.obs_dim, h, z], rng=rng)
        self.psi = DenseNet([cfg.transition_dim, h, cfg.context_dim], rng=rng)
        self.dynamics = DenseNet([z + cfg.action_dim + c, h, z], rng=rng)
        self.reward = DenseNet([z + cfg.action_dim + c, h, 1], rng=rng)
        self.q = DenseNet([z + c, cfg.q_hidden, cfg.q_hidden, cfg.n_actions], rng=rng)

    def nets(self):
        return [getattr(self, name) for name in self.NETS]

    def checksum(self) -> str:
        return parameter_checksum(*self.nets())

    def to_dict(self) -> dict:
        return {"config": vars(self.cfg), "nets": {n: getattr(self, n).to_dict() for n in self.NETS}}

    @classmethod
    def from_dict(cls, doc) -> "ZeusModel":
        model = cls.__new__(cls)
        model.cfg = ModelConfig(**doc["config"])
        for name in cls.NETS:
            setattr(model, name, DenseNet.from_dict(doc["nets"][name]))
        return model

    # -- context encoder ------------------------------------------------
    def encode_windows(self, windows):
        """Embeddings for a batch of windows ``(B, k, transition_dim)``."""
        w = np.asarray(windows, dtype=np.float64)
        if w.ndim != 3 or w.shape[1] != self.cfg.k or w.shape[2] != self.cfg.transition_dim:
            raise ValidationError(
                f"windows must have shape (B, {self.cfg.k}, {self.cfg.transition_dim}), got {w.shape}")
        B, k, F = w.shape
        h, cache = self.psi.forward(w.reshape(B * k, F))
        h = h.reshape(B, k, -1)
        return aggregate(h, self.cfg.aggregator), (cache, h)

    def encode_windows_backward(self, ctx_cache, g):
        cache, h = ctx_cache
        gh = aggregate_backward(h, self.cfg.aggregator, g)
        grads, _ = self.psi.backward(cache, gh.reshape(-1, h.shape[2]))
        return grads

    def model_inputs(self, z, a, c):
        return np.concatenate([z, a, c], axis=1)

    def predict(self, z, a, c):
        x = self.model_inputs(z, a, c)
        return self.dynamics(x), self.reward(x)[:, 0]

    def q_values(self, obs, emb):
        return self.q(np.concatenate([self.phi(obs), emb], axis=1))


def encode_context(model: ZeusModel, window) -> np.ndarray:
    """Embedding of a single window ``(k, transition_dim)``."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != model.cfg.k:
        raise ValidationError(f"window must hold exactly k={model.cfg.k} transitions")
    return model.encode_windows(w[None])[0][0]


def _forward_broadcast(net, base, ctx):
    """Evaluate ``net`` on every concatenation [base_j, ctx_i]; returns (P, n, out).

    The first affine layer is split so the (P * n) concatenated inputs are
    never materialized.
    """
    W, b = net.params[0], net.params[1]
    nb = base.shape[1]
    h = (base @ W[:nb])[None, :, :] + (ctx @ W[nb:] + b)[:, None, :]
    for k in range(net.n_layers):
        if k > 0:
            h = h @ net.params[2 * k] + net.params[2 * k + 1]
        if net.activations[k] == "relu":
            h = np.maximum(h, 0.0)
    return h


def pairwise_model_distance(model: ZeusModel, c1, c2, z, a):
    """Mean over the probe batch ``(z, a)`` of |R(z,a,c1)-R(z,a,c2)| + ||T(z,a,c1)-T(z,a,c2)||_2,
    for each row pair of ``c1``, ``c2`` (shape (P, D))."""
    base = np.concatenate([z, a], axis=1)
    t1 = _forward_broadcast(model.dynamics, base, c1)
    t2 = _forward_broadcast(model.dynamics, base, c2)
    r1 = _forward_broadcast(model.reward, base, c1)[..., 0]
    r2 = _forward_broadcast(model.reward, base, c2)[..., 0]
    d = np.abs(r1 - r2) + np.linalg.norm(t1 - t2, axis=2)
    return d.mean(axis=1)


def approx_context_distance(model: ZeusModel, H1, H2, z, a) -> float:
    """Model-based estimate of the task distance between two windows; carries no gradient."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if z.shape[0] == 0:
        raise ValidationError("probe batch must be nonempty")
    c1 = encode_context(model, H1)[None]
    c2 = encode_context(model, H2)[None]
    return float(stop_gradient(pairwise_model_distance(model, c1, c2, z, a))[0])


@dataclass
class LossBatch:
    obs: np.ndarray
    action: np.ndarray      # action vectors (B, action_dim)
    reward: np.ndarray
    next_obs: np.ndarray
    window: np.ndarray      # (B, k, transition_dim)
    partner: np.ndarray     # index of the paired window for each row
    probe: np.ndarray | None = None   # rows used as the probe batch; default all


@dataclass
class LossResult:
    breakdown: LossBreakdown
    grads: dict
    stopped: dict = field(default_factory=dict)


def zeus_loss(model: ZeusModel, batch: LossBatch, alpha=None, frozen=None, need_grads=True) -> LossResult:
    """Representation loss and its gradients for phi, psi, dynamics and reward.

    context term: MSE(||psi(H_i) - psi(H_partner)||_2, d_hat), d_hat stopped;
    dynamics term: MSE(T(phi(o), a, psi(H)), phi(o')), target stopped;
    reward term: MSE(R(phi(o), a, psi(H)), r).

    ``frozen`` may supply ``{"d_hat": ..., "target": ...}`` to evaluate the
    loss with externally fixed stopped values (used by gradient checks).
    """
    alpha = model.cfg.alpha if alpha is None else alpha
    B = batch.obs.shape[0]
    z, phi_cache = model.phi.forward(batch.obs)
    emb, ctx_cache = model.encode_windows(batch.window)
    x = model.model_inputs(z, batch.action, emb)
    z_pred, dyn_cache = model.dynamics.forward(x)
    r_pred, rew_cache = model.reward.forward(x)

    if frozen is not None:
        target = frozen["target"]
        d_hat = frozen["d_hat"]
    else:
        target = stop_gradient(model.phi(batch.next_obs))
        probe = np.arange(B) if batch.probe is None else batch.probe
        d_hat = stop_gradient(pairwise_model_distance(
            model, emb, emb[batch.partner], z[probe], batch.action[probe]))

    diff = emb - emb[batch.partner]
    dist = np.linalg.norm(diff, axis=1)
    ctx_err = dist - d_hat
    context_term = float(np.mean(ctx_err ** 2))
    dyn_err = z_pred - target
    dynamics_term = float(np.mean(dyn_err ** 2))
    rew_err = r_pred[:, 0] - batch.reward
    reward_term = float(np.mean(rew_err ** 2))
    total = alpha * context_term + dynamics_term + reward_term
    breakdown = LossBreakdown(context_term, dynamics_term, reward_term, total, alpha)
    if not need_grads:
        return LossResult(breakdown, {})

    g_pred = 2.0 * dyn_err / dyn_err.size
    g_r = (2.0 * rew_err / B)[:, None]
    grads_dyn, gx_dyn = model.dynamics.backward(dyn_cache, g_pred)
    grads_rew, gx_rew = model.reward.backward(rew_cache, g_r)
    gx = gx_dyn + gx_rew
    zd, ad = model.cfg.latent_dim, model.cfg.action_dim
    g_z = gx[:, :zd]
    g_emb = gx[:, zd + ad:].copy()

    g_dist = 2.0 * alpha * ctx_err / B
    safe = np.where(dist > 0, dist, 1.0)
    g_diff = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0) * g_dist[:, None]
    g_emb += g_diff
    np.add.at(g_emb, batch.partner, -g_diff)

    grads = {
        "phi": model.phi.backward(phi_cache, g_z)[0],
        "psi": model.encode_windows_backward(ctx_cache, g_emb),
        "dynamics": grads_dyn,
        "reward": grads_rew,
    }
    # gradients arriving at the stopped nodes are discarded there
    stopped = {
        "d_hat": stop_gradient_backward(-g_dist),
        "target": stop_gradient_backward(-g_pred),
    }
    return LossResult(breakdown, grads, stopped)


def act(model: ZeusModel, obs, window, epsilon=0.0, rng=None):
    """Epsilon-greedy action index from the Q head on [phi(o); psi(H)].

    ``obs`` may be a single observation or a batch; ``window`` matches it.
    """
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    obs2 = obs[None] if single else obs
    win = np.asarray(window, dtype=np.float64)
    win = win[None] if single else win
    emb, _ = model.encode_windows(win)
    q = model.q_values(obs2, emb)
    actions = np.argmax(q, axis=1)
    if epsilon > 0:
        explore = rng.random(len(actions)) < epsilon
        actions = np.where(explore, rng.integers(model.cfg.n_actions, size=len(actions)), actions)
    return int(actions[0]) if single else actions
