"""Replay buffer, the ZeUS training loop and zero-shot evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .families import ContextualFamily, ContextSplit, as_context
from .nn import Adam, optimize_step
from .zeus import LossBatch, ModelConfig, ZeusModel, act, zeus_loss

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


class ZeroShotViolation(RuntimeError):
    pass


class ReplayBuffer:
    """FIFO ring buffer sampled uniformly.

    The true context tag is stored for analysis only; :meth:`sample` never
    returns it.
    """

    def __init__(self, capacity, obs_dim, action_dim, k, transition_dim):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros(capacity, dtype=np.int64)
        self.action_vec = np.zeros((capacity, action_dim))
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.window = np.zeros((capacity, k, transition_dim))
        self.next_window = np.zeros((capacity, k, transition_dim))
        self.episode = np.zeros(capacity, dtype=np.int64)
        self._context_tag = np.zeros(capacity)
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, action_vec, reward, next_obs, window, next_window, episode, context):
        i = self.cursor
        self.obs[i] = obs
        self.action[i] = action
        self.action_vec[i] = action_vec
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.window[i] = window
        self.next_window[i] = next_window
        self.episode[i] = episode
        self._context_tag[i] = context
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n, rng):
        return rng.integers(self.size, size=n)

    def sample(self, n, rng) -> dict:
        idx = self.sample_indices(n, rng)
        return {"obs": self.obs[idx], "action": self.action[idx], "action_vec": self.action_vec[idx],
                "reward": self.reward[idx], "next_obs": self.next_obs[idx],
                "window": self.window[idx], "next_window": self.next_window[idx]}

    def context_tags(self, idx):
        """Analysis-only accessor for the true context of stored transitions."""
        return self._context_tag[idx]


def transition_features(obs, action_vec, reward, next_obs):
    return np.concatenate([obs, action_vec, [reward], next_obs])


class WindowTracker:
    """Last-k transitions of the current episode, zero-padded at the front."""

    def __init__(self, k, dim):
        self.k = k
        self.buf = np.zeros((k, dim))

    def reset(self):
        self.buf[:] = 0.0

    def push(self, feat):
        self.buf = np.roll(self.buf, -1, axis=0)
        self.buf[-1] = feat

    def get(self):
        return self.buf.copy()


@dataclass
class TrainConfig:
    total_steps: int = 6000
    batch_size: int = 128
    probe_size: int = 128
    buffer_capacity: int = 100_000
    gamma: float = 0.99
    lr: float = 3e-4
    model_lr: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    tau: float = 0.01
    target_update_every: int = 2
    warmup_steps: int = 250
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_fraction: float = 0.1
    log_every: int = 1


@dataclass
class TrainingLog:
    updates: list = field(default_factory=list)    # (step, context, dynamics, reward, total)
    episodes: list = field(default_factory=list)   # (step, context_id, return)
    q_loss: list = field(default_factory=list)

    def returns_for(self, context_id):
        return [r for _, c, r in self.episodes if c == context_id]

    def csv_rows(self):
        rows = []
        for step, cid, ret in self.episodes:
            rows.append((step, 0, cid, ret, "", "", "", ""))
        for step, ctx, dyn, rew, tot in self.updates:
            rows.append((step, 1, "", "", ctx, dyn, rew, tot))
        rows.sort(key=lambda r: (r[0], r[1], str(r[2])))
        return [("step", "context_id", "return", "context_term", "dynamics_term",
                 "reward_term", "total")] + [(r[0],) + r[2:] for r in rows]


class Agent:
    """Bundles the model, target copies and optimizers."""

    def __init__(self, model: ZeusModel, tcfg: TrainConfig):
        self.model = model
        self.tcfg = tcfg
        self.phi_target = model.phi.copy()
        self.q_target = model.q.copy()
        betas = tuple(tcfg.adam_betas)
        self.q_opt = Adam(model.phi.params + model.q.params, tcfg.lr, betas)
        rep = [model.phi, model.psi, model.dynamics, model.reward]
        self.rep_nets = rep
        self.rep_opt = Adam([p for n in rep for p in n.params], tcfg.model_lr, betas)
        self.updates = 0

    def update_critic(self, batch, rng):
        m, cfg = self.model, self.tcfg
        emb, _ = m.encode_windows(batch["window"])
        emb_next, _ = m.encode_windows(batch["next_window"])
        # psi receives no gradient from the TD loss
        z_next_online = m.phi(batch["next_obs"])
        a_star = np.argmax(m.q(np.concatenate([z_next_online, emb_next], axis=1)), axis=1)
        q_next = self.q_target(np.concatenate([self.phi_target(batch["next_obs"]), emb_next], axis=1))
        y = batch["reward"] + cfg.gamma * q_next[np.arange(len(a_star)), a_star]
        z, phi_cache = m.phi.forward(batch["obs"])
        q, q_cache = m.q.forward(np.concatenate([z, emb], axis=1))
        n = len(y)
        err = q[np.arange(n), batch["action"]] - y
        gq = np.zeros_like(q)
        gq[np.arange(n), batch["action"]] = 2.0 * err / n
        grads_q, gx = m.q.backward(q_cache, gq)
        grads_phi, _ = m.phi.backward(phi_cache, gx[:, :m.cfg.latent_dim])
        loss = float(np.mean(err ** 2))
        if not np.isfinite(loss):
            raise DivergenceError("non-finite TD loss", {"td_error": err})
        optimize_step(self.q_opt, [m.phi, m.q], [grads_phi, grads_q])
        self.updates += 1
        if self.updates % cfg.target_update_every == 0:
            for tgt, src in ((self.phi_target, m.phi), (self.q_target, m.q)):
                for p, q_ in zip(tgt.params, src.params):
                    p += cfg.tau * (q_ - p)
                tgt.bump()
        return loss

    def update_representation(self, batch, rng):
        m, cfg = self.model, self.tcfg
        B = len(batch["reward"])
        probe = np.arange(min(cfg.probe_size, B))
        lb = LossBatch(batch["obs"], batch["action_vec"], batch["reward"], batch["next_obs"],
                       batch["window"], rng.permutation(B), probe)
        res = zeus_loss(m, lb)
        if not np.isfinite(res.breakdown.total):
            raise DivergenceError("non-finite representation loss", asdict(res.breakdown))
        optimize_step(self.rep_opt, self.rep_nets, [res.grads[n] for n in ("phi", "psi", "dynamics", "reward")])
        return res.breakdown


def _epsilon(step, tcfg):
    span = max(1, int(tcfg.eps_anneal_fraction * tcfg.total_steps))
    frac = min(1.0, step / span)
    return tcfg.eps_start + frac * (tcfg.eps_end - tcfg.eps_start)


def build_model(family: ContextualFamily, mcfg_kwargs: dict, rng) -> ZeusModel:
    probe_env = family.instantiate(family.default_split().train[0])
    cfg = ModelConfig(obs_dim=probe_env.obs_dim, action_dim=probe_env.action_grid.shape[1],
                      n_actions=probe_env.n_actions, **mcfg_kwargs)
    return ZeusModel(cfg, rng)


def train(model: ZeusModel, family: ContextualFamily, contexts, tcfg: TrainConfig, seed: int):
    """Alternate one environment step per training context with one critic
    update and one representation update.  Fully determined by ``seed``."""
    root = np.random.SeedSequence(seed)
    env_seq, act_seq, upd_seq = root.spawn(3)
    act_rng = np.random.default_rng(act_seq)
    upd_rng = np.random.default_rng(upd_seq)
    env_seeds = env_seq.spawn(len(contexts))
    envs = [family.instantiate(c) for c in contexts]
    env_rngs = [np.random.default_rng(s) for s in env_seeds]
    cfg = model.cfg
    agent = Agent(model, tcfg)
    buffer = ReplayBuffer(tcfg.buffer_capacity, cfg.obs_dim, cfg.action_dim, cfg.k, cfg.transition_dim)
    trackers = [WindowTracker(cfg.k, cfg.transition_dim) for _ in envs]
    obs = [env.reset(rng) for env, rng in zip(envs, env_rngs)]
    ep_return = [0.0] * len(envs)
    episode_ids = list(range(len(envs)))
    next_episode = len(envs)
    tlog = TrainingLog()
    for step in range(tcfg.total_steps):
        eps = _epsilon(step, tcfg)
        windows = np.stack([t.get() for t in trackers])
        if step < tcfg.warmup_steps:
            actions = act_rng.integers(cfg.n_actions, size=len(envs))
        else:
            actions = act(model, np.stack(obs), windows, eps, act_rng)
        for i, env in enumerate(envs):
            a = int(actions[i])
            avec = env.action_grid[a]
            nobs, r, done = env.step(a)
            before = windows[i]
            trackers[i].push(transition_features(obs[i], avec, r, nobs))
            buffer.add(obs[i], a, avec, r, nobs, before, trackers[i].get(), episode_ids[i],
                       as_context(contexts[i])[0])
            ep_return[i] += r
            obs[i] = nobs
            if done:
                tlog.episodes.append((step, i, ep_return[i]))
                ep_return[i] = 0.0
                trackers[i].reset()
                obs[i] = env.reset(env_rngs[i])
                episode_ids[i] = next_episode
                next_episode += 1
        if step >= tcfg.warmup_steps and len(buffer) >= tcfg.batch_size:
            batch = buffer.sample(tcfg.batch_size, upd_rng)
            tlog.q_loss.append(agent.update_critic(batch, upd_rng))
            bd = agent.update_representation(batch, upd_rng)
            tlog.updates.append((step, bd.context_term, bd.dynamics_term, bd.reward_term, bd.total))
    return model, tlog, buffer


def collect_windows(model_cfg: ModelConfig, family: ContextualFamily, context, n_windows, seed,
                    policy=None):
    """Random-policy (or ``policy``) rollouts; returns full-length windows only."""
    rng = np.random.default_rng(seed)
    env = family.instantiate(context)
    out = []
    tracker = WindowTracker(model_cfg.k, model_cfg.transition_dim)
    obs = env.reset(rng)
    filled = 0
    while len(out) < n_windows:
        a = int(rng.integers(env.n_actions)) if policy is None else policy(obs, tracker.get())
        nobs, r, done = env.step(a)
        tracker.push(transition_features(obs, env.action_grid[a], r, nobs))
        filled += 1
        obs = nobs
        if filled >= model_cfg.k and filled % model_cfg.k == 0:
            out.append(tracker.get())
        if done:
            tracker.reset()
            filled = 0
            obs = env.reset(rng)
    return np.stack(out)


def run_episode(model, env, rng, epsilon=0.0):
    k, dim = model.cfg.k, model.cfg.transition_dim
    tracker = WindowTracker(k, dim)
    obs = env.reset(rng)
    total = 0.0
    done = False
    while not done:
        a = act(model, obs, tracker.get(), epsilon, rng)
        nobs, r, done = env.step(a)
        tracker.push(transition_features(obs, env.action_grid[a], r, nobs))
        total += r
        obs = nobs
    return total


def evaluate_zero_shot(model: ZeusModel, family: ContextualFamily, contexts, episodes: int, seed: int):
    """Greedy returns per context with no parameter updates.

    Raises :class:`ZeroShotViolation` if any parameter changed.
    """
    before = model.checksum()
    seqs = np.random.SeedSequence(seed).spawn(len(contexts))
    out = {}
    for c, seq in zip(contexts, seqs):
        env = family.instantiate(c)
        rngs = [np.random.default_rng(s) for s in seq.spawn(episodes)]
        out[float(as_context(c)[0])] = float(np.mean([run_episode(model, env, r) for r in rngs]))
    if model.checksum() != before:
        raise ZeroShotViolation("parameters changed during zero-shot evaluation")
    return out


def oracle_return(family: ContextualFamily, context, episodes: int, seed: int, lookahead=10):
    """Receding-horizon planner with the true dynamics: at each step try every
    action held constant for ``lookahead`` steps and take the best first move."""
    seqs = np.random.SeedSequence(seed).spawn(episodes)
    env = family.instantiate(context)
    acts = env.action_grid
    totals = []
    for seq in seqs:
        env.reset(np.random.default_rng(seq))
        total, done = 0.0, False
        while not done:
            s = np.repeat(env.state[None], len(acts), axis=0)
            score = np.zeros(len(acts))
            disc = 1.0
            for _ in range(lookahead):
                s2 = env.dynamics(s, acts)
                score += disc * env.reward_fn(s, s2)
                disc *= 0.95
                s = s2
            _, r, done = env.step(int(np.argmax(score)))
            total += r
        totals.append(total)
    return float(np.mean(totals))
