"""Learned-context diagnostics: distance matrices, rank correlation, identifiability."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .families import ContextualFamily, SlipGrid, as_context
from .mdp import ValidationError
from .nn import Adam, DenseNet, optimize_step


class UndefinedCorrelationError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation, 1 - 6 sum d^2 / (n (n^2 - 1)), average ranks for ties.

    With ties the Pearson correlation of the ranks is returned, which agrees
    with the closed form when there are none.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("spearman needs two vectors of equal length")
    n = len(x)
    if n < 2:
        raise ValidationError("spearman needs at least two points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    rx, ry = average_ranks(x), average_ranks(y)
    if len(np.unique(rx)) == n and len(np.unique(ry)) == n:
        rho = 1.0 - 6.0 * np.sum((rx - ry) ** 2) / (n * (n * n - 1))
    else:
        rx, ry = rx - rx.mean(), ry - ry.mean()
        rho = float(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)))
    return float(np.clip(rho, -1.0, 1.0))


def upper_triangle(m) -> np.ndarray:
    m = np.asarray(m)
    return m[np.triu_indices(m.shape[0], k=1)]


@dataclass(frozen=True)
class ContextDistanceReport:
    contexts: tuple
    embedding_distance: np.ndarray
    context_distance: np.ndarray
    spearman_rho: float


def distance_report(contexts, embeddings) -> ContextDistanceReport:
    """``embeddings[i]`` holds the (n_i, D) embeddings gathered for ``contexts[i]``."""
    k = len(contexts)
    if k < 2:
        raise ValidationError("need at least two contexts")
    for i, e in enumerate(embeddings):
        if len(e) == 0:
            raise InsufficientDataError(f"context {contexts[i]!r} has no windows")
    emb = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            diff = embeddings[i][:, None, :] - embeddings[j][None, :, :]
            emb[i, j] = emb[j, i] = np.linalg.norm(diff, axis=2).mean()
    cvec = [as_context(c) for c in contexts]
    truth = np.array([[float(np.abs(a - b).sum()) for b in cvec] for a in cvec])
    try:
        rho = spearman(upper_triangle(emb), upper_triangle(truth))
    except UndefinedCorrelationError:
        rho = float("nan")
    return ContextDistanceReport(tuple(float(c[0]) for c in cvec), emb, truth, rho)


def pairwise_context_matrix(model, family: ContextualFamily, contexts, windows_per_context=32,
                            seed=0, policy="greedy") -> ContextDistanceReport:
    """Mean pairwise embedding distances between contexts, windows drawn from
    rollouts of the model's greedy policy (or a uniform policy with ``policy="random"``)."""
    from .training import collect_windows
    from .zeus import act

    if len(contexts) < 2:
        raise ValidationError("need at least two contexts")
    seqs = np.random.SeedSequence(seed).spawn(len(contexts))
    pol = None
    if policy == "greedy":
        def pol(o, h):
            return act(model, o, h)
    embeddings = []
    for c, s in zip(contexts, seqs):
        if windows_per_context < 1:
            raise InsufficientDataError(f"context {c!r} has no windows")
        w = collect_windows(model.cfg, family, c, windows_per_context, s, pol)
        embeddings.append(model.encode_windows(w)[0])
    return distance_report(contexts, embeddings)


def slipgrid_windows(family: SlipGrid, context, n_windows, k, rng):
    """Uniform-policy windows for a SlipGrid: (obs, one-hot action, reward, next obs) per step."""
    mdp = family.instantiate(context)
    out = np.zeros((n_windows, k, 2 + 4 + 1 + 2))
    for w in range(n_windows):
        s = int(rng.integers(mdp.n_states))
        for t in range(k):
            a = int(rng.integers(4))
            s2 = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
            out[w, t, :2] = family.observation(s)
            out[w, t, 2 + a] = 1.0
            out[w, t, 6] = mdp.reward[s, a]
            out[w, t, 7:] = family.observation(s2)
            # restart inside the window when the goal absorbs the walker
            s = s2 if s2 != family.goal else int(rng.integers(mdp.n_states))
    return out


def continuous_windows(family, context, n_windows, k, rng):
    env = family.instantiate(context)
    feats = []
    obs = env.reset(rng)
    t = 0
    cur = []
    while len(feats) < n_windows:
        a = int(rng.integers(env.n_actions))
        nobs, r, done = env.step(a)
        cur.append(np.concatenate([obs, env.action_grid[a], [r], nobs]))
        obs = nobs
        t += 1
        if len(cur) == k:
            feats.append(np.stack(cur))
            cur = []
        if done:
            obs = env.reset(rng)
            cur = []
    return np.stack(feats)


@dataclass
class ProbeConfig:
    windows_per_context: int = 400
    hidden: int = 64
    steps: int = 5000
    batch_size: int = 128
    lr: float = 1e-3
    train_fraction: float = 0.8


def identifiability_probe(family: ContextualFamily, contexts, k=5, cfg: ProbeConfig | None = None,
                          seed=0) -> dict:
    """Regress the true context from flattened k-step uniform-policy windows.

    Returns held-out MSE together with the label variance (the error of
    always predicting the mean).
    """
    cfg = cfg or ProbeConfig()
    rng = np.random.default_rng(seed)
    X, y = [], []
    for c in contexts:
        if isinstance(family, SlipGrid):
            w = slipgrid_windows(family, c, cfg.windows_per_context, k, rng)
        else:
            w = continuous_windows(family, c, cfg.windows_per_context, k, rng)
        X.append(w.reshape(len(w), -1))
        y.append(np.full(len(w), float(as_context(c)[0])))
    X = np.concatenate(X)
    y = np.concatenate(y)
    if len(X) < 10:
        raise InsufficientDataError("too few rollout windows for the probe")
    perm = rng.permutation(len(X))
    n_train = int(cfg.train_fraction * len(X))
    tr, te = perm[:n_train], perm[n_train:]
    mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0) + 1e-8
    Xs = (X - mu) / sd
    net = DenseNet([X.shape[1], cfg.hidden, cfg.hidden, 1], rng=rng)
    opt = Adam(net.params, cfg.lr)
    for _ in range(cfg.steps):
        idx = tr[rng.integers(len(tr), size=cfg.batch_size)]
        pred, cache = net.forward(Xs[idx])
        err = pred[:, 0] - y[idx]
        grads, _ = net.backward(cache, (2.0 * err / len(idx))[:, None])
        optimize_step(opt, [net], [grads])
    test_mse = float(np.mean((net(Xs[te])[:, 0] - y[te]) ** 2))
    label_var = float(np.var(y[te]))
    return {"test_mse": test_mse, "label_variance": label_var,
            "identifiable": bool(test_mse < 0.5 * label_var) if label_var > 0 else False,
            "n_train": int(len(tr)), "n_test": int(len(te))}
