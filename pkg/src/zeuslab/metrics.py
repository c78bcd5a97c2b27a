"""Bisimulation metric, super-MDP construction and the task metric over contexts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .families import ContextualFamily, UnsupportedFamilyError
from .mdp import TabularMDP, ValidationError
from .transport import wasserstein_discrete, wasserstein_sparse


@dataclass(frozen=True)
class DistanceMatrix:
    d: np.ndarray
    labels: tuple = ()

    @property
    def n(self) -> int:
        return self.d.shape[0]

    def audit(self, tol: float = 1e-9) -> dict:
        """Check the pseudometric axioms; returns the worst violation of each."""
        d = self.d
        n = d.shape[0]
        tri = 0.0
        # d[i, k] <= d[i, j] + d[j, k] for all triples, vectorized over (i, k)
        for j in range(n):
            viol = d - (d[:, j][:, None] + d[j, :][None, :])
            tri = max(tri, float(viol.max()))
        report = {
            "symmetry": float(np.max(np.abs(d - d.T))) if n else 0.0,
            "diagonal": float(np.max(np.abs(np.diag(d)))) if n else 0.0,
            "negativity": float(max(0.0, -d.min())) if n else 0.0,
            "triangle": max(0.0, tri),
        }
        report["passed"] = all(v <= tol for v in report.values())
        return report


@dataclass(frozen=True)
class SuperMDP:
    """MDP over (context, state) pairs; super-state ``i * n + s`` is ``(contexts[i], s)``."""

    mdp: TabularMDP
    contexts: tuple
    n_base: int

    def index(self, context_idx: int, state: int) -> int:
        return context_idx * self.n_base + state

    def unindex(self, super_state: int) -> tuple[int, int]:
        return divmod(super_state, self.n_base)

    def block(self, context_idx: int) -> slice:
        return slice(context_idx * self.n_base, (context_idx + 1) * self.n_base)


def _sparse_rows(P):
    S, A, _ = P.shape
    width = max(1, int((P > 0).sum(axis=2).max()))
    idx = np.zeros((S, A, width), dtype=np.int64)
    prob = np.zeros((S, A, width))
    length = np.zeros((S, A), dtype=np.int64)
    for s in range(S):
        for a in range(A):
            nz = np.flatnonzero(P[s, a] > 0)
            length[s, a] = nz.size
            idx[s, a, :nz.size] = nz
            prob[s, a, :nz.size] = P[s, a, nz]
    return idx, prob, length


@njit(cache=True)
def _bisim_update(d, R, gamma, idx, prob, length):
    S = R.shape[0]
    A = R.shape[1]
    out = np.zeros_like(d)
    for s in range(S):
        for t in range(s + 1, S):
            best = 0.0
            for a in range(A):
                ls = length[s, a]
                lt = length[t, a]
                w = 0.0
                if gamma > 0.0:
                    pa = prob[s, a, :ls].copy()
                    pb = prob[t, a, :lt].copy()
                    pb *= pa.sum() / pb.sum()
                    w = wasserstein_sparse(idx[s, a, :ls], pa, idx[t, a, :lt], pb, d)
                val = abs(R[s, a] - R[t, a]) + gamma * w
                if val > best:
                    best = val
            out[s, t] = best
            out[t, s] = best
    return out


def bisim_operator(mdp: TabularMDP, d: np.ndarray) -> np.ndarray:
    """One application of F(d)(s,s') = max_a |r - r'| + gamma W_d(P, P')."""
    idx, prob, length = _sparse_rows(mdp.transition)
    return _bisim_update(np.ascontiguousarray(d, dtype=np.float64), np.asarray(mdp.reward),
                         mdp.gamma, idx, prob, length)


def bisim_iteration_cap(gamma: float, tol: float) -> int:
    if gamma == 0:
        return 1
    diam = 1.0 / (1.0 - gamma)
    d_max = (1.0 + gamma * diam) / (1.0 - gamma)
    return max(1, math.ceil(math.log(tol * (1.0 - gamma) / d_max) / math.log(gamma)))


def bisim_metric(mdp: TabularMDP, tol: float = 1e-8) -> DistanceMatrix:
    """Bisimulation metric by fixed-point iteration from d = 0.

    Stops when ``||F(d) - d||_inf <= tol``; the returned matrix is the last
    iterate ``F(d)``.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    idx, prob, length = _sparse_rows(mdp.transition)
    R = np.asarray(mdp.reward)
    d = np.zeros((mdp.n_states, mdp.n_states))
    for _ in range(bisim_iteration_cap(mdp.gamma, tol) + 1):
        d_new = _bisim_update(d, R, mdp.gamma, idx, prob, length)
        residual = np.max(np.abs(d_new - d)) if d.size else 0.0
        d = d_new
        if residual <= tol:
            return DistanceMatrix(d)
    raise RuntimeError("bisimulation iteration hit its cap without converging")


def build_super_mdp(family: ContextualFamily, contexts) -> SuperMDP:
    if not family.tabular:
        raise UnsupportedFamilyError(f"family {family.family_id!r} is not tabular")
    blocks = [family.instantiate(c) for c in contexts]
    if not blocks:
        raise ValidationError("need at least one context")
    n, A = blocks[0].n_states, blocks[0].n_actions
    k = len(blocks)
    P = np.zeros((k * n, A, k * n))
    R = np.zeros((k * n, A))
    for i, mdp in enumerate(blocks):
        sl = slice(i * n, (i + 1) * n)
        P[sl, :, sl] = mdp.transition
        R[sl] = mdp.reward
    return SuperMDP(TabularMDP(P, R, blocks[0].gamma), tuple(contexts), n)


def task_metric(family: ContextualFamily, contexts, tol: float = 1e-8) -> DistanceMatrix:
    """d_task(c_i, c_j) = max_s d~((c_i, s), (c_j, s)) on the super-MDP."""
    sup = build_super_mdp(family, contexts)
    dist = bisim_metric(sup.mdp, tol).d
    k, n = len(sup.contexts), sup.n_base
    out = np.zeros((k, k))
    states = np.arange(n)
    for i in range(k):
        for j in range(i + 1, k):
            val = dist[i * n + states, j * n + states].max()
            out[i, j] = out[j, i] = val
    return DistanceMatrix(out, tuple(contexts))


def discrete_ground(n: int) -> np.ndarray:
    return 1.0 - np.eye(n)


def fit_lipschitz_constants(family: ContextualFamily, contexts, ground=None) -> tuple[float, float]:
    """Smallest (L_p, L_r) satisfying the smoothness inequalities on all sampled pairs.

    Context distance is the L1 norm.  The state ground metric defaults to the
    discrete metric, under which W reduces to total variation.
    """
    if not family.tabular:
        raise UnsupportedFamilyError(f"family {family.family_id!r} is not tabular")
    contexts = list(contexts)
    if len(contexts) < 2:
        raise ValidationError("Lipschitz constants need at least two contexts")
    mdps = [family.instantiate(c) for c in contexts]
    n = mdps[0].n_states
    ground = discrete_ground(n) if ground is None else np.asarray(ground, dtype=np.float64)
    L_p = L_r = 0.0
    for i in range(len(mdps)):
        for j in range(i + 1, len(mdps)):
            dc = float(np.sum(np.abs(np.atleast_1d(contexts[i]) - np.atleast_1d(contexts[j]))))
            if dc == 0:
                continue
            mi, mj = mdps[i], mdps[j]
            L_r = max(L_r, float(np.max(np.abs(mi.reward - mj.reward))) / dc)
            w = max(wasserstein_discrete(mi.transition[s, a], mj.transition[s, a], ground)
                    for s in range(n) for a in range(mi.n_actions))
            L_p = max(L_p, w / dc)
    return L_p, L_r
