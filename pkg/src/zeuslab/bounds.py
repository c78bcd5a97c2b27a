"""Approximate abstractions, their error constants, and value-bound audits."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .families import ContextualFamily, as_context, context_distance
from .mdp import TabularMDP, ValidationError, value_iteration
from .metrics import DistanceMatrix, task_metric

VI_TOL = 1e-10
METRIC_TOL = 1e-8


@dataclass(frozen=True)
class StateAbstraction:
    labels: np.ndarray
    n_clusters: int
    radius: float

    @classmethod
    def identity(cls, n: int) -> "StateAbstraction":
        return cls(np.arange(n), n, 0.0)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


@dataclass(frozen=True)
class ApproxConstants:
    eps_R: float
    eps_T: float
    eps_c: float = 0.0


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    rhs: float
    satisfied: bool
    slack: float
    c_i: float
    c_j: float
    c_hat: float
    gamma: float
    eps_R: float
    eps_T: float
    eps_c: float
    radius: float
    n_clusters: int
    tolerance: float
    reference_rhs: float

    def to_dict(self) -> dict:
        return asdict(self)


def audit_tolerance(gamma: float, vi_tol: float = VI_TOL, metric_tol: float = METRIC_TOL) -> float:
    return 10.0 * (vi_tol + metric_tol) / (1.0 - gamma)


def build_abstraction(metric, radius: float) -> StateAbstraction:
    """Greedy covering: the first uncovered state (in index order) becomes a
    centre and absorbs every uncovered state within ``radius`` of it."""
    d = metric.d if isinstance(metric, DistanceMatrix) else np.asarray(metric)
    if radius < 0:
        raise ValidationError("radius must be nonnegative")
    n = d.shape[0]
    labels = np.full(n, -1)
    k = 0
    for s in range(n):
        if labels[s] >= 0:
            continue
        grab = (labels < 0) & (d[s] <= radius)
        grab[s] = True
        labels[grab] = k
        k += 1
    return StateAbstraction(labels, k, float(radius))


def lift_distribution(p: np.ndarray, abstraction: StateAbstraction) -> np.ndarray:
    """Push a next-state distribution through the abstraction."""
    return np.bincount(abstraction.labels, weights=p, minlength=abstraction.n_clusters)


def abstraction_constants(family: ContextualFamily, contexts, abstraction: StateAbstraction,
                          c_hat=None) -> ApproxConstants:
    """Exact eps_R, eps_T over all cluster-mate pairs, actions and contexts.

    ``eps_c`` is ``||c_hat - contexts[0]||_1`` when ``c_hat`` is given.
    """
    mdps = [family.instantiate(c) for c in contexts]
    eps_R = eps_T = 0.0
    for mdp in mdps:
        if mdp.n_states != abstraction.labels.size:
            raise ValidationError(
                f"abstraction covers {abstraction.labels.size} states, MDP has {mdp.n_states}")
        lifted = np.stack([
            np.stack([lift_distribution(mdp.transition[s, a], abstraction)
                      for a in range(mdp.n_actions)])
            for s in range(mdp.n_states)])
        for k in range(abstraction.n_clusters):
            m = abstraction.members(k)
            if m.size < 2:
                continue
            R = mdp.reward[m]
            eps_R = max(eps_R, float(np.max(R.max(axis=0) - R.min(axis=0))))
            L = lifted[m]
            for x in range(m.size):
                for y in range(x + 1, m.size):
                    eps_T = max(eps_T, float(np.max(np.abs(L[x] - L[y]).sum(axis=-1))))
    eps_c = 0.0 if c_hat is None else context_distance(c_hat, contexts[0])
    return ApproxConstants(eps_R, eps_T, eps_c)


def abstract_mdp(mdp: TabularMDP, abstraction: StateAbstraction) -> TabularMDP:
    """Uniform average of rewards and lifted transitions over cluster members."""
    K, A = abstraction.n_clusters, mdp.n_actions
    P = np.zeros((K, A, K))
    R = np.zeros((K, A))
    for k in range(K):
        m = abstraction.members(k)
        R[k] = mdp.reward[m].mean(axis=0)
        for a in range(A):
            P[k, a] = lift_distribution(mdp.transition[m, a].mean(axis=0), abstraction)
    return TabularMDP(P, R, mdp.gamma)


def lift_q(q_abstract: np.ndarray, abstraction: StateAbstraction) -> np.ndarray:
    return q_abstract[abstraction.labels]


def verify_theorem1(family: ContextualFamily, contexts, vi_tol=VI_TOL, metric_tol=METRIC_TOL) -> dict:
    """Check |V*(s,c_i) - V*(s,c_j)| <= d_task(c_i,c_j) / (1 - gamma) for every s and pair."""
    contexts = list(contexts)
    dtask = task_metric(family, contexts, metric_tol).d
    values = [value_iteration(family.instantiate(c), vi_tol).max(axis=1) for c in contexts]
    gamma = family.instantiate(contexts[0]).gamma
    tol = audit_tolerance(gamma, vi_tol, metric_tol)
    worst = -np.inf
    worst_lhs = worst_rhs = 0.0
    violations = 0
    for i in range(len(contexts)):
        for j in range(i + 1, len(contexts)):
            lhs = np.abs(values[i] - values[j])
            rhs = dtask[i, j] / (1.0 - gamma)
            excess = lhs - rhs
            violations += int(np.sum(excess > tol))
            k = int(np.argmax(excess))
            if excess[k] > worst:
                worst, worst_lhs, worst_rhs = float(excess[k]), float(lhs[k]), float(rhs)
    if len(contexts) < 2:
        worst = 0.0
    return {
        "contexts": [float(as_context(c)[0]) for c in contexts],
        "gamma": gamma,
        "max_excess": worst,
        "lhs_at_max": worst_lhs,
        "rhs_at_max": worst_rhs,
        "slack": -worst,
        "violations": violations,
        "tolerance": tol,
        "passed": violations == 0,
        "dtask": dtask.tolist(),
    }


def verify_value_bound(family: ContextualFamily, c_i, c_j, abstraction: StateAbstraction,
                       c_hat=None, vi_tol=VI_TOL) -> BoundReport:
    """Audit ||Q*_{c_j} - [Q*_{abstract, c_hat}]_{c_j}||_inf against
    eps_R + gamma (eps_T + eps_c + ||c_i - c_j||_1) / (2 (1 - gamma)).

    eps_R and eps_T are measured on the c_i instance.  ``reference_rhs``
    additionally reports eps_R/(1-g) + g (eps_T + eps_c + |dc|)/(2 (1-g)^2),
    the bound of the underlying single-abstraction lemma without the extra
    1/(1-g) factors dropped.
    """
    c_hat = c_i if c_hat is None else c_hat
    m_i = family.instantiate(c_i)
    m_j = family.instantiate(c_j)
    m_hat = family.instantiate(c_hat)
    for m in (m_i, m_j, m_hat):
        if m.reward.min() < 0 or m.reward.max() > 1:
            raise ValidationError("bound premise broken: rewards must lie in [0, 1]")
    gamma = m_j.gamma
    consts = abstraction_constants(family, [c_i], abstraction, c_hat)
    q_true = value_iteration(m_j, vi_tol)
    q_abs = value_iteration(abstract_mdp(m_hat, abstraction), vi_tol)
    lhs = float(np.max(np.abs(q_true - lift_q(q_abs, abstraction))))
    dc = context_distance(c_i, c_j)
    rhs = consts.eps_R + gamma * (consts.eps_T + consts.eps_c + dc) / (2.0 * (1.0 - gamma))
    ref = (consts.eps_R / (1.0 - gamma)
           + gamma * (consts.eps_T + consts.eps_c + dc) / (2.0 * (1.0 - gamma) ** 2))
    tol = audit_tolerance(gamma, vi_tol, 0.0)
    return BoundReport(
        lhs=lhs, rhs=rhs, satisfied=bool(lhs <= rhs + tol), slack=rhs - lhs,
        c_i=float(as_context(c_i)[0]), c_j=float(as_context(c_j)[0]),
        c_hat=float(as_context(c_hat)[0]), gamma=gamma,
        eps_R=consts.eps_R, eps_T=consts.eps_T, eps_c=consts.eps_c,
        radius=abstraction.radius, n_clusters=abstraction.n_clusters, tolerance=tol,
        reference_rhs=ref)


def empirical_generalization_gap(train_returns: dict, eval_returns: dict) -> dict:
    """Train-minus-eval return statistics.

    Both arguments map a context-set name to a list of returns (a bare list
    is treated as a single set named ``"all"``).  Each eval set is compared
    against the pooled train returns.
    """
    if not isinstance(train_returns, dict):
        train_returns = {"all": train_returns}
    if not isinstance(eval_returns, dict):
        eval_returns = {"all": eval_returns}
    pooled = np.concatenate([np.asarray(v, dtype=float) for v in train_returns.values()]) \
        if train_returns else np.array([])
    if pooled.size == 0 or not eval_returns or any(len(v) == 0 for v in eval_returns.values()):
        raise ValidationError("generalization gap needs nonempty return samples")
    out = {}
    for name, ev in eval_returns.items():
        ev = np.asarray(ev, dtype=float)
        diffs = pooled.mean() - ev
        out[name] = {"gap": float(diffs.mean()), "std": float(ev.std()),
                     "train_mean": float(pooled.mean()), "eval_mean": float(ev.mean())}
    return out
