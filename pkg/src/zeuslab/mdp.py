"""Finite MDPs and exact dynamic-programming solvers."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ROW_TOL = 1e-12


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite MDP with transition tensor ``P[s, a, s']`` and rewards ``R[s, a]``.

    Arrays are copied and made read-only at construction.  Rows whose sum
    drifts from 1 by at most ``ROW_TOL`` are renormalized; anything further
    off is rejected.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.array(self.transition, dtype=np.float64)
        R = np.array(self.reward, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValidationError(f"transition must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ValidationError(f"reward shape {R.shape} does not match transition {P.shape[:2]}")
        if P.shape[0] < 1 or P.shape[1] < 1:
            raise ValidationError("need at least one state and one action")
        gamma = float(self.gamma)
        if not 0.0 <= gamma < 1.0:
            raise ValidationError(f"gamma must satisfy 0 <= gamma < 1, got {gamma}")
        if not np.all(np.isfinite(P)) or not np.all(np.isfinite(R)):
            raise ValidationError("transition and reward must be finite")
        neg = np.argwhere(P < 0)
        if len(neg):
            s, a, _ = neg[0]
            raise ValidationError(f"negative transition probability at (state={s}, action={a})")
        sums = P.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)
        if len(bad):
            s, a = bad[0]
            raise ValidationError(
                f"transition row (state={s}, action={a}) sums to {float(sums[s, a]):.17g}, not 1")
        P = P / sums[:, :, None]
        if R.min() < 0.0 or R.max() > 1.0:
            raise ValidationError("rewards must lie in [0, 1]")
        P.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "gamma", gamma)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_json(self) -> str:
        # repr of a python float round-trips exactly
        doc = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "TabularMDP":
        doc = json.loads(text)
        mdp = cls(np.array(doc["transition"]), np.array(doc["reward"]), doc["gamma"])
        if mdp.n_states != doc["n_states"] or mdp.n_actions != doc["n_actions"]:
            raise ValidationError("declared sizes do not match array shapes")
        return mdp

    def __eq__(self, other):
        if not isinstance(other, TabularMDP):
            return NotImplemented
        return (self.gamma == other.gamma
                and np.array_equal(self.transition, other.transition)
                and np.array_equal(self.reward, other.reward))

    __hash__ = None


def bellman_backup(mdp: TabularMDP, v: np.ndarray) -> np.ndarray:
    """Optimal Bellman operator applied to a value vector; returns Q."""
    return mdp.reward + mdp.gamma * (mdp.transition @ v)


def greedy(q: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. lowest action index on ties
    return np.argmax(q, axis=1)


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Synchronous value iteration.

    Returns ``Q`` with ``||B(V) - V||_inf <= tol`` where ``V = max_a Q``.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    gamma = mdp.gamma
    if max_iter is None:
        # ||V_1 - V_0|| <= 1 for rewards in [0, 1], residual shrinks by gamma
        max_iter = 1 if gamma == 0 else int(np.ceil(np.log(tol) / np.log(gamma))) + 10
    v = np.zeros(mdp.n_states)
    q = bellman_backup(mdp, v)
    for _ in range(max_iter + 1):
        v_new = q.max(axis=1)
        q = bellman_backup(mdp, v_new)
        if np.max(np.abs(q.max(axis=1) - v_new)) <= tol:
            return q
    raise RuntimeError("value iteration did not reach tolerance")


def policy_evaluation(mdp: TabularMDP, policy, tol: float = 1e-10) -> np.ndarray:
    """Iterative evaluation of a deterministic policy (one action per state)."""
    if tol <= 0:
        raise ValidationError("tol must be positive")
    pi = np.asarray(policy)
    if pi.shape != (mdp.n_states,) or not np.issubdtype(pi.dtype, np.integer):
        raise ValidationError("policy must give one integer action per state")
    if pi.min() < 0 or pi.max() >= mdp.n_actions:
        raise ValidationError("policy contains an invalid action index")
    idx = np.arange(mdp.n_states)
    P = mdp.transition[idx, pi]
    r = mdp.reward[idx, pi]
    v = np.zeros(mdp.n_states)
    while True:
        v_new = r + mdp.gamma * (P @ v)
        if np.max(np.abs(v_new - v)) <= tol * (1 - mdp.gamma) or mdp.gamma == 0:
            # one extra sweep so the reported residual is <= tol
            return r + mdp.gamma * (P @ v_new)
        v = v_new


def bellman_residual(mdp: TabularMDP, q: np.ndarray) -> float:
    v = q.max(axis=1)
    return float(np.max(np.abs(bellman_backup(mdp, v) - q)))
