"""Context-indexed environment families, context splits and schedules."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .mdp import TabularMDP, ValidationError


class ContextRangeError(ValueError):
    pass


class UnsupportedFamilyError(TypeError):
    pass


def as_context(c) -> np.ndarray:
    return np.atleast_1d(np.asarray(c, dtype=np.float64))


def context_distance(c1, c2) -> float:
    """Ground context distance, the L1 norm."""
    return float(np.sum(np.abs(as_context(c1) - as_context(c2))))


# --------------------------------------------------------------------------
# splits and schedules


@dataclass(frozen=True)
class ContextSplit:
    train: tuple
    eval_interpolation: tuple
    eval_extrapolation: tuple

    def check(self) -> bool:
        """True iff interpolation contexts are inside the train hull and
        extrapolation contexts are outside it."""
        return (all(in_hull(c, self.train) for c in self.eval_interpolation)
                and not any(in_hull(c, self.train) for c in self.eval_extrapolation))

    def to_dict(self) -> dict:
        return {"train": list(self.train), "eval_interpolation": list(self.eval_interpolation),
                "eval_extrapolation": list(self.eval_extrapolation)}


def in_hull(point, points) -> bool:
    """Convex-hull membership via an LP feasibility problem."""
    x = as_context(point)
    pts = np.array([as_context(p) for p in points])
    if pts.size == 0:
        return False
    if pts.shape[1] == 1:
        return bool(pts.min() <= x[0] <= pts.max())
    k = pts.shape[0]
    A_eq = np.vstack([pts.T, np.ones((1, k))])
    b_eq = np.concatenate([x, [1.0]])
    res = linprog(np.zeros(k), A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * k, method="highs")
    return res.status == 0


@dataclass(frozen=True)
class ContextSchedule:
    contexts: tuple
    max_step: float

    def is_smooth(self) -> bool:
        c = [as_context(x) for x in self.contexts]
        return all(np.linalg.norm(b - a) <= self.max_step + 1e-12 for a, b in zip(c, c[1:]))


def smooth_schedule(low, high, n_steps, max_step, rng, start=None) -> ContextSchedule:
    """Bounded random walk over a scalar context range with steps <= ``max_step``."""
    c = float(rng.uniform(low, high)) if start is None else float(start)
    out = [c]
    for _ in range(n_steps):
        c = float(np.clip(c + rng.uniform(-max_step, max_step), low, high))
        out.append(c)
    return ContextSchedule(tuple(out), float(max_step))


# --------------------------------------------------------------------------
# observations


@dataclass(frozen=True)
class BlockObservationMap:
    """Rich observation = mixing @ state, followed by pure-noise distractor dims."""

    mixing: np.ndarray
    n_distractors: int = 0
    noise_scale: float = 0.0

    def __post_init__(self):
        M = np.array(self.mixing, dtype=np.float64)
        if M.ndim != 2 or np.linalg.matrix_rank(M) < M.shape[1]:
            raise ValidationError("mixing matrix must have full column rank")
        M.setflags(write=False)
        object.__setattr__(self, "mixing", M)

    @property
    def state_dim(self) -> int:
        return self.mixing.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.mixing.shape[0] + self.n_distractors

    def observe(self, state, rng=None) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        if state.shape[-1] != self.state_dim:
            raise ValidationError(
                f"state has dimension {state.shape[-1]}, map expects {self.state_dim}")
        core = state @ self.mixing.T
        if self.n_distractors == 0:
            return core
        shape = state.shape[:-1] + (self.n_distractors,)
        if rng is None or self.noise_scale == 0:
            noise = np.zeros(shape)
        else:
            noise = self.noise_scale * rng.standard_normal(shape)
        return np.concatenate([core, noise], axis=-1)


def observe(obs_map: BlockObservationMap, state, rng=None) -> np.ndarray:
    return obs_map.observe(state, rng)


# --------------------------------------------------------------------------
# families


@dataclass(frozen=True)
class ContextualFamily:
    """Base class: a pure map from a context to an environment instance."""

    family_id: str = field(init=False, default="")
    low: float = field(init=False, default=-np.inf)
    high: float = field(init=False, default=np.inf)
    tabular: bool = field(init=False, default=False)
    declared_L_p: float = field(init=False, default=np.nan)
    declared_L_r: float = field(init=False, default=np.nan)

    def check_context(self, c) -> np.ndarray:
        c = as_context(c)
        if np.any(c < self.low):
            raise ContextRangeError(f"context {c.tolist()} below lower bound {self.low}")
        if np.any(c > self.high):
            raise ContextRangeError(f"context {c.tolist()} above upper bound {self.high}")
        return c

    def instantiate(self, c):
        return self._build(self.check_context(c))

    def _build(self, c):
        raise NotImplementedError

    def default_split(self) -> ContextSplit:
        raise NotImplementedError


# grid actions: up, right, down, left
_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


@dataclass(frozen=True)
class SlipGrid(ContextualFamily):
    """N x N gridworld; the context is the slip probability.

    With probability ``1 - slip`` the intended move happens, otherwise the
    agent moves to one of the two lateral neighbours with equal chance.
    Moves into a wall leave the agent in place.  The goal is absorbing.
    Rewards are per-state (action independent); by default 1 at the goal
    and 0 elsewhere.
    """

    size: int = 5
    goal: int | None = None
    gamma: float = 0.9
    state_rewards: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "family_id", "slipgrid")
        object.__setattr__(self, "low", 0.0)
        object.__setattr__(self, "high", 1.0)
        object.__setattr__(self, "tabular", True)
        # total-variation ground metric: moving slip by delta moves delta mass
        object.__setattr__(self, "declared_L_p", 1.0)
        object.__setattr__(self, "declared_L_r", 0.0)
        if self.goal is None:
            object.__setattr__(self, "goal", self.size * self.size - 1)

    @property
    def n_states(self) -> int:
        return self.size * self.size

    def _step_target(self, s, move):
        r, c = divmod(s, self.size)
        dr, dc = _MOVES[move]
        nr, nc = r + dr, c + dc
        if 0 <= nr < self.size and 0 <= nc < self.size:
            return nr * self.size + nc
        return s

    def _build(self, c):
        slip = float(c[0])
        S = self.n_states
        P = np.zeros((S, 4, S))
        for s in range(S):
            for a in range(4):
                if s == self.goal:
                    P[s, a, s] = 1.0
                    continue
                P[s, a, self._step_target(s, a)] += 1.0 - slip
                P[s, a, self._step_target(s, (a + 1) % 4)] += slip / 2
                P[s, a, self._step_target(s, (a + 3) % 4)] += slip / 2
        if self.state_rewards is None:
            r = np.zeros(S)
            r[self.goal] = 1.0
        else:
            r = np.asarray(self.state_rewards, dtype=np.float64)
        R = np.repeat(r[:, None], 4, axis=1)
        return TabularMDP(P, R, self.gamma)

    def default_split(self) -> ContextSplit:
        return ContextSplit((0.10, 0.15, 0.20, 0.25, 0.40, 0.45), (0.30, 0.35),
                            (0.02, 0.05, 0.55, 0.60))

    def observation(self, s: int) -> np.ndarray:
        r, c = divmod(int(s), self.size)
        return np.array([r, c], dtype=np.float64) / max(1, self.size - 1)


@dataclass(frozen=True)
class AbsorbingRewardFamily(ContextualFamily):
    """Single absorbing state whose reward equals the context."""

    gamma: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "family_id", "absorbing")
        object.__setattr__(self, "low", 0.0)
        object.__setattr__(self, "high", 1.0)
        object.__setattr__(self, "tabular", True)
        object.__setattr__(self, "declared_L_p", 0.0)
        object.__setattr__(self, "declared_L_r", 1.0)

    def _build(self, c):
        return TabularMDP(np.ones((1, 1, 1)), np.array([[float(c[0])]]), self.gamma)

    def default_split(self) -> ContextSplit:
        return ContextSplit((0.2, 0.4, 0.6), (0.5,), (0.1, 0.9))


@dataclass(frozen=True)
class ConstantFamily(ContextualFamily):
    """Wraps one fixed MDP; the context is ignored."""

    mdp: TabularMDP | None = None

    def __post_init__(self):
        object.__setattr__(self, "family_id", "constant")
        object.__setattr__(self, "low", 0.0)
        object.__setattr__(self, "high", 1.0)
        object.__setattr__(self, "tabular", True)
        object.__setattr__(self, "declared_L_p", 0.0)
        object.__setattr__(self, "declared_L_r", 0.0)

    def _build(self, c):
        return self.mdp

    def default_split(self) -> ContextSplit:
        return ContextSplit((0.2, 0.4, 0.6), (0.5,), (0.1, 0.9))


def random_slipgrid(rng, gamma=0.9, sizes=(3, 4, 5)) -> SlipGrid:
    """SlipGrid with random size, goal and sparse random state rewards."""
    n = int(rng.choice(sizes))
    S = n * n
    goal = int(rng.integers(S))
    rewards = np.where(rng.random(S) < 0.3, rng.random(S) * 0.5, 0.0)
    rewards[goal] = 1.0
    return SlipGrid(size=n, goal=goal, gamma=gamma, state_rewards=tuple(rewards.tolist()))


def mdp_digest(mdp: TabularMDP) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mdp.transition).tobytes())
    h.update(np.ascontiguousarray(mdp.reward).tobytes())
    h.update(np.float64(mdp.gamma).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# continuous point-mass environments


class ContinuousEnv:
    """2-D point mass in the box [-1, 1]^2 with a discretized force grid.

    State is ``(x, y, vx, vy)``; actions are indices into a per-dimension
    grid of ``action_levels`` forces in [-1, 1].
    """

    dt = 0.1
    force = 2.0
    uses_reward_obs = False

    def __init__(self, context, obs_map: BlockObservationMap, horizon=40, action_levels=7,
                 process_noise=0.0):
        self.context = float(as_context(context)[0])
        self.obs_map = obs_map
        self.horizon = horizon
        levels = np.linspace(-1.0, 1.0, action_levels)
        self.action_grid = np.array([(u, v) for u in levels for v in levels])
        self.process_noise = process_noise
        self.state = np.zeros(4)
        self.t = 0
        self.last_reward = 0.0
        self.rng = np.random.default_rng(0)

    @property
    def n_actions(self) -> int:
        return len(self.action_grid)

    @property
    def obs_dim(self) -> int:
        return self.obs_map.obs_dim + (1 if self.uses_reward_obs else 0)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.rng = rng
        self.state = self._initial_state(rng)
        self.t = 0
        self.last_reward = 0.0
        return self._obs()

    def _obs(self):
        o = self.obs_map.observe(self.state, self.rng)
        if self.uses_reward_obs:
            o = np.append(o, self.last_reward)
        return o

    def dynamics(self, state, force):
        """Batched deterministic dynamics; ``state`` (..., 4), ``force`` (..., 2)."""
        pos, vel = state[..., :2], state[..., 2:]
        vel = vel + self.dt * (self.force * force - self.drag * vel)
        pos = pos + self.dt * vel
        hit = np.abs(pos) > 1.0
        pos = np.clip(pos, -1.0, 1.0)
        vel = np.where(hit, 0.0, vel)
        return np.concatenate([pos, vel], axis=-1)

    def step(self, action: int):
        nxt = self.dynamics(self.state, self.action_grid[action])
        if self.process_noise:
            nxt[2:] += self.process_noise * self.rng.standard_normal(2)
        r = float(self.reward_fn(self.state, nxt))
        self.state = nxt
        self.t += 1
        self.last_reward = r
        return self._obs(), r, self.t >= self.horizon


class DragPointMass(ContinuousEnv):
    """Reach the origin; the context is the linear drag coefficient."""

    sigma = 0.3

    @property
    def drag(self):
        return self.context

    def _initial_state(self, rng):
        ang = rng.uniform(0, 2 * np.pi)
        return np.array([0.8 * np.cos(ang), 0.8 * np.sin(ang), 0.0, 0.0])

    def reward_fn(self, state, nxt):
        return np.exp(-np.sum(nxt[..., :2] ** 2, axis=-1) / self.sigma ** 2)


class TargetVelocityPointMass(ContinuousEnv):
    """Track a horizontal target velocity given by the context."""

    sigma = 0.5
    drag = 0.5
    uses_reward_obs = True

    def _initial_state(self, rng):
        return np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 0.0, 0.0])

    def dynamics(self, state, force):
        vel = state[..., 2:] + self.dt * (self.force * force - self.drag * state[..., 2:])
        pos = state[..., :2] + self.dt * vel
        # x wraps around so a constant velocity can be held for the whole horizon
        x = (pos[..., :1] + 1.0) % 2.0 - 1.0
        hit = np.abs(pos[..., 1:]) > 1.0
        y = np.clip(pos[..., 1:], -1.0, 1.0)
        vy = np.where(hit, 0.0, vel[..., 1:])
        return np.concatenate([x, y, vel[..., :1], vy], axis=-1)

    def reward_fn(self, state, nxt):
        return np.exp(-(nxt[..., 2] - self.context) ** 2 / self.sigma ** 2)


def default_obs_map(n_distractors=2, noise_scale=0.1) -> BlockObservationMap:
    return BlockObservationMap(np.eye(4), n_distractors, noise_scale)


@dataclass(frozen=True)
class PointMassFamily(ContextualFamily):
    """Continuous family producing ``ContinuousEnv`` instances."""

    kind: str = "dragpointmass"
    horizon: int = 40
    action_levels: int = 7
    n_distractors: int = 2
    noise_scale: float = 0.1
    process_noise: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "family_id", self.kind)
        if self.kind == "dragpointmass":
            object.__setattr__(self, "low", 0.0)
            object.__setattr__(self, "high", 10.0)
        elif self.kind == "targetvelocity":
            object.__setattr__(self, "low", -3.0)
            object.__setattr__(self, "high", 3.0)
        else:
            raise ValidationError(f"unknown point-mass family {self.kind!r}")

    @property
    def obs_map(self) -> BlockObservationMap:
        return default_obs_map(self.n_distractors, self.noise_scale)

    def _build(self, c):
        cls = DragPointMass if self.kind == "dragpointmass" else TargetVelocityPointMass
        return cls(c, self.obs_map, self.horizon, self.action_levels, self.process_noise)

    def default_split(self) -> ContextSplit:
        if self.kind == "dragpointmass":
            return ContextSplit((1.0, 1.5, 2.0, 2.5, 4.0, 4.5), (3.0, 3.5),
                                (0.25, 0.5, 5.5, 6.5))
        return ContextSplit((-1.0, -0.5, 0.5, 1.0, 1.5, 2.0), (0.0, 0.25),
                            (-2.0, -1.5, 2.5, 3.0))


def make_family(family_id: str, **kwargs) -> ContextualFamily:
    """Look up a built-in family by its string id."""
    if family_id == "slipgrid":
        return SlipGrid(**kwargs)
    if family_id in ("dragpointmass", "targetvelocity"):
        return PointMassFamily(kind=family_id, **kwargs)
    if family_id == "absorbing":
        return AbsorbingRewardFamily(**kwargs)
    raise ValidationError(f"unknown family id {family_id!r}")
