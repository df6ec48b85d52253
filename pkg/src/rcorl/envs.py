"""Toy environments that expose a rich state and a constrained view of it.

``point_reach`` is a 2-D point mass that must reach a goal; its 11 raw
features are::

    0-1   position (x, y)
    2-3   velocity (vx, vy)
    4-5   goal minus position
    6     distance to goal
    7-10  distance to the right, left, top and bottom walls

``grid_pix`` is a 24x24 single-channel image of a walled grid with an agent
and a target cell. Its constrained view is the image block-averaged to 6x6
and blown back up to 24x24.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from rcorl.exceptions import ContractError

ENV_IDS = ("point_reach", "grid_pix")

POINT_REACH = {
    "dt": 0.1,
    "v_max": 1.0,
    "arena_bound": 1.0,
    "goal_radius": 0.1,
    "goal_bonus": 10.0,
    "horizon": 200,
    "start_bound": 0.9,
    "min_start_distance": 0.2,
    "full_dim": 11,
    "action_dim": 2,
}
POINT_REACH_DIMS = (5, 7, 9, 10)

GRID_PIX = {
    "grid_side": 24,
    "coarse_side": 6,
    "horizon": 100,
    "step_reward": -0.05,
    "target_reward": 1.0,
    "wall_value": 0.3,
    "target_value": 0.6,
    "agent_value": 1.0,
    "full_dim": 24 * 24,
    "n_actions": 5,
}
GRID_ACTIONS = ("up", "down", "left", "right", "stay")
_GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))


def env_manifest(env_id: str) -> dict:
    """Machine-readable constants, embedded in every dataset file."""
    if env_id == "point_reach":
        return {"env_id": env_id, "action_kind": "continuous", **POINT_REACH}
    if env_id == "grid_pix":
        return {"env_id": env_id, "action_kind": "discrete", "actions": list(GRID_ACTIONS), **GRID_PIX}
    raise ContractError(f"unknown env_id {env_id!r}")


def full_dim(env_id: str) -> int:
    return env_manifest(env_id)["full_dim"]


# ---------------------------------------------------------------------------
# Feature specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpec:
    """Deterministic projection from the rich state to the constrained view."""

    kind: str
    full_dim: int
    mask: tuple = ()
    mask_seed: int | None = None
    grid_side: int | None = None
    coarse_side: int | None = None
    env_id: str | None = None

    def __post_init__(self):
        if self.kind == "index_mask":
            mask = tuple(int(i) for i in self.mask)
            object.__setattr__(self, "mask", mask)
            if not mask:
                raise ContractError("index mask must keep at least one feature")
            if list(mask) != sorted(set(mask)) or mask[0] < 0 or mask[-1] >= self.full_dim:
                raise ContractError(f"mask {mask} must be sorted, unique and inside [0, {self.full_dim})")
        elif self.kind == "pixelate":
            if not self.grid_side or not self.coarse_side or self.grid_side % self.coarse_side:
                raise ContractError("pixelate needs coarse_side dividing grid_side")
            if self.grid_side**2 != self.full_dim:
                raise ContractError("pixelate full_dim must equal grid_side**2")
        else:
            raise ContractError(f"unknown feature spec kind {self.kind!r}")

    @property
    def dim(self) -> int:
        """Width of the constrained view."""
        return len(self.mask) if self.kind == "index_mask" else self.full_dim

    @property
    def is_full(self) -> bool:
        return self.kind == "index_mask" and len(self.mask) == self.full_dim

    def project(self, raw) -> np.ndarray:
        """Apply the projection to one raw vector or a batch of them."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1:] != (self.full_dim,):
            raise ContractError(f"spec expects raw width {self.full_dim}, got shape {raw.shape}")
        if self.kind == "index_mask":
            return raw[..., list(self.mask)]
        g, c = self.grid_side, self.coarse_side
        f = g // c
        lead = raw.shape[:-1]
        blocks = raw.reshape(lead + (c, f, c, f)).mean(axis=(-3, -1))
        return np.repeat(np.repeat(blocks, f, axis=-2), f, axis=-1).reshape(lead + (self.full_dim,))

    def restrict(self, values) -> np.ndarray:
        """Restrict per-feature statistics (e.g. a mean vector) to the view."""
        values = np.asarray(values, dtype=np.float64)
        if self.kind == "index_mask":
            return values[..., list(self.mask)]
        return self.project(values)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "full_dim": self.full_dim,
            "mask": list(self.mask),
            "mask_seed": self.mask_seed,
            "grid_side": self.grid_side,
            "coarse_side": self.coarse_side,
            "env_id": self.env_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(
            kind=d["kind"],
            full_dim=int(d["full_dim"]),
            mask=tuple(d.get("mask") or ()),
            mask_seed=d.get("mask_seed"),
            grid_side=d.get("grid_side"),
            coarse_side=d.get("coarse_side"),
            env_id=d.get("env_id"),
        )


def full_spec(env_id: str) -> FeatureSpec:
    n = full_dim(env_id)
    return FeatureSpec("index_mask", n, tuple(range(n)), env_id=env_id)


def make_feature_spec(env_id: str, constrained_dim: int | None = None, mask_seed: int = 0) -> FeatureSpec:
    """Seeded feature-dropping spec (``point_reach``) or pixelation spec (``grid_pix``).

    The kept indices are drawn without replacement from
    ``np.random.default_rng(mask_seed)`` and sorted.
    """
    manifest = env_manifest(env_id)
    n = manifest["full_dim"]
    if env_id == "grid_pix":
        return FeatureSpec(
            "pixelate", n, mask_seed=mask_seed,
            grid_side=manifest["grid_side"], coarse_side=manifest["coarse_side"], env_id=env_id,
        )
    if constrained_dim is None:
        constrained_dim = n
    constrained_dim = int(constrained_dim)
    if not 1 <= constrained_dim <= n:
        raise ContractError(f"constrained_dim {constrained_dim} outside [1, {n}] for {env_id}")
    rng = np.random.default_rng(mask_seed)
    mask = tuple(sorted(int(i) for i in rng.choice(n, size=constrained_dim, replace=False)))
    return FeatureSpec("index_mask", n, mask, mask_seed=mask_seed, env_id=env_id)


class FeatureProjector(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapper around :meth:`FeatureSpec.project`."""

    def __init__(self, spec: FeatureSpec | None = None):
        self.spec = spec

    def fit(self, X=None, y=None):
        if self.spec is None:
            raise ContractError("FeatureProjector needs a spec")
        return self

    def transform(self, X):
        return self.spec.project(X)


# ---------------------------------------------------------------------------
# Environment state and dynamics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnvState:
    env_id: str
    raw: np.ndarray
    step_index: int = 0
    internals: dict = field(default_factory=dict)
    seed: int | None = None

    def __eq__(self, other):
        return (
            isinstance(other, EnvState)
            and self.env_id == other.env_id
            and self.step_index == other.step_index
            and np.array_equal(self.raw, other.raw)
        )

    __hash__ = None


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    done: bool
    terminal: bool = False


class PointReach:
    env_id = "point_reach"
    full_dim = POINT_REACH["full_dim"]
    action_dim = POINT_REACH["action_dim"]
    horizon = POINT_REACH["horizon"]
    discrete = False

    def __init__(self, **overrides):
        self.c = {**POINT_REACH, **overrides}

    def raw_features(self, pos: np.ndarray, vel: np.ndarray, goal: np.ndarray) -> np.ndarray:
        rel = goal - pos
        bound = self.c["arena_bound"]
        return np.array([
            pos[0], pos[1], vel[0], vel[1], rel[0], rel[1],
            np.sqrt(rel[0] * rel[0] + rel[1] * rel[1]),
            bound - pos[0], bound + pos[0], bound - pos[1], bound + pos[1],
        ])

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng(seed)
        lim = self.c["start_bound"]
        pos = rng.uniform(-lim, lim, size=2)
        goal = rng.uniform(-lim, lim, size=2)
        while np.linalg.norm(goal - pos) <= self.c["min_start_distance"]:
            goal = rng.uniform(-lim, lim, size=2)
        vel = np.zeros(2)
        return EnvState(self.env_id, self.raw_features(pos, vel, goal), 0, {"goal": goal}, seed)

    def step(self, state: EnvState, action) -> StepResult:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (2,) or not np.all(np.isfinite(a)) or np.any(np.abs(a) > 1.0):
            raise ContractError(f"point_reach action must lie in [-1, 1]^2, got {action!r}")
        c = self.c
        pos, vel = state.raw[0:2], state.raw[2:4]
        goal = state.internals["goal"]
        vel = np.clip(vel + a * c["dt"], -c["v_max"], c["v_max"])
        pos = np.clip(pos + vel * c["dt"], -c["arena_bound"], c["arena_bound"])
        raw = self.raw_features(pos, vel, goal)
        dist = raw[6]
        reward = -float(dist)
        terminal = bool(dist < c["goal_radius"])
        if terminal:
            reward += c["goal_bonus"]
        t = state.step_index + 1
        done = terminal or t >= c["horizon"]
        return StepResult(EnvState(self.env_id, raw, t, state.internals, state.seed), reward, done, terminal)

    def sample_action(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=2)


class GridPix:
    env_id = "grid_pix"
    full_dim = GRID_PIX["full_dim"]
    n_actions = GRID_PIX["n_actions"]
    horizon = GRID_PIX["horizon"]
    discrete = True

    def __init__(self, **overrides):
        self.c = {**GRID_PIX, **overrides}
        g = self.c["grid_side"]
        base = np.zeros((g, g))
        base[0, :] = base[-1, :] = base[:, 0] = base[:, -1] = self.c["wall_value"]
        self._background = base

    def is_wall(self, row: int, col: int) -> bool:
        g = self.c["grid_side"]
        return row <= 0 or col <= 0 or row >= g - 1 or col >= g - 1

    def place(self, seed: int) -> tuple[tuple[int, int], tuple[int, int]]:
        """Agent and target cells: each coordinate from ``rng.integers(1, g - 1)``, target redrawn on collision."""
        g = self.c["grid_side"]
        rng = np.random.default_rng(seed)
        agent = tuple(int(v) for v in rng.integers(1, g - 1, size=2))
        target = tuple(int(v) for v in rng.integers(1, g - 1, size=2))
        while target == agent:
            target = tuple(int(v) for v in rng.integers(1, g - 1, size=2))
        return agent, target

    def render(self, agent, target) -> np.ndarray:
        img = self._background.copy()
        img[target] = self.c["target_value"]
        img[agent] = self.c["agent_value"]
        return img.reshape(-1)

    def reset(self, seed: int) -> EnvState:
        agent, target = self.place(seed)
        return EnvState(self.env_id, self.render(agent, target), 0, {"agent": agent, "target": target}, seed)

    def step(self, state: EnvState, action) -> StepResult:
        if isinstance(action, str):
            if action not in GRID_ACTIONS:
                raise ContractError(f"unknown grid_pix action {action!r}")
            action = GRID_ACTIONS.index(action)
        a = np.asarray(action).reshape(-1)
        if a.size != 1 or a[0] != int(a[0]) or not 0 <= int(a[0]) < self.n_actions:
            raise ContractError(f"grid_pix action must be an index in [0, {self.n_actions}), got {action!r}")
        dr, dc = _GRID_MOVES[int(a[0])]
        r, col = state.internals["agent"]
        target = state.internals["target"]
        if not self.is_wall(r + dr, col + dc):
            r, col = r + dr, col + dc
        agent = (r, col)
        terminal = agent == target
        reward = self.c["step_reward"] + (self.c["target_reward"] if terminal else 0.0)
        t = state.step_index + 1
        done = terminal or t >= self.c["horizon"]
        internals = {"agent": agent, "target": target}
        return StepResult(EnvState(self.env_id, self.render(agent, target), t, internals, state.seed), reward, done, terminal)

    def sample_action(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.n_actions))


def make_env(env_id: str):
    if env_id == "point_reach":
        return PointReach()
    if env_id == "grid_pix":
        return GridPix()
    raise ContractError(f"unknown env_id {env_id!r}")


_ENVS = {"point_reach": PointReach(), "grid_pix": GridPix()}


def env_reset(env_id: str, seed: int) -> EnvState:
    if env_id not in _ENVS:
        raise ContractError(f"unknown env_id {env_id!r}")
    return _ENVS[env_id].reset(seed)


def env_step(state: EnvState, action) -> StepResult:
    return _ENVS[state.env_id].step(state, action)


def observe(state: EnvState, spec: FeatureSpec) -> np.ndarray:
    if spec.env_id is not None and spec.env_id != state.env_id:
        raise ContractError(f"spec for {spec.env_id} applied to {state.env_id} state")
    if spec.full_dim != state.raw.shape[0]:
        raise ContractError("spec full_dim does not match the environment")
    return spec.project(state.raw)
