"""Offline transition storage, state normalisation and the dataset file format."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from rcorl import container
from rcorl.envs import FeatureSpec, env_manifest
from rcorl.exceptions import ContractError, FormatError

DIFFICULTIES = ("medium_replay", "medium", "medium_expert", "expert")
STD_FLOOR = 1e-3
DATASET_KIND = "rcorl.offline_dataset"
DATASET_SCHEMA = 1


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    terminal: bool = False


@dataclass(frozen=True)
class NormStats:
    """Per-feature mean and floored standard deviation of the rich state."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.std):
            raise ContractError("mean and std must have the same shape")
        if not np.all(np.asarray(self.std) > 0):
            raise ContractError("std must be strictly positive")

    def __call__(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def restrict(self, spec: FeatureSpec) -> "NormStats":
        """Statistics for the constrained view described by ``spec``.

        For an index mask this is plain restriction. For pixelation the
        statistics of the averaged view cannot be derived from per-pixel
        moments, so the identity normaliser is returned.
        """
        if spec.kind == "index_mask":
            return NormStats(spec.restrict(self.mean), spec.restrict(self.std))
        return NormStats(np.zeros(spec.dim), np.ones(spec.dim))

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(np.zeros(dim), np.ones(dim))

    def __eq__(self, other):
        return isinstance(other, NormStats) and np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)

    __hash__ = None


@dataclass(eq=False)
class OfflineDataset:
    """Logged transitions carrying the full rich state.

    ``terminals`` mark true environment terminations (no bootstrapping);
    ``timeouts`` mark horizon truncations. Either one ends an episode.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    terminals: np.ndarray
    timeouts: np.ndarray
    feature_spec: FeatureSpec
    difficulty: str = "medium_replay"
    env_manifest: dict = field(default_factory=dict)
    norm_stats: NormStats | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n_full = self.feature_spec.full_dim
        self.observations = np.asarray(self.observations, dtype=np.float64).reshape(-1, n_full)
        self.next_observations = np.asarray(self.next_observations, dtype=np.float64).reshape(-1, n_full)
        n = self.observations.shape[0]
        actions = np.asarray(self.actions, dtype=np.float64)
        if actions.ndim != 2:
            actions = actions.reshape(n, -1) if n else actions.reshape(0, 1)
        self.actions = actions
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(n)
        self.terminals = np.asarray(self.terminals, dtype=bool).reshape(n)
        self.timeouts = np.asarray(self.timeouts, dtype=bool).reshape(n)
        if self.next_observations.shape[0] != n or self.actions.shape[0] != n:
            raise ContractError("all transition arrays must have the same length")
        if not np.all(np.isfinite(self.rewards)):
            raise ContractError("rewards must be finite")
        if self.difficulty not in DIFFICULTIES:
            raise ContractError(f"unknown difficulty {self.difficulty!r}")

    def __len__(self) -> int:
        return self.observations.shape[0]

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            self.observations[i], self.actions[i], float(self.rewards[i]),
            self.next_observations[i], bool(self.dones[i]), bool(self.terminals[i]),
        )

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    @property
    def dones(self) -> np.ndarray:
        return self.terminals | self.timeouts

    @property
    def discrete(self) -> bool:
        return self.env_manifest.get("action_kind") == "discrete"

    @property
    def limited_observations(self) -> np.ndarray:
        return self.feature_spec.project(self.observations)

    @property
    def limited_next_observations(self) -> np.ndarray:
        return self.feature_spec.project(self.next_observations)

    def episode_starts(self) -> np.ndarray:
        """Indices of the first transition of every episode."""
        if len(self) == 0:
            return np.zeros(0, dtype=int)
        starts = np.concatenate([[True], self.dones[:-1]])
        return np.flatnonzero(starts)

    def episode_returns(self) -> np.ndarray:
        """Undiscounted return of each episode, a trailing partial episode included."""
        if len(self) == 0:
            return np.zeros(0)
        starts = self.episode_starts()
        return np.add.reduceat(self.rewards, starts)

    def with_spec(self, spec: FeatureSpec) -> "OfflineDataset":
        if spec.full_dim != self.feature_spec.full_dim:
            raise ContractError("replacement spec has a different full_dim")
        return replace(self, feature_spec=spec)

    def subset(self, index) -> "OfflineDataset":
        index = np.asarray(index)
        return replace(
            self,
            observations=self.observations[index],
            actions=self.actions[index],
            rewards=self.rewards[index],
            next_observations=self.next_observations[index],
            terminals=self.terminals[index],
            timeouts=self.timeouts[index],
        )

    @classmethod
    def from_transitions(cls, transitions, feature_spec: FeatureSpec, action_dim: int, **kwargs) -> "OfflineDataset":
        transitions = list(transitions)
        n_full = feature_spec.full_dim
        if not transitions:
            return cls(
                np.zeros((0, n_full)), np.zeros((0, action_dim)), np.zeros(0), np.zeros((0, n_full)),
                np.zeros(0, bool), np.zeros(0, bool), feature_spec, **kwargs,
            )
        return cls(
            np.stack([t.s for t in transitions]),
            np.stack([np.atleast_1d(t.a) for t in transitions]).reshape(len(transitions), action_dim),
            np.array([t.r for t in transitions]),
            np.stack([t.s_next for t in transitions]),
            np.array([t.terminal for t in transitions]),
            np.array([t.done and not t.terminal for t in transitions]),
            feature_spec,
            **kwargs,
        )

    def structurally_equal(self, other: "OfflineDataset") -> bool:
        arrays = ("observations", "actions", "rewards", "next_observations", "terminals", "timeouts")
        return (
            all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and self.feature_spec == other.feature_spec
            and self.difficulty == other.difficulty
            and self.env_manifest == other.env_manifest
            and self.norm_stats == other.norm_stats
            and self.provenance == other.provenance
        )


def concatenate(first: OfflineDataset, second: OfflineDataset, difficulty: str, provenance: dict | None = None) -> OfflineDataset:
    if first.feature_spec != second.feature_spec:
        raise ContractError("cannot concatenate datasets with different feature specs")
    return OfflineDataset(
        np.concatenate([first.observations, second.observations]),
        np.concatenate([first.actions, second.actions]),
        np.concatenate([first.rewards, second.rewards]),
        np.concatenate([first.next_observations, second.next_observations]),
        np.concatenate([first.terminals, second.terminals]),
        np.concatenate([first.timeouts, second.timeouts]),
        first.feature_spec,
        difficulty,
        dict(first.env_manifest),
        None,
        provenance if provenance is not None else {},
    )


def compute_norm_stats(observations: np.ndarray) -> NormStats:
    observations = np.asarray(observations, dtype=np.float64)
    if observations.shape[0] == 0:
        raise ContractError("cannot normalise an empty dataset")
    return NormStats(observations.mean(axis=0), np.maximum(observations.std(axis=0), STD_FLOOR))


def normalize_states(dataset: OfflineDataset):
    """Attach rich-state statistics and return ``(dataset, normalizer)``.

    The normaliser maps ``x -> (x - mean) / max(std, 1e-3)`` on rich states;
    use ``normalizer.restrict(spec)`` for a constrained view.
    """
    if len(dataset) == 0:
        raise ContractError("cannot normalise an empty dataset")
    stats = compute_norm_stats(dataset.observations)
    return replace(dataset, norm_stats=stats), stats


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------


def dataset_arrays(dataset: OfflineDataset) -> dict[str, np.ndarray]:
    arrays = {
        "observations": dataset.observations,
        "actions": dataset.actions,
        "rewards": dataset.rewards,
        "next_observations": dataset.next_observations,
        "terminals": dataset.terminals.astype(np.float64),
        "timeouts": dataset.timeouts.astype(np.float64),
    }
    if dataset.norm_stats is not None:
        arrays["norm_mean"] = dataset.norm_stats.mean
        arrays["norm_std"] = dataset.norm_stats.std
    return arrays


def save_dataset(dataset: OfflineDataset, path):
    manifest = {
        "kind": DATASET_KIND,
        "schema": DATASET_SCHEMA,
        "difficulty": dataset.difficulty,
        "feature_spec": dataset.feature_spec.to_dict(),
        "env": dataset.env_manifest,
        "provenance": dataset.provenance,
        "action_dim": int(dataset.actions.shape[1]),
        "has_norm_stats": dataset.norm_stats is not None,
    }
    return container.write(path, manifest, dataset_arrays(dataset))


def load_dataset(path) -> OfflineDataset:
    manifest, arrays = container.read(path)
    if manifest.get("kind") != DATASET_KIND:
        raise FormatError(f"{path} does not hold an offline dataset")
    if manifest.get("schema") != DATASET_SCHEMA:
        raise FormatError(f"dataset schema {manifest.get('schema')} is not supported")
    stats = NormStats(arrays["norm_mean"], arrays["norm_std"]) if manifest["has_norm_stats"] else None
    spec = FeatureSpec.from_dict(manifest["feature_spec"])
    return OfflineDataset(
        arrays["observations"],
        arrays["actions"].reshape(-1, manifest["action_dim"]),
        arrays["rewards"],
        arrays["next_observations"],
        arrays["terminals"] > 0.5,
        arrays["timeouts"] > 0.5,
        spec,
        manifest["difficulty"],
        manifest["env"],
        stats,
        manifest["provenance"],
    )


def empty_dataset(env_id: str, spec: FeatureSpec, difficulty: str = "medium_replay") -> OfflineDataset:
    m = env_manifest(env_id)
    action_dim = m.get("action_dim", 1)
    return OfflineDataset.from_transitions([], spec, action_dim, difficulty=difficulty, env_manifest=m)
