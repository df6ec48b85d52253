"""Saving and loading trained policies in the shared container format."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rcorl import container
from rcorl.datasets import NormStats
from rcorl.envs import FeatureSpec
from rcorl.exceptions import ContractError, FormatError, NotFittedError
from rcorl.neural import Mlp

POLICY_KIND = "rcorl.policy"
POLICY_SCHEMA = 1


@dataclass
class ActorPolicy:
    """Deterministic continuous policy: ``actor(normalizer(obs))``."""

    actor: Mlp
    normalizer: NormStats
    spec: FeatureSpec

    def predict(self, obs) -> np.ndarray:
        return self.actor.forward(self.normalizer(obs))

    def act(self, obs, rng=None) -> np.ndarray:
        return self.predict(obs)

    def as_teacher(self):
        from rcorl.continuous import TeacherPolicy

        if not self.spec.is_full:
            raise ContractError("only a full-feature policy can act as a teacher")
        return TeacherPolicy(self.actor, self.normalizer, self.spec)


@dataclass
class PredictivePolicy:
    """Feature predictor from the constrained view followed by a rich-state actor."""

    predictor: Mlp
    x_stats: NormStats
    y_stats: NormStats
    actor: Mlp
    normalizer: NormStats
    spec: FeatureSpec

    def predict(self, obs) -> np.ndarray:
        rich = self.predictor.forward(self.x_stats(obs)) * self.y_stats.std + self.y_stats.mean
        return self.actor.forward(self.normalizer(rich))

    def act(self, obs, rng=None) -> np.ndarray:
        return self.predict(obs)


@dataclass
class QPolicy:
    """Epsilon-greedy discrete policy over ``q(normalizer(obs))``."""

    q: Mlp
    normalizer: NormStats
    spec: FeatureSpec
    epsilon: float = 0.001

    def q_values(self, obs) -> np.ndarray:
        return self.q.forward(self.normalizer(obs))

    def predict(self, obs):
        out = np.argmax(self.q_values(np.atleast_2d(obs)), axis=1)
        return int(out[0]) if np.ndim(obs) == 1 else out

    def act(self, obs, rng=None):
        from rcorl.discrete import greedy_action

        return greedy_action(self, obs, self.epsilon, rng if rng is not None else np.random.default_rng())

    def as_teacher(self):
        from rcorl.discrete import TeacherQ

        if not self.spec.is_full:
            raise ContractError("only a full-feature policy can act as a teacher")
        return TeacherQ(self.q, self.normalizer, self.spec)


def to_policy(estimator):
    """Plain policy object holding only what acting needs."""
    from rcorl.continuous import TD3BC, PredictiveTD3BC, TeacherPolicy, TrueBC
    from rcorl.discrete import DiscreteCQL, TeacherQ

    if isinstance(estimator, (ActorPolicy, PredictivePolicy, QPolicy)):
        return estimator
    if isinstance(estimator, TeacherPolicy):
        return ActorPolicy(estimator.actor, estimator.normalizer, estimator.spec)
    if isinstance(estimator, TeacherQ):
        return QPolicy(estimator.q, estimator.normalizer, estimator.spec)
    if not any(hasattr(estimator, a) for a in ("agent_", "actor_")):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted")
    if isinstance(estimator, PredictiveTD3BC):
        pred, agent = estimator.predictor_, estimator.agent_
        return PredictivePolicy(pred.net_, pred.x_stats_, pred.y_stats_, agent.agent_.actor,
                                agent.normalizer_, estimator.spec_)
    if isinstance(estimator, TD3BC):
        return ActorPolicy(estimator.agent_.actor, estimator.normalizer_, estimator.spec_)
    if isinstance(estimator, TrueBC):
        return ActorPolicy(estimator.actor_, estimator.normalizer_, estimator.spec_)
    if isinstance(estimator, DiscreteCQL):
        return QPolicy(estimator.agent_.q, estimator.agent_.normalizer, estimator.spec_, estimator.epsilon_eval)
    raise ContractError(f"cannot save a {type(estimator).__name__}")


def _stats_arrays(stats: NormStats, prefix: str) -> dict:
    return {f"{prefix}mean": stats.mean, f"{prefix}std": stats.std}


def _stats(arrays: dict, prefix: str) -> NormStats:
    return NormStats(arrays[f"{prefix}mean"], arrays[f"{prefix}std"])


def policy_payload(estimator, extra: dict | None = None) -> tuple[dict, dict]:
    policy = to_policy(estimator)
    manifest = {"kind": POLICY_KIND, "schema": POLICY_SCHEMA, "spec": policy.spec.to_dict(), "extra": extra or {}}
    arrays = {}
    if isinstance(policy, ActorPolicy):
        manifest.update(policy_type="actor", actor=policy.actor.manifest())
        arrays.update(policy.actor.arrays("actor."))
        arrays.update(_stats_arrays(policy.normalizer, "norm."))
    elif isinstance(policy, PredictivePolicy):
        manifest.update(policy_type="predictive", actor=policy.actor.manifest(), predictor=policy.predictor.manifest())
        arrays.update(policy.actor.arrays("actor."))
        arrays.update(policy.predictor.arrays("predictor."))
        arrays.update(_stats_arrays(policy.normalizer, "norm."))
        arrays.update(_stats_arrays(policy.x_stats, "x."))
        arrays.update(_stats_arrays(policy.y_stats, "y."))
    else:
        manifest.update(policy_type="q", q=policy.q.manifest(), epsilon=policy.epsilon)
        arrays.update(policy.q.arrays("q."))
        arrays.update(_stats_arrays(policy.normalizer, "norm."))
    return manifest, arrays


def save_policy(estimator, path, extra: dict | None = None):
    manifest, arrays = policy_payload(estimator, extra)
    return container.write(path, manifest, arrays)


def policy_from_payload(manifest: dict, arrays: dict):
    if manifest.get("kind") != POLICY_KIND:
        raise FormatError("container does not hold a policy")
    if manifest.get("schema") != POLICY_SCHEMA:
        raise FormatError(f"policy schema {manifest.get('schema')} is not supported")
    spec = FeatureSpec.from_dict(manifest["spec"])
    kind = manifest["policy_type"]
    if kind == "actor":
        return ActorPolicy(Mlp.from_arrays(manifest["actor"], arrays, "actor."), _stats(arrays, "norm."), spec)
    if kind == "predictive":
        return PredictivePolicy(
            Mlp.from_arrays(manifest["predictor"], arrays, "predictor."), _stats(arrays, "x."), _stats(arrays, "y."),
            Mlp.from_arrays(manifest["actor"], arrays, "actor."), _stats(arrays, "norm."), spec,
        )
    if kind == "q":
        return QPolicy(Mlp.from_arrays(manifest["q"], arrays, "q."), _stats(arrays, "norm."), spec, manifest["epsilon"])
    raise FormatError(f"unknown policy type {kind!r}")


def load_policy(path):
    return policy_from_payload(*container.read(path))
