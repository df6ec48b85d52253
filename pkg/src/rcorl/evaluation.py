"""Rollout evaluation, normalised scores and fitted Q evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from rcorl.envs import FeatureSpec, make_env
from rcorl.exceptions import ContractError, EvaluationError, NotFittedError
from rcorl.neural import Mlp, Optimizer, Tape, backprop, mse, weighted_row_sum

log = logging.getLogger(__name__)

EVAL_EPISODES = 10
LAST_ROUNDS = 10
REFERENCE_EPISODES = 100


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


class UniformRandomPolicy:
    def __init__(self, env_id: str):
        self.env = make_env(env_id)

    def act(self, obs, rng):
        return self.env.sample_action(rng)


def _policy_fn(policy):
    if hasattr(policy, "act"):
        return policy.act
    if callable(policy):
        return lambda obs, rng: policy(obs)
    raise ContractError(f"{policy!r} is neither callable nor has an act method")


def episode_seeds(round_seed: int, n_episodes: int) -> np.ndarray:
    """Independent per-episode reset seeds derived from one round seed."""
    return np.random.SeedSequence(int(round_seed)).generate_state(n_episodes).astype(np.int64)


def run_episode(policy, env_id: str, spec: FeatureSpec, seed: int, rng: np.random.Generator | None = None) -> float:
    env = make_env(env_id)
    act = _policy_fn(policy)
    rng = rng if rng is not None else np.random.default_rng(seed)
    state = env.reset(int(seed))
    total = 0.0
    for _ in range(env.horizon):
        result = env.step(state, act(spec.project(state.raw), rng))
        total += result.reward
        state = result.next_state
        if result.done:
            break
    # a horizon overrun is impossible by construction; the loop bound is the forced truncation
    return total


def rollout_returns(policy, env_id: str, spec: FeatureSpec, round_seed: int, n_episodes: int = EVAL_EPISODES) -> np.ndarray:
    seeds = episode_seeds(round_seed, n_episodes)
    return np.array([
        run_episode(policy, env_id, spec, s, np.random.default_rng([int(s), 1])) for s in seeds
    ])


def rollout_eval(policy, env_id: str, spec: FeatureSpec, round_seed: int, n_episodes: int = EVAL_EPISODES) -> float:
    """Mean undiscounted return over ``n_episodes`` seeded episodes.

    The policy sees only ``spec.project(state.raw)``.
    """
    return float(rollout_returns(policy, env_id, spec, round_seed, n_episodes).mean())


@dataclass
class RolloutEvaluator:
    """Callable ``(policy, round_index) -> score`` used during training."""

    env_id: str
    spec: FeatureSpec
    seed: int = 0
    n_episodes: int = EVAL_EPISODES

    def round_seed(self, round_index: int) -> int:
        return int(np.random.SeedSequence([int(self.seed), int(round_index)]).generate_state(1)[0])

    def __call__(self, policy, round_index: int) -> float:
        return rollout_eval(policy, self.env_id, self.spec, self.round_seed(round_index), self.n_episodes)


@dataclass
class EvalReport:
    round_scores: list = field(default_factory=list)
    final_score: float = float("nan")
    final_std: float = 0.0
    normalized_score: float | None = None
    rounds_used: int = 0
    short_run: bool = False


def final_score(round_scores, last: int = LAST_ROUNDS) -> tuple[float, int]:
    """Mean of the last ``min(last, rounds)`` evaluation rounds."""
    scores = np.asarray(round_scores, dtype=np.float64)
    if scores.size == 0:
        raise EvaluationError("no evaluation rounds recorded")
    k = min(last, scores.size)
    return float(scores[-k:].mean()), k


def make_report(round_scores, refs: "ReferenceScores | None" = None) -> EvalReport:
    score, used = final_score(round_scores)
    return EvalReport(
        list(map(float, round_scores)),
        score,
        0.0,
        normalized_score(score, refs) if refs is not None else None,
        used,
        used < LAST_ROUNDS,
    )


# ---------------------------------------------------------------------------
# Normalised score
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceScores:
    env_id: str
    random_score: float
    expert_score: float
    seeds: dict = field(default_factory=dict)
    expert_kind: str = "online_td3_full_features"

    def __post_init__(self):
        if not self.expert_score > self.random_score:
            raise EvaluationError(
                f"expert score {self.expert_score} must exceed random score {self.random_score}"
            )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ReferenceScores":
        return cls(**json.loads(text))


def normalized_score(raw: float, refs: ReferenceScores) -> float:
    """``100 * (raw - random) / (expert - random)``; unbounded on both sides."""
    span = refs.expert_score - refs.random_score
    if span == 0:
        raise EvaluationError("degenerate reference scores")
    return 100.0 * (raw - refs.random_score) / span


def random_policy_score(env_id: str, seed: int, n_episodes: int = REFERENCE_EPISODES) -> float:
    from rcorl.envs import full_spec

    return rollout_eval(UniformRandomPolicy(env_id), env_id, full_spec(env_id), seed, n_episodes)


def compute_reference_scores(env_id: str, seed: int = 0, cache_dir=None, online_steps: int | None = None, **train_kwargs) -> ReferenceScores:
    """Random and expert anchors for the normalised score, cached as JSON.

    The expert is an online agent trained on the full feature set (TD3 for
    ``point_reach``, double DQN for ``grid_pix``).
    """
    from rcorl.envs import full_spec

    cache_path = None
    if cache_dir is not None:
        tag = f"{env_id}_seed{seed}_steps{online_steps if online_steps is not None else 'default'}"
        if train_kwargs:
            tag += "_" + "_".join(f"{k}{train_kwargs[k]}" for k in sorted(train_kwargs))
        cache_path = Path(cache_dir) / f"refs_{tag}.json"
        if cache_path.exists():
            return ReferenceScores.from_json(cache_path.read_text())
    spec = full_spec(env_id)
    random_score = random_policy_score(env_id, seed)
    if env_id == "point_reach":
        from rcorl.continuous import Td3Config, td3_online_train

        steps = {} if online_steps is None else {"total_steps": online_steps}
        cfg = Td3Config(**steps, **train_kwargs)
        run = td3_online_train(env_id, spec, cfg, seed)
        expert_kind = "online_td3_full_features"
    else:
        from rcorl.discrete import DqnOnlineConfig, dqn_online_train

        steps = {} if online_steps is None else {"total_steps": online_steps}
        cfg = DqnOnlineConfig(**steps, **train_kwargs)
        run = dqn_online_train(env_id, spec, cfg, seed)
        expert_kind = "online_double_dqn_full_features"
    expert_score = rollout_eval(run.policy, env_id, spec, seed + 1, REFERENCE_EPISODES)
    refs = ReferenceScores(
        env_id, random_score, expert_score,
        {"random_round_seed": seed, "expert_train_seed": seed, "expert_round_seed": seed + 1,
         "online_steps": cfg.total_steps},
        expert_kind,
    )
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_text(refs.to_json())
    return refs


# ---------------------------------------------------------------------------
# Fitted Q evaluation
# ---------------------------------------------------------------------------


@dataclass
class FqeConfig:
    gamma: float = 0.99
    iterations: int = 50
    batch_size: int = 256
    steps_per_iteration: int = 200
    hidden_sizes: tuple = (64, 64)
    learning_rate: float = 1e-3
    q_model: str = "mlp"
    random_state: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError("FQE gamma must lie in [0, 1)")
        if self.q_model not in ("mlp", "linear"):
            raise ContractError(f"unknown FQE q_model {self.q_model!r}")


Q_DIVERGENCE = 1e6


class FittedQEvaluation(BaseEstimator):
    """Environment-free value estimate of a fixed policy.

    Each iteration regresses ``Q(s, a)`` onto ``r + gamma * Q_prev(s', pi(s'))``
    (no bootstrap on terminal rows), starting from ``Q = 0``. The estimate
    is the mean of ``Q(s0, pi(s0))`` over the first transition of every
    episode in the dataset. ``q_model="linear"`` solves each regression
    exactly by least squares; with one-hot observations it is tabular.

    The policy must expose ``act(obs, rng)`` or ``predict(obs)`` over the
    dataset's constrained view; discrete policies are evaluated greedily.
    """

    def __init__(self, policy=None, gamma=0.99, iterations=50, batch_size=256, steps_per_iteration=200,
                 hidden_sizes=(64, 64), learning_rate=1e-3, q_model="mlp", random_state=0):
        self.policy = policy
        self.gamma = gamma
        self.iterations = iterations
        self.batch_size = batch_size
        self.steps_per_iteration = steps_per_iteration
        self.hidden_sizes = hidden_sizes
        self.learning_rate = learning_rate
        self.q_model = q_model
        self.random_state = random_state

    def _greedy_actions(self, obs: np.ndarray) -> np.ndarray:
        policy = self.policy
        if hasattr(policy, "predict"):
            out = policy.predict(obs)
        else:
            fn = _policy_fn(policy)
            rng = np.random.default_rng(0)
            out = np.array([fn(o, rng) for o in obs])
        return np.asarray(out, dtype=np.float64)

    def _features(self, obs, actions):
        if self._discrete:
            return np.concatenate([obs, np.ones((obs.shape[0], 1))], axis=1)
        return np.concatenate([obs, actions, np.ones((obs.shape[0], 1))], axis=1)

    def _q(self, obs, actions):
        if self.q_model == "linear":
            phi = self._features(obs, actions)
            if self._discrete:
                return (phi @ self.coef_.T)[np.arange(obs.shape[0]), actions.astype(int)]
            return phi @ self.coef_
        if self._discrete:
            q = self.q_net_.forward(obs)
            return q[np.arange(obs.shape[0]), actions.astype(int)]
        return self.q_net_.forward(np.concatenate([obs, actions], axis=1))[:, 0]

    def fit(self, dataset, y=None):
        cfg = FqeConfig(self.gamma, self.iterations, self.batch_size, self.steps_per_iteration,
                        tuple(self.hidden_sizes), self.learning_rate, self.q_model, self.random_state)
        if self.policy is None:
            raise ContractError("FittedQEvaluation needs a policy")
        if len(dataset) == 0:
            raise ContractError("FQE needs a nonempty dataset")
        self._discrete = dataset.discrete
        obs = dataset.limited_observations
        next_obs = dataset.limited_next_observations
        actions = dataset.actions[:, 0] if self._discrete else dataset.actions
        next_pi = self._greedy_actions(next_obs)
        starts = dataset.episode_starts()
        start_obs = obs[starts]
        start_pi = self._greedy_actions(start_obs)
        not_done = 1.0 - dataset.terminals.astype(np.float64)
        rewards = dataset.rewards
        n, d = obs.shape
        n_actions = int(dataset.env_manifest.get("n_actions", 0)) if self._discrete else 0
        if self._discrete and n_actions == 0:
            n_actions = int(max(actions.max(), next_pi.max())) + 1
        rng = np.random.default_rng(cfg.random_state)

        if cfg.q_model == "linear":
            width = d + 1 if self._discrete else d + actions.shape[1] + 1
            self.coef_ = np.zeros((n_actions, width)) if self._discrete else np.zeros(width)
        else:
            out = n_actions if self._discrete else 1
            in_dim = d if self._discrete else d + actions.shape[1]
            self.q_net_ = Mlp.init((in_dim, *cfg.hidden_sizes, out), rng, zero_last=True)
            opt = Optimizer(self.q_net_, learning_rate=cfg.learning_rate)

        self.history_ = [float(self._q(start_obs, start_pi).mean())]
        for it in range(cfg.iterations):
            target = rewards + cfg.gamma * not_done * self._q(next_obs, next_pi)
            if not np.all(np.isfinite(target)) or np.abs(target).max() > Q_DIVERGENCE:
                raise EvaluationError(f"FQE diverged at iteration {it}")
            if cfg.q_model == "linear":
                phi = self._features(obs, actions)
                if self._discrete:
                    coef = np.zeros_like(self.coef_)
                    for a in range(n_actions):
                        rows = actions.astype(int) == a
                        if rows.any():
                            coef[a] = np.linalg.lstsq(phi[rows], target[rows], rcond=None)[0]
                    self.coef_ = coef
                else:
                    self.coef_ = np.linalg.lstsq(phi, target, rcond=None)[0]
            else:
                for _ in range(cfg.steps_per_iteration):
                    idx = rng.integers(0, n, size=min(cfg.batch_size, n))
                    tape = Tape()
                    if self._discrete:
                        onehot = np.eye(n_actions)[actions[idx].astype(int)]
                        q = weighted_row_sum(self.q_net_(obs[idx], tape), onehot)
                        loss = mse(q, target[idx])
                    else:
                        q = self.q_net_(np.concatenate([obs[idx], actions[idx]], axis=1), tape)
                        loss = mse(q, target[idx][:, None])
                    opt.step(backprop(self.q_net_, tape, loss))
            estimate = float(self._q(start_obs, start_pi).mean())
            if not np.isfinite(estimate) or abs(estimate) > Q_DIVERGENCE:
                raise EvaluationError(f"FQE diverged at iteration {it}")
            self.history_.append(estimate)
        self.estimate_ = self.history_[-1]
        return self

    def q_values(self, obs, actions) -> np.ndarray:
        if not hasattr(self, "estimate_"):
            raise NotFittedError("FittedQEvaluation is not fitted")
        return self._q(np.asarray(obs, dtype=np.float64), np.asarray(actions))


def fqe_evaluate(policy, dataset, config: FqeConfig | None = None) -> float:
    cfg = config or FqeConfig()
    est = FittedQEvaluation(policy, cfg.gamma, cfg.iterations, cfg.batch_size, cfg.steps_per_iteration,
                            cfg.hidden_sizes, cfg.learning_rate, cfg.q_model, cfg.random_state)
    return est.fit(dataset).estimate_


def relative_to_initial(estimates, initial_estimate: float) -> np.ndarray:
    """FQE estimates divided by the estimate of the untrained policy."""
    if initial_estimate == 0:
        raise EvaluationError("initial FQE estimate is zero; cannot normalise")
    return np.asarray(estimates, dtype=np.float64) / initial_estimate
