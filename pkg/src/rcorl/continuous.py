"""TD3, TD3+BC and teacher-regularised TD3+BC for continuous actions.

The actor update maximises::

    mean_i[ lam * Q1(s_i, pi(s_i)) ] - beta1 * mse(pi(s_i), a_i) - beta2 * mse(pi(s_i), teacher(rich_i))

with ``lam = alpha / mean|Q1(s_i, pi(s_i))|``. ``beta1=1, beta2=0`` is plain
TD3+BC. Students see normalised constrained observations; the teacher sees
the normalised rich state through its own normaliser.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone

from rcorl.datasets import NormStats, OfflineDataset, compute_norm_stats
from rcorl.envs import FeatureSpec, full_spec, make_env
from rcorl.evaluation import final_score, rollout_eval
from rcorl.exceptions import ContractError, NotFittedError, NumericError, TrainingError
from rcorl.neural import Mlp, Optimizer, Tape, backprop, concat, mean, mse, soft_update
from rcorl.validation import check_dataset, check_observations

log = logging.getLogger(__name__)

MAX_ACTION = 1.0
Q_GUARD = 1e-8


@dataclass
class Td3Config:
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    batch_size: int = 256
    total_steps: int = 60_000
    alpha: float = 2.5
    learning_rate: float = 3e-4
    hidden_sizes: tuple = (64, 64)
    expl_noise: float = 0.1
    start_steps: int = 1_000
    eval_every: int = 2_000
    eval_episodes: int = 10

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ContractError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.policy_delay < 1:
            raise ContractError("policy_delay must be >= 1")
        if self.noise_clip < 0:
            raise ContractError("noise_clip must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ContractError("tau must lie in [0, 1]")
        self.hidden_sizes = tuple(self.hidden_sizes)


@dataclass(frozen=True)
class TransferConfig:
    beta1: float = 0.5
    beta2: float = 0.5

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ContractError("beta weights must be non-negative")
        if not math.isclose(self.beta1 + self.beta2, 1.0, rel_tol=0.0, abs_tol=1e-12):
            raise ContractError(f"beta1 + beta2 must equal 1, got {self.beta1} + {self.beta2}")


TRANSFER_PRESETS = {
    "transfer_0.5_0.5": TransferConfig(0.5, 0.5),
    "transfer_0.0_1.0": TransferConfig(0.0, 1.0),
}


def lambda_normalizer(alpha: float, q_values) -> float:
    """``alpha / mean|Q|`` with the mean floored at 1e-8."""
    q = np.asarray(q_values, dtype=np.float64)
    if q.size == 0:
        raise ContractError("lambda needs a nonempty batch of Q values")
    scale = float(np.abs(q).mean())
    return alpha / max(scale, Q_GUARD)


# ---------------------------------------------------------------------------
# Agent state and update steps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TeacherPolicy:
    """Frozen actor over rich states, with the normaliser it was trained under."""

    actor: Mlp
    normalizer: NormStats
    spec: FeatureSpec
    frozen: bool = True

    def predict(self, rich_states) -> np.ndarray:
        return self.actor.forward(self.normalizer(self.spec.project(rich_states)))


@dataclass
class ContinuousAgent:
    actor: Mlp
    critic1: Mlp
    critic2: Mlp
    actor_target: Mlp
    critic1_target: Mlp
    critic2_target: Mlp
    actor_opt: Optimizer
    critic1_opt: Optimizer
    critic2_opt: Optimizer
    input_spec: FeatureSpec
    normalizer: NormStats
    rng: np.random.Generator
    total_it: int = 0
    actor_updates: int = 0

    @classmethod
    def create(cls, obs_dim: int, action_dim: int, hidden_sizes, learning_rate: float,
               rng: np.random.Generator, spec: FeatureSpec, normalizer: NormStats) -> "ContinuousAgent":
        hidden = tuple(hidden_sizes)
        actor = Mlp.init((obs_dim, *hidden, action_dim), rng, output_activation="tanh")
        critic1 = Mlp.init((obs_dim + action_dim, *hidden, 1), rng)
        critic2 = Mlp.init((obs_dim + action_dim, *hidden, 1), rng)
        return cls(
            actor, critic1, critic2, actor.copy(), critic1.copy(), critic2.copy(),
            Optimizer(actor, learning_rate=learning_rate),
            Optimizer(critic1, learning_rate=learning_rate),
            Optimizer(critic2, learning_rate=learning_rate),
            spec, normalizer, rng,
        )

    def predict(self, obs) -> np.ndarray:
        return MAX_ACTION * self.actor.forward(self.normalizer(obs))

    def act(self, obs, rng=None) -> np.ndarray:
        return self.predict(obs)

    def networks(self) -> dict[str, Mlp]:
        return {
            "actor": self.actor, "critic1": self.critic1, "critic2": self.critic2,
            "actor_target": self.actor_target, "critic1_target": self.critic1_target,
            "critic2_target": self.critic2_target,
        }


def td3_target(agent: ContinuousAgent, batch: dict, cfg: Td3Config, noise: np.ndarray) -> np.ndarray:
    """Clipped double-Q target with target-policy smoothing ``noise``."""
    next_obs = batch["next_obs"]
    clipped = np.clip(noise, -cfg.noise_clip, cfg.noise_clip)
    next_action = np.clip(MAX_ACTION * agent.actor_target.forward(next_obs) + clipped, -MAX_ACTION, MAX_ACTION)
    sa = np.concatenate([next_obs, next_action], axis=1)
    q_next = np.minimum(agent.critic1_target.forward(sa), agent.critic2_target.forward(sa))
    not_done = 1.0 - batch["terminals"][:, None]
    return batch["rewards"][:, None] + cfg.gamma * not_done * q_next


def critic_update(agent: ContinuousAgent, batch: dict, cfg: Td3Config) -> float:
    noise = agent.rng.normal(0.0, cfg.policy_noise, size=batch["actions"].shape)
    y = td3_target(agent, batch, cfg, noise)
    tape = Tape()
    sa = tape.constant(np.concatenate([batch["obs"], batch["actions"]], axis=1))
    loss = mse(agent.critic1(sa, tape), y) + mse(agent.critic2(sa, tape), y)
    if not np.isfinite(loss.value):
        raise TrainingError(f"critic loss is not finite at step {agent.total_it}", step=agent.total_it)
    agent.critic1_opt.step(backprop(agent.critic1, tape, loss))
    agent.critic2_opt.step(backprop(agent.critic2, tape, loss))
    return float(loss.value)


def actor_loss(agent: ContinuousAgent, batch: dict, beta1: float, beta2: float,
               alpha: float | None, tape: Tape):
    """Record the actor objective on ``tape`` and return ``(loss, lam)``.

    ``alpha=None`` gives the online TD3 objective ``-mean Q1`` (lam = 1).
    """
    s = tape.constant(batch["obs"])
    pi = MAX_ACTION * agent.actor(s, tape)
    q = agent.critic1(concat(s, pi), tape)
    lam = 1.0 if alpha is None else lambda_normalizer(alpha, q.value)
    loss = -lam * mean(q)
    if beta1:
        loss = loss + beta1 * mse(pi, batch["actions"])
    if "teacher_actions" in batch:
        loss = loss + beta2 * mse(pi, batch["teacher_actions"])
    elif beta2:
        raise ContractError("beta2 > 0 needs teacher actions in the batch")
    return loss, lam


def actor_update(agent: ContinuousAgent, batch: dict, beta1: float, beta2: float, alpha: float | None) -> float:
    tape = Tape()
    loss, _ = actor_loss(agent, batch, beta1, beta2, alpha, tape)
    if not np.isfinite(loss.value):
        raise TrainingError(f"actor loss is not finite at step {agent.total_it}", step=agent.total_it)
    agent.actor_opt.step(backprop(agent.actor, tape, loss))
    agent.actor_updates += 1
    return float(loss.value)


def _update_targets(agent: ContinuousAgent, tau: float) -> None:
    soft_update(agent.critic1_target, agent.critic1, tau)
    soft_update(agent.critic2_target, agent.critic2, tau)
    soft_update(agent.actor_target, agent.actor, tau)


def transfer_train_step(agent: ContinuousAgent, teacher: TeacherPolicy | None, batch: dict,
                        td3cfg: Td3Config, xfercfg: TransferConfig) -> ContinuousAgent:
    """One critic step and, every ``policy_delay`` steps, one actor step plus target updates.

    ``batch`` holds normalised constrained ``obs``/``next_obs``, ``actions``,
    ``rewards``, ``terminals`` and either ``teacher_actions`` or the raw
    ``rich_obs`` the teacher consumes.
    """
    if xfercfg.beta2 > 0 and teacher is None and "teacher_actions" not in batch:
        raise ContractError("beta2 > 0 needs a teacher")
    if teacher is not None and "teacher_actions" not in batch:
        batch = {**batch, "teacher_actions": teacher.predict(batch["rich_obs"])}
    agent.total_it += 1
    try:
        critic_update(agent, batch, td3cfg)
        if agent.total_it % td3cfg.policy_delay == 0:
            actor_update(agent, batch, xfercfg.beta1, xfercfg.beta2, td3cfg.alpha)
            _update_targets(agent, td3cfg.tau)
    except NumericError as exc:
        raise TrainingError(f"training diverged at step {agent.total_it}: {exc}", step=agent.total_it) from exc
    return agent


def td3_train_step(agent: ContinuousAgent, batch: dict, cfg: Td3Config) -> ContinuousAgent:
    """Plain online TD3 step (no behaviour cloning, no lambda scaling)."""
    agent.total_it += 1
    try:
        critic_update(agent, batch, cfg)
        if agent.total_it % cfg.policy_delay == 0:
            actor_update(agent, batch, 0.0, 0.0, None)
            _update_targets(agent, cfg.tau)
    except NumericError as exc:
        raise TrainingError(f"training diverged at step {agent.total_it}: {exc}", step=agent.total_it) from exc
    return agent


# ---------------------------------------------------------------------------
# Online TD3 (behaviour policies and expert reference)
# ---------------------------------------------------------------------------


@dataclass
class OnlineRun:
    policy: ContinuousAgent
    eval_trace: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    replay: OfflineDataset | None = None
    consumed_observations: np.ndarray | None = None


def _episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([int(seed), 0xC0DE, int(episode)]).generate_state(1)[0])


def _eval_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), 0xE7A1, int(step)]).generate_state(1)[0])


def td3_online_train(env_id: str, spec: FeatureSpec, config: Td3Config, seed: int,
                     record_observations: bool = False) -> OnlineRun:
    """Train TD3 online while observing only ``spec.project(state)``.

    Returns the final policy, the evaluation trace ``[(step, score), ...]``,
    actor checkpoints taken at each evaluation, and the full replay buffer
    (rich states logged) as an :class:`OfflineDataset`.
    """
    from rcorl.envs import env_manifest

    env = make_env(env_id)
    if env.discrete:
        raise ContractError("td3_online_train needs a continuous-action environment")
    init_seq, act_seq, sample_seq, noise_seq = np.random.SeedSequence(int(seed)).spawn(4)
    agent = ContinuousAgent.create(spec.dim, env.action_dim, config.hidden_sizes, config.learning_rate,
                                   np.random.default_rng(init_seq), spec, NormStats.identity(spec.dim))
    agent.rng = np.random.default_rng(noise_seq)
    act_rng = np.random.default_rng(act_seq)
    sample_rng = np.random.default_rng(sample_seq)

    n = int(config.total_steps)
    full_n = spec.full_dim
    raw_obs = np.zeros((n, full_n))
    raw_next = np.zeros((n, full_n))
    lim_obs = np.zeros((n, spec.dim))
    lim_next = np.zeros((n, spec.dim))
    actions = np.zeros((n, env.action_dim))
    rewards = np.zeros(n)
    terminals = np.zeros(n, dtype=bool)
    timeouts = np.zeros(n, dtype=bool)

    run = OnlineRun(agent)
    episode = 0
    state = env.reset(_episode_seed(seed, episode))
    obs = spec.project(state.raw)
    for t in range(n):
        if t < config.start_steps:
            action = env.sample_action(act_rng)
        else:
            action = agent.predict(obs) + act_rng.normal(0.0, MAX_ACTION * config.expl_noise, size=env.action_dim)
            action = np.clip(action, -MAX_ACTION, MAX_ACTION)
        result = env.step(state, action)
        next_obs = spec.project(result.next_state.raw)
        raw_obs[t], raw_next[t] = state.raw, result.next_state.raw
        lim_obs[t], lim_next[t] = obs, next_obs
        actions[t], rewards[t] = action, result.reward
        terminals[t] = result.terminal
        timeouts[t] = result.done and not result.terminal
        if result.done:
            episode += 1
            state = env.reset(_episode_seed(seed, episode))
            obs = spec.project(state.raw)
        else:
            state, obs = result.next_state, next_obs
        if t >= config.start_steps:
            idx = sample_rng.integers(0, t + 1, size=config.batch_size)
            batch = {
                "obs": lim_obs[idx], "actions": actions[idx], "rewards": rewards[idx],
                "next_obs": lim_next[idx], "terminals": terminals[idx].astype(np.float64),
            }
            td3_train_step(agent, batch, config)
        if config.eval_every and (t + 1) % config.eval_every == 0:
            score = rollout_eval(agent, env_id, spec, _eval_seed(seed, t + 1), config.eval_episodes)
            run.eval_trace.append((t + 1, score))
            run.checkpoints.append((t + 1, agent.actor.copy()))
            log.debug("online td3 step %d score %.3f", t + 1, score)

    run.replay = OfflineDataset(
        raw_obs, actions, rewards, raw_next, terminals, timeouts, spec,
        "medium_replay", env_manifest(env_id), None,
        {"collection_seed": int(seed), "online_steps": n},
    )
    if record_observations:
        run.consumed_observations = lim_obs
    return run


def actor_policy(actor: Mlp, spec: FeatureSpec) -> ContinuousAgent:
    """Wrap a bare actor checkpoint as an acting policy over ``spec``'s view."""
    hidden = actor.layer_dims[1:-1]
    agent = ContinuousAgent.create(actor.input_dim, actor.output_dim, hidden, 3e-4,
                                   np.random.default_rng(0), spec, NormStats.identity(actor.input_dim))
    agent.actor = actor
    return agent


# ---------------------------------------------------------------------------
# Offline estimators
# ---------------------------------------------------------------------------


class TD3BC(BaseEstimator):
    """Offline TD3+BC.

    ``features="full"`` trains on the rich state (a teacher);
    ``features="limited"`` trains on the dataset's constrained view (the
    baseline). ``fit`` takes an optional ``evaluator(policy, round_index)``
    called every ``eval_every`` steps.
    """

    def __init__(self, features="limited", alpha=2.5, gamma=0.99, tau=0.005, policy_delay=2,
                 policy_noise=0.2, noise_clip=0.5, batch_size=256, n_steps=30_000,
                 learning_rate=3e-4, hidden_sizes=(64, 64), eval_every=1_000, random_state=0):
        self.features = features
        self.alpha = alpha
        self.gamma = gamma
        self.tau = tau
        self.policy_delay = policy_delay
        self.policy_noise = policy_noise
        self.noise_clip = noise_clip
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.hidden_sizes = hidden_sizes
        self.eval_every = eval_every
        self.random_state = random_state

    def _transfer_config(self) -> TransferConfig:
        return TransferConfig(1.0, 0.0)

    def _teacher_policy(self) -> TeacherPolicy | None:
        return None

    def td3_config(self) -> Td3Config:
        return Td3Config(
            gamma=self.gamma, tau=self.tau, policy_delay=self.policy_delay,
            policy_noise=self.policy_noise, noise_clip=self.noise_clip,
            batch_size=self.batch_size, total_steps=self.n_steps, alpha=self.alpha,
            learning_rate=self.learning_rate, hidden_sizes=tuple(self.hidden_sizes),
        )

    def _resolve_spec(self, dataset: OfflineDataset) -> FeatureSpec:
        if self.features == "full":
            return full_spec(dataset.env_manifest["env_id"])
        if self.features == "limited":
            return dataset.feature_spec
        raise ContractError(f"features must be 'full' or 'limited', got {self.features!r}")

    def fit(self, dataset: OfflineDataset, evaluator=None, callback=None):
        check_dataset(dataset, discrete=False)
        cfg = self.td3_config()
        xfer = self._transfer_config()
        teacher = self._teacher_policy()
        spec = self._resolve_spec(dataset)
        rich_stats = dataset.norm_stats if dataset.norm_stats is not None else compute_norm_stats(dataset.observations)
        norm = rich_stats.restrict(spec)
        obs = norm(spec.project(dataset.observations))
        next_obs = norm(spec.project(dataset.next_observations))
        actions = dataset.actions
        rewards = dataset.rewards
        terminals = dataset.terminals.astype(np.float64)
        teacher_actions = None
        if teacher is not None:
            if teacher.spec.full_dim != dataset.feature_spec.full_dim or not teacher.spec.is_full:
                raise ContractError("teacher must consume the full rich state of this dataset's environment")
            teacher_actions = teacher.predict(dataset.observations)
            if teacher_actions.shape != actions.shape:
                raise ContractError("teacher action shape does not match the dataset")

        init_seq, sample_seq, noise_seq = np.random.SeedSequence(int(self.random_state)).spawn(3)
        agent = ContinuousAgent.create(spec.dim, actions.shape[1], cfg.hidden_sizes, cfg.learning_rate,
                                       np.random.default_rng(init_seq), spec, norm)
        agent.rng = np.random.default_rng(noise_seq)
        sample_rng = np.random.default_rng(sample_seq)
        n = len(dataset)
        self.agent_ = agent
        self.spec_ = spec
        self.normalizer_ = norm
        self.rich_normalizer_ = rich_stats
        self.eval_trace_ = []
        for step in range(1, cfg.total_steps + 1):
            idx = sample_rng.integers(0, n, size=cfg.batch_size)
            batch = {"obs": obs[idx], "actions": actions[idx], "rewards": rewards[idx],
                     "next_obs": next_obs[idx], "terminals": terminals[idx]}
            if teacher_actions is not None:
                batch["teacher_actions"] = teacher_actions[idx]
            transfer_train_step(agent, teacher, batch, cfg, xfer)
            if callback is not None:
                callback(step, agent, batch)
            if evaluator is not None and self.eval_every and step % self.eval_every == 0:
                self.eval_trace_.append((step, float(evaluator(self, len(self.eval_trace_)))))
        self.n_actor_updates_ = agent.actor_updates
        if evaluator is not None and not self.eval_trace_:
            self.eval_trace_.append((cfg.total_steps, float(evaluator(self, 0))))
        return self

    def _check_fitted(self):
        if not hasattr(self, "agent_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X, single = check_observations(X, self.spec_.dim)
        out = self.agent_.predict(X)
        return out[0] if single else out

    def act(self, obs, rng=None) -> np.ndarray:
        return self.predict(obs)

    @property
    def score_(self) -> float:
        return final_score([s for _, s in self.eval_trace_])[0]

    def as_teacher(self) -> TeacherPolicy:
        self._check_fitted()
        if not self.spec_.is_full:
            raise ContractError("only a full-feature agent can act as a teacher")
        return TeacherPolicy(self.agent_.actor.copy(), self.normalizer_, self.spec_)


class TransferTD3BC(TD3BC):
    """TD3+BC student regularised towards a frozen full-feature teacher."""

    def __init__(self, teacher=None, beta1=0.5, beta2=0.5, features="limited", alpha=2.5, gamma=0.99,
                 tau=0.005, policy_delay=2, policy_noise=0.2, noise_clip=0.5, batch_size=256,
                 n_steps=30_000, learning_rate=3e-4, hidden_sizes=(64, 64), eval_every=1_000, random_state=0):
        super().__init__(features, alpha, gamma, tau, policy_delay, policy_noise, noise_clip, batch_size,
                         n_steps, learning_rate, hidden_sizes, eval_every, random_state)
        self.teacher = teacher
        self.beta1 = beta1
        self.beta2 = beta2

    def _transfer_config(self) -> TransferConfig:
        return TransferConfig(self.beta1, self.beta2)

    def _teacher_policy(self) -> TeacherPolicy | None:
        if self.teacher is None:
            if self.beta2 > 0:
                raise ContractError("beta2 > 0 needs a teacher")
            return None
        return as_teacher_policy(self.teacher)


def as_teacher_policy(teacher) -> TeacherPolicy:
    if isinstance(teacher, TeacherPolicy):
        return teacher
    if hasattr(teacher, "as_teacher"):
        return teacher.as_teacher()
    raise ContractError(f"cannot use {type(teacher).__name__} as a teacher")


class TrueBC(BaseEstimator):
    """Student regressed directly onto the teacher's actions."""

    def __init__(self, teacher=None, features="limited", batch_size=256, n_steps=30_000, learning_rate=3e-4,
                 hidden_sizes=(64, 64), eval_every=1_000, init_from_teacher=False, random_state=0):
        self.teacher = teacher
        self.features = features
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.hidden_sizes = hidden_sizes
        self.eval_every = eval_every
        self.init_from_teacher = init_from_teacher
        self.random_state = random_state

    def fit(self, dataset: OfflineDataset, evaluator=None, callback=None):
        check_dataset(dataset, discrete=False)
        if self.teacher is None:
            raise ContractError("TrueBC needs a trained teacher")
        teacher = as_teacher_policy(self.teacher)
        spec = TD3BC(features=self.features)._resolve_spec(dataset)
        rich_stats = dataset.norm_stats if dataset.norm_stats is not None else compute_norm_stats(dataset.observations)
        target = teacher.predict(dataset.observations)
        if self.init_from_teacher:
            if spec != teacher.spec:
                raise ContractError("init_from_teacher needs the teacher's own feature spec")
            actor = teacher.actor.copy()
            norm = teacher.normalizer
        else:
            norm = rich_stats.restrict(spec)
            init_seq = np.random.SeedSequence(int(self.random_state)).spawn(1)[0]
            actor = Mlp.init((spec.dim, *self.hidden_sizes, target.shape[1]), np.random.default_rng(init_seq),
                             output_activation="tanh")
        obs = norm(spec.project(dataset.observations))
        opt = Optimizer(actor, learning_rate=self.learning_rate)
        sample_rng = np.random.default_rng(np.random.SeedSequence(int(self.random_state)).spawn(2)[1])
        n = len(dataset)
        self.actor_ = actor
        self.spec_ = spec
        self.normalizer_ = norm
        self.loss_curve_ = [self.dataset_loss(obs, target)]
        self.eval_trace_ = []
        for step in range(1, int(self.n_steps) + 1):
            idx = sample_rng.integers(0, n, size=self.batch_size)
            tape = Tape()
            loss = mse(MAX_ACTION * actor(obs[idx], tape), target[idx])
            if not np.isfinite(loss.value):
                raise TrainingError(f"TrueBC loss is not finite at step {step}", step=step)
            opt.step(backprop(actor, tape, loss))
            if callback is not None:
                callback(step, actor, loss.value)
            if self.eval_every and step % self.eval_every == 0:
                self.loss_curve_.append(self.dataset_loss(obs, target))
                if evaluator is not None:
                    self.eval_trace_.append((step, float(evaluator(self, len(self.eval_trace_)))))
        if self.n_steps and (not self.eval_every or self.n_steps % self.eval_every):
            self.loss_curve_.append(self.dataset_loss(obs, target))
        if evaluator is not None and not self.eval_trace_:
            self.eval_trace_.append((int(self.n_steps), float(evaluator(self, 0))))
        return self

    def dataset_loss(self, obs_normalized, target) -> float:
        return float(np.mean((MAX_ACTION * self.actor_.forward(obs_normalized) - target) ** 2))

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "actor_"):
            raise NotFittedError("TrueBC is not fitted")
        X, single = check_observations(X, self.spec_.dim)
        out = MAX_ACTION * self.actor_.forward(self.normalizer_(X))
        return out[0] if single else out

    def act(self, obs, rng=None):
        return self.predict(obs)

    @property
    def score_(self) -> float:
        return final_score([s for _, s in self.eval_trace_])[0]


class FeaturePredictor(RegressorMixin, BaseEstimator):
    """MLP regressor from constrained features to rich features (standardised targets)."""

    def __init__(self, hidden_sizes=(64, 64), n_steps=5_000, batch_size=256, learning_rate=1e-3, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, Y):
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0] or X.shape[0] == 0:
            raise ContractError("FeaturePredictor.fit needs nonempty 2-D X and Y with matching rows")
        self.x_stats_ = compute_norm_stats(X)
        self.y_stats_ = compute_norm_stats(Y)
        Xn, Yn = self.x_stats_(X), self.y_stats_(Y)
        init_seq, sample_seq = np.random.SeedSequence(int(self.random_state)).spawn(2)
        self.net_ = Mlp.init((X.shape[1], *self.hidden_sizes, Y.shape[1]), np.random.default_rng(init_seq))
        opt = Optimizer(self.net_, learning_rate=self.learning_rate)
        rng = np.random.default_rng(sample_seq)
        n = X.shape[0]
        self.loss_curve_ = []
        for step in range(int(self.n_steps)):
            idx = rng.integers(0, n, size=min(self.batch_size, n))
            tape = Tape()
            loss = mse(self.net_(Xn[idx], tape), Yn[idx])
            if not np.isfinite(loss.value):
                raise TrainingError(f"feature predictor diverged at step {step}", step=step)
            opt.step(backprop(self.net_, tape, loss))
            self.loss_curve_.append(float(loss.value))
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "net_"):
            raise NotFittedError("FeaturePredictor is not fitted")
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        out = self.net_.forward(self.x_stats_(np.atleast_2d(X))) * self.y_stats_.std + self.y_stats_.mean
        return out[0] if single else out


class _PredictedFeaturePolicy:
    def __init__(self, predictor, policy):
        self.predictor = predictor
        self.policy = policy

    def act(self, obs, rng=None):
        return self.policy.predict(self.predictor.predict(obs))


class PredictiveTD3BC(BaseEstimator):
    """Two-stage baseline: predict the rich state from the constrained view, then TD3+BC on predictions."""

    def __init__(self, agent=None, predictor=None, holdout_fraction=0.1, random_state=0):
        self.agent = agent
        self.predictor = predictor
        self.holdout_fraction = holdout_fraction
        self.random_state = random_state

    def fit(self, dataset: OfflineDataset, evaluator=None):
        check_dataset(dataset, discrete=False)
        rng = np.random.default_rng(np.random.SeedSequence(int(self.random_state)).spawn(1)[0])
        n = len(dataset)
        perm = rng.permutation(n)
        n_hold = max(1, int(round(self.holdout_fraction * n))) if n > 1 else 0
        hold, train = perm[:n_hold], perm[n_hold:]
        X = dataset.limited_observations
        Y = dataset.observations
        predictor = clone(self.predictor) if self.predictor is not None else FeaturePredictor(random_state=self.random_state)
        predictor.fit(X[train], Y[train])
        if n_hold:
            err = predictor.predict(X[hold]) - Y[hold]
            self.holdout_mse_ = float(np.mean(err**2))
            self.target_variance_ = float(np.mean(Y[hold].var(axis=0)))
        env_id = dataset.env_manifest.get("env_id")
        spec = full_spec(env_id)
        predicted = OfflineDataset(
            predictor.predict(X), dataset.actions, dataset.rewards,
            predictor.predict(dataset.limited_next_observations), dataset.terminals, dataset.timeouts,
            spec, dataset.difficulty, dataset.env_manifest, None, dict(dataset.provenance),
        )
        agent = clone(self.agent) if self.agent is not None else TD3BC(random_state=self.random_state)
        agent.set_params(features="full")
        wrapped = None
        if evaluator is not None:
            def wrapped(policy, round_index):
                return evaluator(_PredictedFeaturePolicy(predictor, policy), round_index)
        agent.fit(predicted, evaluator=wrapped)
        self.predictor_ = predictor
        self.agent_ = agent
        self.spec_ = dataset.feature_spec
        self.eval_trace_ = list(agent.eval_trace_)
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "agent_"):
            raise NotFittedError("PredictiveTD3BC is not fitted")
        X, single = check_observations(X, self.spec_.dim)
        out = self.agent_.predict(self.predictor_.predict(X))
        return out[0] if single else out

    def act(self, obs, rng=None):
        return self.predict(obs)

    @property
    def score_(self) -> float:
        return final_score([s for _, s in self.eval_trace_])[0]


def td3bc_train(dataset: OfflineDataset, features: str = "limited", seed: int = 0, **params) -> TD3BC:
    return TD3BC(features=features, random_state=seed, **params).fit(dataset)


def true_bc_train(teacher, dataset: OfflineDataset, features: str = "limited", seed: int = 0, **params) -> TrueBC:
    return TrueBC(teacher=teacher, features=features, random_state=seed, **params).fit(dataset)


def predictive_train(dataset: OfflineDataset, seed: int = 0, agent=None, predictor=None) -> PredictiveTD3BC:
    return PredictiveTD3BC(agent=agent, predictor=predictor, random_state=seed).fit(dataset)
