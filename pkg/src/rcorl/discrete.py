"""Double DQN + CQL for discrete actions, with a teacher-blended bootstrap target.

The bootstrap value mixes the student's own greedy action with the
teacher's greedy action on the rich next state::

    y = r + gamma * (1 - terminal) * [(1 - beta) * Q'(s', argmax_a Q(s', a))
                                      + beta * Q'(s', argmax_a Q_teacher(rich', a))]

``beta = 0`` is plain double DQN; ``beta = 1`` evaluates the teacher's
greedy policy under the student's target network.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from rcorl.datasets import NormStats, OfflineDataset, compute_norm_stats
from rcorl.envs import FeatureSpec, env_manifest, full_spec, make_env
from rcorl.evaluation import final_score, rollout_eval
from rcorl.exceptions import ContractError, NotFittedError, NumericError, TrainingError
from rcorl.neural import Mlp, Optimizer, Tape, backprop, hard_update, logsumexp, mean, mse, scale, weighted_row_sum
from rcorl.validation import check_dataset, check_observations

log = logging.getLogger(__name__)

EPSILON_EVAL = 0.001
STUDENT_WIDTHS = (64, 32, 16)


@dataclass(frozen=True)
class CqlTransferConfig:
    beta: float = 0.8
    alpha_cql: float = 1.0
    gamma: float = 0.99
    target_update_interval: int = 500
    learning_rate: float = 3e-4
    batch_size: int = 256

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 < self.gamma < 1.0:
            raise ContractError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.alpha_cql < 0:
            raise ContractError("alpha_cql must be >= 0")
        if self.target_update_interval < 1:
            raise ContractError("target_update_interval must be >= 1")


CQL_PRESETS = {
    "n_dqn": CqlTransferConfig(beta=0.8),
    "s_dqn": CqlTransferConfig(beta=0.95),
}


@dataclass
class DiscreteAgent:
    q: Mlp
    q_target: Mlp
    optimizer: Optimizer
    input_spec: FeatureSpec
    normalizer: NormStats
    rng: np.random.Generator
    total_it: int = 0

    @classmethod
    def create(cls, obs_dim: int, n_actions: int, hidden_sizes, learning_rate: float,
               rng: np.random.Generator, spec: FeatureSpec, normalizer: NormStats) -> "DiscreteAgent":
        q = Mlp.init((obs_dim, *tuple(hidden_sizes), n_actions), rng)
        return cls(q, q.copy(), Optimizer(q, learning_rate=learning_rate), spec, normalizer, rng)

    @property
    def n_actions(self) -> int:
        return self.q.output_dim

    def q_values(self, obs) -> np.ndarray:
        return self.q.forward(self.normalizer(obs))

    def act(self, obs, rng=None, epsilon: float = EPSILON_EVAL):
        return greedy_action(self, obs, epsilon, rng if rng is not None else self.rng)


@dataclass(frozen=True)
class TeacherQ:
    """Frozen Q network over the rich state."""

    q: Mlp
    normalizer: NormStats
    spec: FeatureSpec

    def q_values(self, rich_states) -> np.ndarray:
        return self.q.forward(self.normalizer(self.spec.project(rich_states)))


def greedy_action(agent, obs, epsilon: float, rng: np.random.Generator):
    """Epsilon-greedy action; ties in the argmax go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError(f"epsilon must lie in [0, 1], got {epsilon}")
    q = agent.q_values(obs)
    greedy = np.argmax(q, axis=-1)
    if epsilon == 0.0:
        return int(greedy) if np.ndim(greedy) == 0 else greedy
    if np.ndim(greedy) == 0:
        return int(rng.integers(q.shape[-1])) if rng.random() < epsilon else int(greedy)
    explore = rng.random(greedy.shape[0]) < epsilon
    return np.where(explore, rng.integers(q.shape[-1], size=greedy.shape[0]), greedy)


def _bootstrap(q_target_next: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return q_target_next[np.arange(q_target_next.shape[0]), actions]


def double_dqn_target(agent: DiscreteAgent, batch: dict, gamma: float) -> np.ndarray:
    """``r + gamma * (1 - terminal) * Q'(s', argmax Q(s'))`` on normalised ``next_obs``."""
    next_obs = batch["next_obs"]
    student_a = np.argmax(agent.q.forward(next_obs), axis=1)
    boot = _bootstrap(agent.q_target.forward(next_obs), student_a)
    return batch["rewards"] + gamma * (1.0 - batch["terminals"]) * boot


def blended_target(agent: DiscreteAgent, batch: dict, teacher_next_q: np.ndarray | None,
                   beta: float, gamma: float) -> np.ndarray:
    """Bootstrap target mixing student and teacher greedy actions with weight ``beta``.

    ``teacher_next_q`` holds the teacher's Q values on the rich next states.
    """
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must lie in [0, 1], got {beta}")
    if beta == 0.0:
        return double_dqn_target(agent, batch, gamma)
    if teacher_next_q is None:
        raise ContractError("beta > 0 needs teacher Q values")
    next_obs = batch["next_obs"]
    q_next_target = agent.q_target.forward(next_obs)
    teacher_a = np.argmax(teacher_next_q, axis=1)
    if beta == 1.0:
        boot = _bootstrap(q_next_target, teacher_a)
    else:
        student_a = np.argmax(agent.q.forward(next_obs), axis=1)
        boot = (1.0 - beta) * _bootstrap(q_next_target, student_a) + beta * _bootstrap(q_next_target, teacher_a)
    return batch["rewards"] + gamma * (1.0 - batch["terminals"]) * boot


def _one_hot(actions: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((actions.shape[0], n))
    out[np.arange(actions.shape[0]), actions] = 1.0
    return out


def cql_gap(q_values: np.ndarray, actions: np.ndarray) -> float:
    """Mean of ``logsumexp_a Q(s, a) - Q(s, a_data)`` with a max-shifted log-sum-exp."""
    q = np.asarray(q_values, dtype=np.float64)
    m = q.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(q - m).sum(axis=1))
    return float(np.mean(lse - q[np.arange(q.shape[0]), np.asarray(actions, dtype=int)]))


def cql_loss(agent: DiscreteAgent, batch: dict, alpha_cql: float) -> float:
    if len(batch["actions"]) == 0:
        raise ContractError("cql_loss needs a nonempty batch")
    return alpha_cql * cql_gap(agent.q.forward(batch["obs"]), batch["actions"])


def _cql_terms(agent: DiscreteAgent, batch: dict, y: np.ndarray, alpha_cql: float, tape: Tape):
    q = agent.q(tape.constant(batch["obs"]), tape)
    onehot = _one_hot(batch["actions"], agent.n_actions)
    q_data = weighted_row_sum(q, onehot)
    td = mse(q_data, y)
    if alpha_cql:
        return td + scale(mean(logsumexp(q) - q_data), alpha_cql)
    return td


def cql_train_step(agent: DiscreteAgent, batch: dict, teacher_next_q: np.ndarray | None,
                   cfg: CqlTransferConfig) -> float:
    """One gradient step on squared TD error to the blended target plus the CQL penalty."""
    y = blended_target(agent, batch, teacher_next_q, cfg.beta, cfg.gamma)
    agent.total_it += 1
    tape = Tape()
    loss = _cql_terms(agent, batch, y, cfg.alpha_cql, tape)
    if not np.isfinite(loss.value):
        raise TrainingError(f"CQL loss is not finite at step {agent.total_it}", step=agent.total_it)
    try:
        agent.optimizer.step(backprop(agent.q, tape, loss))
    except NumericError as exc:
        raise TrainingError(f"training diverged at step {agent.total_it}: {exc}", step=agent.total_it) from exc
    if agent.total_it % cfg.target_update_interval == 0:
        hard_update(agent.q_target, agent.q)
    return float(loss.value)


# ---------------------------------------------------------------------------
# Offline estimator
# ---------------------------------------------------------------------------


class DiscreteCQL(BaseEstimator):
    """Offline double-DQN + CQL agent, optionally guided by a full-feature teacher.

    Random streams: ``SeedSequence(random_state).spawn(3)`` gives network
    init, minibatch sampling and action selection, in that order.
    """

    def __init__(self, teacher=None, beta=0.0, alpha_cql=1.0, gamma=0.99, target_update_interval=500,
                 learning_rate=3e-4, hidden_sizes=(64, 64), student_width=None, batch_size=256,
                 n_steps=30_000, eval_every=1_000, epsilon_eval=EPSILON_EVAL, features="limited",
                 random_state=0):
        self.teacher = teacher
        self.beta = beta
        self.alpha_cql = alpha_cql
        self.gamma = gamma
        self.target_update_interval = target_update_interval
        self.learning_rate = learning_rate
        self.hidden_sizes = hidden_sizes
        self.student_width = student_width
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.eval_every = eval_every
        self.epsilon_eval = epsilon_eval
        self.features = features
        self.random_state = random_state

    def config(self) -> CqlTransferConfig:
        return CqlTransferConfig(self.beta, self.alpha_cql, self.gamma, self.target_update_interval,
                                 self.learning_rate, self.batch_size)

    def _hidden(self) -> tuple:
        hidden = tuple(self.hidden_sizes)
        if self.student_width is not None:
            hidden = hidden[:-1] + (int(self.student_width),)
        return hidden

    def fit(self, dataset: OfflineDataset, evaluator=None, callback=None):
        """Train for ``n_steps``.

        ``callback(step, agent, info)`` runs before each gradient step with
        ``info = {"batch", "y", "teacher_next_q"}``.
        """
        check_dataset(dataset, discrete=True)
        cfg = self.config()
        if (cfg.beta > 0) != (self.teacher is not None):
            raise ContractError("a teacher must be given exactly when beta > 0")
        teacher = as_teacher_q(self.teacher) if self.teacher is not None else None
        env_id = dataset.env_manifest["env_id"]
        if self.features == "full":
            spec = full_spec(env_id)
        elif self.features == "limited":
            spec = dataset.feature_spec
        else:
            raise ContractError(f"features must be 'full' or 'limited', got {self.features!r}")
        norm = _discrete_normalizer(dataset, spec)
        obs = norm(spec.project(dataset.observations))
        next_obs = norm(spec.project(dataset.next_observations))
        actions = dataset.actions[:, 0].astype(int)
        rewards = dataset.rewards
        terminals = dataset.terminals.astype(np.float64)
        n_actions = int(dataset.env_manifest.get("n_actions", actions.max() + 1))
        teacher_next = None
        if teacher is not None:
            if not teacher.spec.is_full or teacher.spec.full_dim != dataset.feature_spec.full_dim:
                raise ContractError("teacher must consume the full rich state of this dataset's environment")
            teacher_next = teacher.q_values(dataset.next_observations)

        init_seq, sample_seq, act_seq = np.random.SeedSequence(int(self.random_state)).spawn(3)
        agent = DiscreteAgent.create(spec.dim, n_actions, self._hidden(), cfg.learning_rate,
                                     np.random.default_rng(init_seq), spec, norm)
        agent.rng = np.random.default_rng(act_seq)
        sample_rng = np.random.default_rng(sample_seq)
        n = len(dataset)
        self.agent_ = agent
        self.spec_ = spec
        self.eval_trace_ = []
        for step in range(1, int(self.n_steps) + 1):
            idx = sample_rng.integers(0, n, size=cfg.batch_size)
            batch = {"obs": obs[idx], "actions": actions[idx], "rewards": rewards[idx],
                     "next_obs": next_obs[idx], "terminals": terminals[idx]}
            t_next = teacher_next[idx] if teacher_next is not None else None
            if callback is not None:
                callback(step, agent, {"batch": batch, "teacher_next_q": t_next,
                                       "y": blended_target(agent, batch, t_next, cfg.beta, cfg.gamma)})
            cql_train_step(agent, batch, t_next, cfg)
            if evaluator is not None and self.eval_every and step % self.eval_every == 0:
                self.eval_trace_.append((step, float(evaluator(self, len(self.eval_trace_)))))
        if evaluator is not None and not self.eval_trace_:
            self.eval_trace_.append((int(self.n_steps), float(evaluator(self, 0))))
        return self

    def q_values(self, X) -> np.ndarray:
        if not hasattr(self, "agent_"):
            raise NotFittedError("DiscreteCQL is not fitted")
        X, _ = check_observations(X, self.spec_.dim)
        return self.agent_.q_values(X)

    def predict(self, X):
        """Greedy actions (epsilon 0)."""
        q = self.q_values(X)
        out = np.argmax(q, axis=1)
        return int(out[0]) if np.ndim(X) == 1 else out

    def act(self, obs, rng=None):
        self.q_values(np.atleast_2d(obs))
        return greedy_action(self.agent_, obs, self.epsilon_eval, rng if rng is not None else self.agent_.rng)

    def as_teacher(self) -> TeacherQ:
        if not hasattr(self, "agent_"):
            raise NotFittedError("DiscreteCQL is not fitted")
        if not self.spec_.is_full:
            raise ContractError("only a full-feature agent can act as a teacher")
        return TeacherQ(self.agent_.q.copy(), self.agent_.normalizer, self.spec_)

    @property
    def score_(self) -> float:
        return final_score([s for _, s in self.eval_trace_])[0]


def _discrete_normalizer(dataset: OfflineDataset, spec: FeatureSpec) -> NormStats:
    # pixel intensities are already in [0, 1]
    if dataset.env_manifest.get("env_id") == "grid_pix":
        return NormStats.identity(spec.dim)
    stats = dataset.norm_stats if dataset.norm_stats is not None else compute_norm_stats(dataset.observations)
    return stats.restrict(spec)


def as_teacher_q(teacher) -> TeacherQ:
    if isinstance(teacher, TeacherQ):
        return teacher
    if hasattr(teacher, "as_teacher"):
        return teacher.as_teacher()
    raise ContractError(f"cannot use {type(teacher).__name__} as a discrete teacher")


def cql_transfer_train(dataset: OfflineDataset, spec: FeatureSpec, teacher_q, config: CqlTransferConfig,
                       seed: int, n_steps: int = 30_000, **params) -> DiscreteCQL:
    if spec != dataset.feature_spec:
        dataset = dataset.with_spec(spec)
    est = DiscreteCQL(teacher=teacher_q, beta=config.beta, alpha_cql=config.alpha_cql, gamma=config.gamma,
                      target_update_interval=config.target_update_interval, learning_rate=config.learning_rate,
                      batch_size=config.batch_size, n_steps=n_steps, random_state=seed, **params)
    return est.fit(dataset)


# ---------------------------------------------------------------------------
# Online double DQN (behaviour policies and expert reference for grid_pix)
# ---------------------------------------------------------------------------


@dataclass
class DqnOnlineConfig:
    gamma: float = 0.99
    total_steps: int = 60_000
    batch_size: int = 64
    learning_rate: float = 3e-4
    hidden_sizes: tuple = (64, 64)
    target_update_interval: int = 500
    start_steps: int = 1_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 20_000
    eval_every: int = 2_000
    eval_episodes: int = 10

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ContractError(f"gamma must lie in (0, 1), got {self.gamma}")
        self.hidden_sizes = tuple(self.hidden_sizes)

    def epsilon(self, t: int) -> float:
        frac = min(1.0, t / max(1, self.epsilon_decay_steps))
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


@dataclass
class DqnOnlineRun:
    policy: DiscreteAgent
    eval_trace: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    replay: OfflineDataset | None = None


def dqn_online_train(env_id: str, spec: FeatureSpec, config: DqnOnlineConfig, seed: int) -> DqnOnlineRun:
    """Epsilon-greedy online double DQN that observes only ``spec.project(state)``."""
    from rcorl.continuous import _episode_seed, _eval_seed

    env = make_env(env_id)
    if not env.discrete:
        raise ContractError("dqn_online_train needs a discrete-action environment")
    init_seq, act_seq, sample_seq = np.random.SeedSequence(int(seed)).spawn(3)
    agent = DiscreteAgent.create(spec.dim, env.n_actions, config.hidden_sizes, config.learning_rate,
                                 np.random.default_rng(init_seq), spec, NormStats.identity(spec.dim))
    agent.rng = np.random.default_rng(act_seq)
    sample_rng = np.random.default_rng(sample_seq)
    train_cfg = CqlTransferConfig(beta=0.0, alpha_cql=0.0, gamma=config.gamma,
                                  target_update_interval=config.target_update_interval,
                                  learning_rate=config.learning_rate, batch_size=config.batch_size)
    n = int(config.total_steps)
    raw_obs = np.zeros((n, spec.full_dim))
    raw_next = np.zeros((n, spec.full_dim))
    lim_obs = np.zeros((n, spec.dim))
    lim_next = np.zeros((n, spec.dim))
    actions = np.zeros(n, dtype=int)
    rewards = np.zeros(n)
    terminals = np.zeros(n, dtype=bool)
    timeouts = np.zeros(n, dtype=bool)

    run = DqnOnlineRun(agent)
    episode = 0
    state = env.reset(_episode_seed(seed, episode))
    obs = spec.project(state.raw)
    for t in range(n):
        eps = 1.0 if t < config.start_steps else config.epsilon(t)
        action = greedy_action(agent, obs, eps, agent.rng)
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
            batch = {"obs": lim_obs[idx], "actions": actions[idx], "rewards": rewards[idx],
                     "next_obs": lim_next[idx], "terminals": terminals[idx].astype(np.float64)}
            cql_train_step(agent, batch, None, train_cfg)
        if config.eval_every and (t + 1) % config.eval_every == 0:
            score = rollout_eval(agent, env_id, spec, _eval_seed(seed, t + 1), config.eval_episodes)
            run.eval_trace.append((t + 1, score))
            run.checkpoints.append((t + 1, agent.q.copy()))
            log.debug("online dqn step %d score %.3f", t + 1, score)

    run.replay = OfflineDataset(
        raw_obs, actions[:, None].astype(np.float64), rewards, raw_next, terminals, timeouts, spec,
        "medium_replay", env_manifest(env_id), None, {"collection_seed": int(seed), "online_steps": n},
    )
    return run


def q_policy(q: Mlp, spec: FeatureSpec, epsilon: float = EPSILON_EVAL, seed: int = 0) -> DiscreteAgent:
    """Wrap a bare Q checkpoint as an epsilon-greedy acting policy over ``spec``'s view."""
    agent = DiscreteAgent.create(q.input_dim, q.output_dim, q.layer_dims[1:-1], 3e-4,
                                 np.random.default_rng(seed), spec, NormStats.identity(q.input_dim))
    agent.q = q
    agent.q_target = q.copy()
    return agent
