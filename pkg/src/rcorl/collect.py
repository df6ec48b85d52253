"""Dataset tiers collected by a behaviour policy that itself sees only the constrained view.

One online run per (env, spec, seed) yields all four tiers:

* ``expert``: noisy rollouts of the final online policy;
* ``medium``: noisy rollouts of the earliest checkpoint scoring at least
  halfway between the random score and the final policy's score;
* ``medium_replay``: the training replay buffer up to that checkpoint;
* ``medium_expert``: ``medium`` followed by ``expert``.

Every tier logs the full rich state.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from rcorl.datasets import DIFFICULTIES, OfflineDataset, concatenate, normalize_states
from rcorl.envs import FeatureSpec, env_manifest, make_env
from rcorl.evaluation import random_policy_score
from rcorl.exceptions import CollectionError, ContractError

log = logging.getLogger(__name__)


@dataclass
class CollectionConfig:
    online_steps: int = 60_000
    eval_every: int = 2_000
    eval_episodes: int = 10
    size_budget: int = 50_000
    action_noise: float = 0.1
    epsilon: float = 0.1
    batch_size: int | None = None
    hidden_sizes: tuple = (64, 64)
    random_episodes: int = 100

    def __post_init__(self):
        if self.online_steps < self.eval_every or self.eval_every < 1:
            raise ContractError("online_steps must cover at least one evaluation")
        if self.online_steps % self.eval_every:
            raise ContractError("online_steps must be a multiple of eval_every so the final policy is checkpointed")
        if self.size_budget < 1:
            raise ContractError("size_budget must be positive")
        self.hidden_sizes = tuple(self.hidden_sizes)


def medium_threshold(expert_score: float, random_score: float = 0.0) -> float:
    """Halfway between the random and expert scores (half the expert score when random is 0)."""
    return random_score + 0.5 * (expert_score - random_score)


def _online_run(env_id: str, spec: FeatureSpec, seed: int, cfg: CollectionConfig):
    if make_env(env_id).discrete:
        from rcorl.discrete import DqnOnlineConfig, dqn_online_train

        kw = {"batch_size": cfg.batch_size} if cfg.batch_size else {}
        online = DqnOnlineConfig(total_steps=cfg.online_steps, eval_every=cfg.eval_every,
                                 eval_episodes=cfg.eval_episodes, hidden_sizes=cfg.hidden_sizes, **kw)
        return dqn_online_train(env_id, spec, online, seed)
    from rcorl.continuous import Td3Config, td3_online_train

    kw = {"batch_size": cfg.batch_size} if cfg.batch_size else {}
    online = Td3Config(total_steps=cfg.online_steps, eval_every=cfg.eval_every,
                       eval_episodes=cfg.eval_episodes, hidden_sizes=cfg.hidden_sizes, **kw)
    return td3_online_train(env_id, spec, online, seed)


def _checkpoint_policy(env_id: str, net, spec: FeatureSpec):
    if make_env(env_id).discrete:
        from rcorl.discrete import q_policy

        return q_policy(net, spec)
    from rcorl.continuous import actor_policy

    return actor_policy(net, spec)


def rollout_dataset(policy, env_id: str, spec: FeatureSpec, n_transitions: int, seed: int, cfg: CollectionConfig,
                    difficulty: str) -> OfflineDataset:
    """Exactly ``n_transitions`` noisy transitions; the last one is marked as a timeout if still running."""
    env = make_env(env_id)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0DA7]))
    reset_seq = np.random.SeedSequence([int(seed), 0x5EED])
    reset_seeds = iter(reset_seq.generate_state(n_transitions + 1))
    n = int(n_transitions)
    action_dim = 1 if env.discrete else env.action_dim
    obs = np.zeros((n, spec.full_dim))
    nxt = np.zeros((n, spec.full_dim))
    actions = np.zeros((n, action_dim))
    rewards = np.zeros(n)
    terminals = np.zeros(n, dtype=bool)
    timeouts = np.zeros(n, dtype=bool)
    state = env.reset(int(next(reset_seeds)))
    for t in range(n):
        view = spec.project(state.raw)
        if env.discrete:
            from rcorl.discrete import greedy_action

            a = greedy_action(policy, view, cfg.epsilon, rng)
        else:
            a = policy.predict(view) + rng.normal(0.0, cfg.action_noise, size=env.action_dim)
            a = np.clip(a, -1.0, 1.0)
        result = env.step(state, a)
        obs[t], nxt[t], actions[t], rewards[t] = state.raw, result.next_state.raw, a, result.reward
        terminals[t] = result.terminal
        timeouts[t] = (result.done and not result.terminal) or (t == n - 1 and not result.done)
        state = env.reset(int(next(reset_seeds))) if result.done else result.next_state
    return OfflineDataset(obs, actions, rewards, nxt, terminals, timeouts, spec, difficulty, env_manifest(env_id))


def collect_rc_datasets(env_id: str, spec: FeatureSpec, seed: int, config: CollectionConfig | None = None) -> dict:
    """All four tiers from one constrained online run, keyed by difficulty."""
    cfg = config or CollectionConfig()
    if spec.env_id is not None and spec.env_id != env_id:
        raise ContractError(f"spec belongs to {spec.env_id}, not {env_id}")
    run = _online_run(env_id, spec, seed, cfg)
    steps = [s for s, _ in run.eval_trace]
    scores = [float(v) for _, v in run.eval_trace]
    expert_step, expert_score = steps[-1], scores[-1]
    random_score = random_policy_score(env_id, seed, cfg.random_episodes)
    threshold = medium_threshold(expert_score, random_score)
    medium_idx = next((i for i, v in enumerate(scores) if v >= threshold), None)
    run_name = f"{env_id}/mask_seed={spec.mask_seed}/dim={spec.dim}/collection_seed={seed}"
    if medium_idx is None:
        raise CollectionError(f"{run_name}: no checkpoint reached the medium threshold {threshold:.4f}")
    medium_step = steps[medium_idx]
    provenance = {
        "mask_seed": spec.mask_seed,
        "collection_seed": int(seed),
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
        "checkpoints": [[s, v] for s, v in zip(steps, scores)],
        "random_score": random_score,
        "expert_step": expert_step,
        "expert_score": expert_score,
        "medium_threshold": threshold,
        "medium_step": medium_step,
    }
    medium_policy = _checkpoint_policy(env_id, run.checkpoints[medium_idx][1], spec)
    expert_policy = _checkpoint_policy(env_id, run.checkpoints[-1][1], spec)
    medium = rollout_dataset(medium_policy, env_id, spec, cfg.size_budget, seed * 2 + 1, cfg, "medium")
    expert = rollout_dataset(expert_policy, env_id, spec, cfg.size_budget, seed * 2 + 2, cfg, "expert")
    replay = run.replay.subset(np.arange(medium_step))
    replay = replay_with_boundary(replay)
    tiers = {
        "medium_replay": replace(replay, difficulty="medium_replay"),
        "medium": medium,
        "medium_expert": concatenate(medium, expert, "medium_expert"),
        "expert": expert,
    }
    out = {}
    for name in DIFFICULTIES:
        ds = replace(tiers[name], provenance={**provenance, "difficulty": name})
        out[name], _ = normalize_states(ds)
    log.info("%s: expert %.2f at %d, medium threshold %.2f reached at %d", run_name, expert_score,
             expert_step, threshold, medium_step)
    return out


def replay_with_boundary(dataset: OfflineDataset) -> OfflineDataset:
    """Mark the last transition as a timeout so the truncated buffer ends an episode."""
    if len(dataset) == 0 or dataset.dones[-1]:
        return dataset
    timeouts = dataset.timeouts.copy()
    timeouts[-1] = True
    return replace(dataset, timeouts=timeouts)


def collect_rc_dataset(env_id: str, spec: FeatureSpec, difficulty: str, seed: int,
                       size_budget: int | None = None, config: CollectionConfig | None = None) -> OfflineDataset:
    if difficulty not in DIFFICULTIES:
        raise ContractError(f"unknown difficulty {difficulty!r}")
    cfg = config or CollectionConfig()
    if size_budget is not None:
        cfg = replace(cfg, size_budget=int(size_budget))
    return collect_rc_datasets(env_id, spec, seed, cfg)[difficulty]
