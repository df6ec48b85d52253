"""Independent reference computations used by several test modules.

Nothing here calls the package's autodiff, training or evaluation code
paths under test; each oracle recomputes its quantity from first principles.
"""
from __future__ import annotations

import numpy as np

from rcorl.neural import Mlp, Tape, concat, logsumexp, mean, minimum, mse, row_sum, scale, square, weighted_row_sum

FD_STEP = 1e-5


def central_differences(loss_value, params: list[np.ndarray], h: float = FD_STEP) -> list[np.ndarray]:
    """Numerical gradient of ``loss_value()`` for each array in ``params`` (perturbed in place)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_value()
            flat[i] = old - h
            down = loss_value()
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
    return float(np.linalg.norm(analytic - numeric) / scale_)


LOSS_KINDS = ("squared_error", "weighted_sum", "min_of_two_critics", "log_sum_exp", "actor_through_critic")


def random_composition(rng: np.random.Generator, kind: str):
    """A small random network/loss pair.

    Returns ``(nets, build)`` where ``build(tape)`` records the scalar loss.
    """
    n_layers = int(rng.integers(1, 4))
    hidden = [int(rng.integers(1, 17)) for _ in range(n_layers - 1)]
    act = str(rng.choice(["relu", "tanh"]))
    batch = int(rng.integers(1, 9))
    d_in = int(rng.integers(1, 7))
    d_out = int(rng.integers(1, 6))
    x = rng.normal(size=(batch, d_in))

    if kind == "squared_error":
        net = Mlp.init((d_in, *hidden, d_out), rng, act, str(rng.choice(["identity", "tanh"])))
        y = rng.normal(size=(batch, d_out))
        return [net], lambda tape: mse(net(x, tape), y)
    if kind == "weighted_sum":
        net = Mlp.init((d_in, *hidden, d_out), rng, act)
        w = rng.normal(size=(batch, d_out))
        return [net], lambda tape: mean(square(weighted_row_sum(net(x, tape), w))) + scale(mean(row_sum(net(x, tape))), 0.3)
    if kind == "min_of_two_critics":
        d_a = int(rng.integers(1, 4))
        a = rng.uniform(-1, 1, size=(batch, d_a))
        c1 = Mlp.init((d_in + d_a, *hidden, 1), rng, act)
        c2 = Mlp.init((d_in + d_a, *hidden, 1), rng, act)
        y = rng.normal(size=(batch, 1))

        def build(tape):
            sa = tape.constant(np.concatenate([x, a], axis=1))
            return mse(minimum(c1(sa, tape), c2(sa, tape)), y)
        return [c1, c2], build
    if kind == "log_sum_exp":
        n_actions = max(d_out, 2)
        net = Mlp.init((d_in, *hidden, n_actions), rng, act)
        onehot = np.eye(n_actions)[rng.integers(0, n_actions, size=batch)]
        alpha = float(rng.uniform(0.1, 2.0))
        y = rng.normal(size=batch)

        def build(tape):
            q = net(x, tape)
            q_data = weighted_row_sum(q, onehot)
            return mse(q_data, y) + scale(mean(logsumexp(q) - q_data), alpha)
        return [net], build
    # deterministic actor scored by a critic, plus a behaviour-cloning pull
    d_a = d_out
    actor = Mlp.init((d_in, *hidden, d_a), rng, act, "tanh")
    critic = Mlp.init((d_in + d_a, *hidden, 1), rng, act)
    a_data = rng.uniform(-1, 1, size=(batch, d_a))
    lam = float(rng.uniform(0.1, 3.0))

    def build(tape):
        s = tape.constant(x)
        pi = actor(s, tape)
        return -lam * mean(critic(concat(s, pi), tape)) + mse(pi, a_data)
    return [actor, critic], build


def gradient_check(seed: int, kind: str | None = None) -> float:
    """Worst relative error between tape gradients and central differences for one composition."""
    rng = np.random.default_rng(seed)
    kind = kind or LOSS_KINDS[seed % len(LOSS_KINDS)]
    nets, build = random_composition(rng, kind)
    tape = Tape()
    loss = build(tape)
    grads = tape.gradients(loss)
    worst = 0.0
    for net in nets:
        params = net.parameters()
        keys = [(id(net), k, t) for k in range(len(net.weights)) for t in ("W", "b")]
        numeric = central_differences(lambda: float(build(Tape()).value), params)
        for key, p, gn in zip(keys, params, numeric):
            ga = grads.get(key, np.zeros_like(p))
            worst = max(worst, relative_error(np.asarray(ga), gn))
    return worst


# ---------------------------------------------------------------------------
# Tabular chain MDP for fitted Q evaluation
# ---------------------------------------------------------------------------

CHAIN_STATES = 5


def chain_policy_value(gamma: float, rewards: np.ndarray, next_state: np.ndarray, terminal: np.ndarray) -> np.ndarray:
    """Exact value of a deterministic policy on a chain: solve (I - gamma P) V = R."""
    n = rewards.shape[0]
    P = np.zeros((n, n))
    for s in range(n):
        if not terminal[s]:
            P[s, next_state[s]] = 1.0
    return np.linalg.solve(np.eye(n) - gamma * P, rewards)
