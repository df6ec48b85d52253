"""Small feedforward networks with tape-based reverse-mode gradients.

Every agent in the package is built from :class:`Mlp` instances trained with
:func:`adam_step`. Gradients come from a :class:`Tape` that records a closed
set of batched numpy primitives; anything outside that set is rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from rcorl.exceptions import ContractError, InputShapeError, NumericError

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh")


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index", "backward_fn", "parents")
    # numpy must not silently turn a Var into an object array
    __array_ufunc__ = None

    def __init__(self, value, tape, index, backward_fn=None, parents=()):
        self.value = value
        self.tape = tape
        self.index = index
        self.backward_fn = backward_fn
        self.parents = parents

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Var):
            raise ContractError("product of two recorded values is not a supported primitive")
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Var(shape={self.shape}, index={self.index})"


class Tape:
    """Linear record of a forward computation.

    Nodes are appended in execution order, so reverse order is a valid
    topological order for the backward pass.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.param_keys: dict[int, tuple] = {}
        self._params: dict[tuple, Var] = {}
        self._cache: tuple[int, dict] | None = None

    def _push(self, value, backward_fn=None, parents=()) -> Var:
        node = Var(value, self, len(self.nodes), backward_fn, parents)
        self.nodes.append(node)
        self._cache = None
        return node

    def constant(self, value) -> Var:
        return self._push(np.asarray(value, dtype=np.float64))

    def param(self, array: np.ndarray, key: tuple) -> Var:
        node = self._params.get(key)
        if node is not None and node.value is array:
            return node
        node = self._push(array)
        self._params[key] = node
        self.param_keys[node.index] = key
        return node

    def gradients(self, loss: Var) -> dict[tuple, np.ndarray]:
        """Adjoints of every recorded parameter with respect to ``loss``."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if np.ndim(loss.value) != 0:
            raise ContractError(f"loss must be a scalar, got shape {np.shape(loss.value)}")
        if self._cache is not None and self._cache[0] == loss.index:
            return self._cache[1]
        adjoints: dict[int, np.ndarray] = {loss.index: np.float64(1.0)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = adjoints.pop(node.index, None)
            if g is None:
                continue
            if node.index in self.param_keys:
                adjoints[node.index] = g
                continue
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not isinstance(parent, Var):
                    continue
                prev = adjoints.get(parent.index)
                adjoints[parent.index] = pg if prev is None else prev + pg
        grads = {self.param_keys[i]: g for i, g in adjoints.items() if i in self.param_keys}
        self._cache = (loss.index, grads)
        return grads


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise ContractError("at least one operand must be recorded on a tape")


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ContractError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# Primitive set. Each returns a new Var whose backward maps the output
# adjoint to one adjoint per parent.


def affine(x: Var, weight: Var, bias: Var) -> Var:
    """``x @ weight.T + bias`` for a batch of row vectors."""
    tape = _tape_of(x, weight, bias)
    x, weight, bias = _lift(tape, x), _lift(tape, weight), _lift(tape, bias)
    xv, wv = x.value, weight.value

    def backward(g):
        if xv.ndim == 1:
            return g @ wv, np.outer(g, xv), g
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return tape._push(xv @ wv.T + bias.value, backward, (x, weight, bias))


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape._push(np.where(mask, x.value, 0.0), lambda g: (g * mask,), (x,))


def tanh(x: Var) -> Var:
    out = np.tanh(x.value)
    return x.tape._push(out, lambda g: (g * (1.0 - out * out),), (x,))


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = np.shape(a.value), np.shape(b.value)
    return tape._push(
        a.value + b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        (a, b),
    )


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = np.shape(a.value), np.shape(b.value)
    return tape._push(
        a.value - b.value,
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        (a, b),
    )


def scale(x: Var, c) -> Var:
    """Multiply by a constant scalar or a constant array of weights."""
    if isinstance(c, Var):
        raise ContractError("scale factor must be a constant")
    c = np.asarray(c, dtype=np.float64)
    shape = np.shape(x.value)
    return x.tape._push(x.value * c, lambda g: (_unbroadcast(g * c, shape),), (x,))


def square(x: Var) -> Var:
    xv = x.value
    return x.tape._push(xv * xv, lambda g: (2.0 * g * xv,), (x,))


def mean(x: Var) -> Var:
    xv = x.value
    n = xv.size
    return x.tape._push(np.float64(xv.mean()), lambda g: (np.full(xv.shape, g / n),), (x,))


def row_sum(x: Var) -> Var:
    """Sum over the last axis."""
    xv = x.value
    return x.tape._push(xv.sum(axis=-1), lambda g: (np.broadcast_to(np.expand_dims(g, -1), xv.shape).copy(),), (x,))


def weighted_row_sum(x: Var, weights: np.ndarray) -> Var:
    """``sum_j weights[..., j] * x[..., j]`` with constant weights (e.g. a one-hot selector)."""
    w = np.asarray(weights, dtype=np.float64)
    return x.tape._push((x.value * w).sum(axis=-1), lambda g: (np.expand_dims(g, -1) * w,), (x,))


def minimum(a, b) -> Var:
    """Elementwise min; ties send the adjoint to the first operand."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    pick_a = a.value <= b.value
    return tape._push(
        np.where(pick_a, a.value, b.value),
        lambda g: (np.where(pick_a, g, 0.0), np.where(pick_a, 0.0, g)),
        (a, b),
    )


def logsumexp(x: Var) -> Var:
    """Numerically stable log-sum-exp over the last axis."""
    xv = x.value
    m = xv.max(axis=-1, keepdims=True)
    e = np.exp(xv - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    soft = e / s
    return x.tape._push(out, lambda g: (np.expand_dims(g, -1) * soft,), (x,))


def concat(a, b) -> Var:
    """Concatenate along the last axis (state/action critic inputs)."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    k = a.value.shape[-1]
    return tape._push(
        np.concatenate([a.value, b.value], axis=-1),
        lambda g: (g[..., :k], g[..., k:]),
        (a, b),
    )


def mse(a, b) -> Var:
    """Mean squared error over every element."""
    return mean(square(sub(a, b)))


# ---------------------------------------------------------------------------
# Mlp
# ---------------------------------------------------------------------------

_NUMPY_ACT: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "identity": lambda z: z,
}
_TAPE_ACT: dict[str, Callable[[Var], Var]] = {
    "relu": relu,
    "tanh": tanh,
    "identity": lambda v: v,
}


class Mlp:
    """Dense feedforward network.

    ``weights[k]`` has shape ``(layer_dims[k+1], layer_dims[k])``. Calling the
    network on an array runs a plain numpy forward pass; calling it with a
    ``tape`` records the pass so that :func:`backprop` can differentiate it.
    """

    def __init__(
        self,
        layer_dims: Sequence[int],
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ):
        layer_dims = tuple(int(d) for d in layer_dims)
        if len(layer_dims) < 2 or any(d <= 0 for d in layer_dims):
            raise ContractError(f"layer_dims must hold at least two positive sizes, got {layer_dims}")
        if hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ContractError(f"unknown hidden activation {hidden_activation!r}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ContractError(f"unknown output activation {output_activation!r}")
        if len(weights) != len(layer_dims) - 1 or len(biases) != len(layer_dims) - 1:
            raise ContractError("need one weight matrix and one bias vector per layer")
        self.layer_dims = layer_dims
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (layer_dims[k + 1], layer_dims[k]) or b.shape != (layer_dims[k + 1],):
                raise ContractError(f"layer {k} parameter shapes {w.shape}/{b.shape} disagree with layer_dims")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError(f"layer {k} has non-finite parameters", layer=k)

    @classmethod
    def init(
        cls,
        layer_dims: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        zero_last: bool = False,
    ) -> "Mlp":
        """Uniform(+-1/sqrt(fan_in)) initialisation; ``zero_last`` zeroes the output layer."""
        weights, biases = [], []
        n_layers = len(layer_dims) - 1
        for k in range(n_layers):
            fan_in, fan_out = int(layer_dims[k]), int(layer_dims[k + 1])
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
            if zero_last and k == n_layers - 1:
                w[:] = 0.0
                b[:] = 0.0
            weights.append(w)
            biases.append(b)
        return cls(layer_dims, weights, biases, hidden_activation, output_activation)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def _check_input(self, x) -> None:
        if np.shape(x)[-1:] != (self.input_dim,) or np.ndim(x) not in (1, 2):
            raise InputShapeError(f"expected input of width {self.input_dim}, got shape {np.shape(x)}")

    def __call__(self, x, tape: Tape | None = None):
        if tape is None and not isinstance(x, Var):
            return self.forward(x)
        tape = tape if tape is not None else x.tape
        self._check_input(x.value if isinstance(x, Var) else x)
        h = _lift(tape, x if isinstance(x, Var) else np.asarray(x, dtype=np.float64))
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = affine(h, tape.param(w, (id(self), k, "W")), tape.param(b, (id(self), k, "b")))
            h = _TAPE_ACT[self.output_activation if k == last else self.hidden_activation](h)
        return h

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        last = len(self.weights) - 1
        hidden = _NUMPY_ACT[self.hidden_activation]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.T + b
            x = _NUMPY_ACT[self.output_activation](x) if k == last else hidden(x)
        return x

    def copy(self) -> "Mlp":
        return Mlp(self.layer_dims, self.weights, self.biases, self.hidden_activation, self.output_activation)

    def same_architecture(self, other: "Mlp") -> bool:
        return (
            self.layer_dims == other.layer_dims
            and self.hidden_activation == other.hidden_activation
            and self.output_activation == other.output_activation
        )

    def manifest(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{k}"] = w
            out[f"{prefix}b{k}"] = b
        return out

    @classmethod
    def from_arrays(cls, manifest: dict, arrays: dict[str, np.ndarray], prefix: str = "") -> "Mlp":
        n = len(manifest["layer_dims"]) - 1
        return cls(
            manifest["layer_dims"],
            [arrays[f"{prefix}W{k}"] for k in range(n)],
            [arrays[f"{prefix}b{k}"] for k in range(n)],
            manifest["hidden_activation"],
            manifest["output_activation"],
        )

    def __eq__(self, other):
        if not isinstance(other, Mlp) or not self.same_architecture(other):
            return False
        return all(np.array_equal(p, q) for p, q in zip(self.parameters(), other.parameters()))

    __hash__ = None

    def __repr__(self):
        return f"Mlp({list(self.layer_dims)}, {self.hidden_activation}->{self.output_activation})"


def mlp_forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def backprop(net: Mlp, tape: Tape, loss: Var) -> list[np.ndarray]:
    """Gradients of ``loss`` for each of ``net.parameters()``.

    Parameters the loss does not depend on get zero gradients.
    """
    grads = tape.gradients(loss)
    out = []
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        gw = grads.get((id(net), k, "W"))
        gb = grads.get((id(net), k, "b"))
        out.append(np.zeros_like(w) if gw is None else np.asarray(gw, dtype=np.float64))
        out.append(np.zeros_like(b) if gb is None else np.asarray(gb, dtype=np.float64))
    return out


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 3e-4
    beta_m: float = 0.9
    beta_v: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], learning_rate: float = 3e-4, **kwargs) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            **kwargs,
        )

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.first_moment, self.second_moment)):
            out[f"{prefix}m{i}"] = m
            out[f"{prefix}v{i}"] = v
        return out


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Returns ``(params, state)``. Raises :class:`NumericError` naming the
    layer when a gradient is not finite.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ContractError("params, grads and optimizer state disagree in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g) or p.shape != state.first_moment[i].shape:
            raise ContractError(f"shape mismatch at parameter {i}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {i // 2}", layer=i // 2)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta_m, state.beta_v
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


@dataclass
class Optimizer:
    """An Mlp paired with its Adam state."""

    net: Mlp
    state: AdamState = field(default=None)
    learning_rate: float = 3e-4

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.for_params(self.net.parameters(), self.learning_rate)

    def step(self, grads: list[np.ndarray]) -> None:
        adam_step(self.net.parameters(), grads, self.state)


def soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """Polyak averaging ``p' <- tau * p + (1 - tau) * p'`` in place."""
    if not target.same_architecture(online):
        raise ContractError("soft_update needs identical architectures")
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    for pt, po in zip(target.parameters(), online.parameters()):
        pt *= 1.0 - tau
        pt += tau * po
    return target


def hard_update(target: Mlp, online: Mlp) -> Mlp:
    if not target.same_architecture(online):
        raise ContractError("hard_update needs identical architectures")
    for pt, po in zip(target.parameters(), online.parameters()):
        pt[...] = po
    return target
