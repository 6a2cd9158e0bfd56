"""Minimal reverse-mode differentiation over numpy arrays.

Values are float64 arrays, usually ``(batch, features)``. Each :class:`Node`
keeps a closure mapping its output gradient to gradients for its parents;
:func:`backward` walks the graph once in reverse topological order.
Parameter leaves come from a :class:`ParameterStore` and accumulate their
gradients straight into the store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError, TrainingError

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
STD_FLOOR = 1e-6


class Node:
    __slots__ = ("value", "parents", "backward_fn", "sink")

    def __init__(self, value, parents: tuple = (), backward_fn: Callable | None = None, sink=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.sink = sink

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_node(other)))

    def __rsub__(self, other):
        return add(as_node(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Node):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return Node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def neg(a: Node) -> Node:
    return Node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return Node(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def reciprocal(a: Node) -> Node:
    out = 1.0 / a.value
    return Node(out, (a,), lambda g: (-g * out * out,))


def matmul(x: Node, w: Node) -> Node:
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"matmul width mismatch: {xv.shape} @ {wv.shape}")
    return Node(xv @ wv, (x, w), lambda g: (g @ wv.T, xv.T @ g))


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b for x of shape (batch, in)."""
    xv, wv = x.value, w.value
    if xv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"affine width mismatch: input {xv.shape}, weight {wv.shape}")
    return Node(
        xv @ wv + b.value,
        (x, w, b),
        lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)),
    )


def relu(a: Node) -> Node:
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def softplus_value(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid_value(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a: Node) -> Node:
    s = sigmoid_value(a.value)
    return Node(softplus_value(a.value), (a,), lambda g: (g * s,))


def sigmoid(a: Node) -> Node:
    s = sigmoid_value(a.value)
    return Node(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return Node(t, (a,), lambda g: (g * (1.0 - t * t),))


def identity(a: Node) -> Node:
    return a


def exp(a: Node) -> Node:
    e = np.exp(a.value)
    return Node(e, (a,), lambda g: (g * e,))


def log(a: Node) -> Node:
    v = a.value
    return Node(np.log(v), (a,), lambda g: (g / v,))


def square(a: Node) -> Node:
    v = a.value
    return Node(v * v, (a,), lambda g: (2.0 * g * v,))


def reduce_sum(a: Node, axis: int | None = None) -> Node:
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(np.sum(a.value, axis=axis), (a,), back)


def reduce_mean(a: Node, axis: int | None = None) -> Node:
    count = a.value.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis) * (1.0 / count)


def stack_rows(nodes: Sequence[Node]) -> Node:
    """Stack equally shaped nodes along a new leading axis."""
    values = np.stack([n.value for n in nodes])
    return Node(values, tuple(nodes), lambda g: tuple(g[i] for i in range(len(nodes))))


def gaussian_log_prob(x, mean: Node, std: Node) -> Node:
    """Diagonal Gaussian log-density summed over the last axis."""
    x, mean, std = as_node(x), as_node(mean), as_node(std)
    xv, mv, sv = x.value, mean.value, std.value
    if not (xv.shape == mv.shape == sv.shape):
        raise ShapeError(f"gaussian_log_prob shapes differ: {xv.shape}, {mv.shape}, {sv.shape}")
    diff = xv - mv
    inv_var = 1.0 / (sv * sv)
    out = np.sum(-0.5 * diff * diff * inv_var - np.log(sv) - _HALF_LOG_2PI, axis=-1)

    def back(g):
        g = np.expand_dims(g, -1)
        dx = -diff * inv_var * g
        ds = (diff * diff * inv_var / sv - 1.0 / sv) * g
        return dx, -dx, ds

    return Node(out, (x, mean, std), back)


def gaussian_reparameterized_sample(mean: Node, std: Node, noise) -> Node:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mean.shape or std.shape != mean.shape:
        raise ShapeError(f"noise {noise.shape} / std {std.shape} must match mean {mean.shape}")
    if np.any(std.value <= 0):
        raise DomainError("reparameterized sample needs strictly positive std")
    return mean + std * noise


def _needs_grad(node: Node) -> bool:
    return node.backward_fn is not None or node.sink is not None


def backward(root: Node, grad: np.ndarray | float = 1.0) -> None:
    """Propagate d(root)/d(node) to every parameter leaf reachable from root."""
    # iterative post-order DFS; constants are never visited
    order: list[Node] = []
    expanded: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in expanded:
            continue
        expanded.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in expanded and _needs_grad(p):
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {
        id(root): np.broadcast_to(np.asarray(grad, dtype=np.float64), root.shape).copy()
    }
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.sink is not None:
            node.sink += g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            key = id(parent)
            if key not in expanded:
                continue
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


class ParameterStore:
    """Named parameter arrays with gradient slots and optimizer state."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self.adam_steps = 0

    def create(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise ValueError(f"parameter {name!r} already exists")
        v = np.array(value, dtype=np.float64)
        self._values[name] = v
        self._grads[name] = np.zeros_like(v)
        return v

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        v = np.asarray(value, dtype=np.float64)
        if v.shape != self._values[name].shape:
            raise ShapeError(f"parameter {name!r} has shape {self._values[name].shape}, got {v.shape}")
        self._values[name][...] = v

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def node(self, name: str) -> Node:
        return Node(self._values[name], sink=self._grads[name])

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def n_parameters(self) -> int:
        return int(np.sum([v.size for v in self._values.values()]))

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, v in self._values.items():
            out.create(name, v.copy())
        return out

    def equals(self, other: "ParameterStore") -> bool:
        return set(self.names()) == set(other.names()) and all(
            self._values[k].shape == other[k].shape and np.array_equal(self._values[k], other[k])
            for k in self._values
        )

    def flat_values(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._values.values()]) if self._values else np.zeros(0)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


ACTIVATIONS: dict[str, Callable[[Node], Node]] = {
    "identity": identity,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths including the input width, one activation per layer."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"bad MLP widths {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need exactly one activation per layer")
        unknown = set(self.activations) - set(ACTIVATIONS)
        if unknown:
            raise ValueError(f"unknown activations {sorted(unknown)}")

    @property
    def n_layers(self) -> int:
        return len(self.activations)


def init_mlp(store: ParameterStore, prefix: str, spec: MLPSpec, rng: np.random.Generator) -> None:
    for i in range(spec.n_layers):
        store.create(f"{prefix}.w{i}", glorot_uniform(rng, spec.widths[i], spec.widths[i + 1]))
        store.create(f"{prefix}.b{i}", np.zeros(spec.widths[i + 1]))


def mlp_forward(spec: MLPSpec, store: ParameterStore, prefix: str, x) -> Node:
    h = as_node(x)
    for i, act in enumerate(spec.activations):
        w = store.node(f"{prefix}.w{i}")
        if h.value.ndim != 2 or h.shape[1] != w.shape[0]:
            raise ShapeError(f"{prefix} layer {i}: input width {h.shape[-1]} != {w.shape[0]}")
        h = ACTIVATIONS[act](affine(h, w, store.node(f"{prefix}.b{i}")))
    return h


@dataclass(frozen=True)
class RNNSpec:
    input_width: int
    hidden_width: int


def init_rnn(store: ParameterStore, prefix: str, spec: RNNSpec, rng: np.random.Generator) -> None:
    store.create(f"{prefix}.wx", glorot_uniform(rng, spec.input_width, spec.hidden_width))
    store.create(f"{prefix}.wh", glorot_uniform(rng, spec.hidden_width, spec.hidden_width))
    store.create(f"{prefix}.b", np.zeros(spec.hidden_width))


def rnn_forward(
    store: ParameterStore, prefix: str, inputs: Sequence, direction: str = "forward"
) -> tuple[Node, list[Node]]:
    """Plain ReLU recurrent cell, h_t = relu(h_{t-1} W_h + x_t W_x + b), h_0 = 0.

    Returns the final hidden state and the per-position states, where
    ``states[i]`` is the hidden state right after consuming ``inputs[i]``
    (so for ``direction="backward"`` it summarizes ``inputs[i:]``).
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if len(inputs) == 0:
        raise ShapeError("rnn_forward needs a non-empty sequence")
    wx, wh, b = store.node(f"{prefix}.wx"), store.node(f"{prefix}.wh"), store.node(f"{prefix}.b")
    order = range(len(inputs)) if direction == "forward" else range(len(inputs) - 1, -1, -1)
    states: list[Node | None] = [None] * len(inputs)
    h = None
    for i in order:
        x = as_node(inputs[i])
        if x.value.ndim != 2 or x.shape[1] != wx.shape[0]:
            raise ShapeError(f"{prefix}: input width {x.shape[-1]} != {wx.shape[0]}")
        pre = affine(x, wx, b)
        if h is not None:
            pre = pre + matmul(h, wh)
        h = relu(pre)
        states[i] = h
    return h, states


def clip_grad_norm(stores: Iterable[ParameterStore], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most max_norm."""
    stores = list(stores)
    total = 0.0
    for store in stores:
        for name in store.names():
            g = store.grad(name)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
            total += float(np.dot(g.ravel(), g.ravel()))
    norm = math.sqrt(total)
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for store in stores:
            for name in store.names():
                store.grad(name)[...] *= factor
    return norm


def adam_step(
    params: ParameterStore | Sequence[ParameterStore],
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    clip_norm: float | None = 10.0,
):
    """Clip the global gradient norm, then apply one Adam update in place."""
    stores = [params] if isinstance(params, ParameterStore) else list(params)
    clip_grad_norm(stores, clip_norm)
    b1, b2 = betas
    for store in stores:
        store.adam_steps += 1
        t = store.adam_steps
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name in store.names():
            g = store.grad(name)
            m = store._adam_m.setdefault(name, np.zeros_like(g))
            v = store._adam_v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            store._values[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params
