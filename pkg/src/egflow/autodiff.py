"""Tape-based reverse-mode automatic differentiation over float32 arrays.

The op vocabulary is deliberately small: matmul, add, sub, mul, scale,
square, sum, mean, slice, concat and the MLP activations. Each op records
one node on an explicit :class:`Tape`; :func:`backward` replays the tape
once in reverse and accumulates exact gradients into every leaf. Plain
ndarrays mix freely with nodes as constants and receive no gradient.

Everything downstream (flow models, critics, learnable schedules) trains
through this module with Adam.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, DomainError, NumericError, StateError

Array = np.ndarray

ACTIVATIONS = ("mish", "tanh", "gelu", "identity")

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def as_f32(x) -> Array:
    return np.ascontiguousarray(x, dtype=np.float32)


def require_finite(arr: Array, context: str) -> Array:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {context}")
    return arr


def softplus(x: Array) -> Array:
    # max(x,0) + log1p(e^-|x|): overflow-free for large |x|
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def mish(x: Array) -> Array:
    return x * np.tanh(softplus(x))


def _mish_deriv(x: Array) -> Array:
    tsp = np.tanh(softplus(x))
    return tsp + x * (1.0 - tsp * tsp) * sigmoid(x)


def gelu(x: Array) -> Array:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_deriv(x: Array) -> Array:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


_ACT_FWD: dict[str, Callable[[Array], Array]] = {
    "mish": mish,
    "tanh": np.tanh,
    "gelu": gelu,
    "identity": lambda x: x,
}

_ACT_DERIV: dict[str, Callable[[Array], Array]] = {
    "mish": _mish_deriv,
    "tanh": lambda x: 1.0 - np.tanh(x) ** 2,
    "gelu": _gelu_deriv,
    "identity": lambda x: np.ones_like(x),
}


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Node:
    """A value recorded on a tape (leaf or op output)."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: "Tape", idx: int, value: Array):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node(idx={self.idx}, shape={self.value.shape})"


class Tape:
    """Ordered record of one forward pass.

    Every op appends a node whose inputs already sit on the tape, so the
    record is topologically ordered by construction. A tape supports
    exactly one backward pass; recording or replaying after that raises
    :class:`StateError`.
    """

    def __init__(self):
        self._values: list[Array] = []
        self._backwards: list = []  # per node: callable(grad, grads) | None
        self._done = False
        self._mlp_leaves: dict[int, list[tuple[Node, Node]]] = {}

    def __len__(self) -> int:
        return len(self._values)

    @property
    def consumed(self) -> bool:
        return self._done

    def _record(self, value: Array, backward_fn) -> Node:
        if self._done:
            raise StateError("tape already consumed by a backward pass")
        idx = len(self._values)
        self._values.append(value)
        self._backwards.append(backward_fn)
        return Node(self, idx, value)

    def leaf(self, value: Array) -> Node:
        """Register a differentiable input (parameter or tracked value)."""
        return self._record(np.asarray(value), None)

    @staticmethod
    def _val(x) -> Array:
        return x.value if isinstance(x, Node) else np.asarray(x)

    def _idx(self, x) -> int | None:
        if isinstance(x, Node):
            if x.tape is not self:
                raise StateError("node belongs to a different tape")
            return x.idx
        return None

    # -- ops ----------------------------------------------------------------

    def matmul(self, a, b) -> Node:
        av, bv = self._val(a), self._val(b)
        if av.ndim != 2 or bv.ndim != 2:
            raise DimensionError("matmul expects 2-D operands")
        if av.shape[1] != bv.shape[0]:
            raise DimensionError(f"matmul shapes {av.shape} x {bv.shape}")
        ia, ib = self._idx(a), self._idx(b)
        out = av @ bv

        def bwd(g, grads):
            if ia is not None:
                _accum(grads, ia, g @ bv.T)
            if ib is not None:
                _accum(grads, ib, av.T @ g)

        return self._record(out, bwd if (ia is not None or ib is not None) else None)

    def add(self, a, b) -> Node:
        av, bv = self._val(a), self._val(b)
        ia, ib = self._idx(a), self._idx(b)
        out = av + bv

        def bwd(g, grads):
            if ia is not None:
                _accum(grads, ia, _unbroadcast(g, av.shape))
            if ib is not None:
                _accum(grads, ib, _unbroadcast(g, bv.shape))

        return self._record(out, bwd if (ia is not None or ib is not None) else None)

    def sub(self, a, b) -> Node:
        av, bv = self._val(a), self._val(b)
        ia, ib = self._idx(a), self._idx(b)
        out = av - bv

        def bwd(g, grads):
            if ia is not None:
                _accum(grads, ia, _unbroadcast(g, av.shape))
            if ib is not None:
                _accum(grads, ib, _unbroadcast(-g, bv.shape))

        return self._record(out, bwd if (ia is not None or ib is not None) else None)

    def mul(self, a, b) -> Node:
        av, bv = self._val(a), self._val(b)
        ia, ib = self._idx(a), self._idx(b)
        out = av * bv

        def bwd(g, grads):
            if ia is not None:
                _accum(grads, ia, _unbroadcast(g * bv, av.shape))
            if ib is not None:
                _accum(grads, ib, _unbroadcast(g * av, bv.shape))

        return self._record(out, bwd if (ia is not None or ib is not None) else None)

    def scale(self, a, c: float) -> Node:
        av = self._val(a)
        ia = self._idx(a)
        out = av * c

        def bwd(g, grads):
            _accum(grads, ia, g * c)

        return self._record(out, bwd if ia is not None else None)

    def square(self, a) -> Node:
        av = self._val(a)
        ia = self._idx(a)
        out = av * av

        def bwd(g, grads):
            _accum(grads, ia, 2.0 * av * g)

        return self._record(out, bwd if ia is not None else None)

    def sum(self, a, axis: int | None = None) -> Node:
        av = self._val(a)
        ia = self._idx(a)
        out = np.asarray(av.sum(axis=axis))

        def bwd(g, grads):
            if axis is None:
                _accum(grads, ia, np.broadcast_to(g, av.shape))
            else:
                _accum(grads, ia, np.broadcast_to(np.expand_dims(g, axis), av.shape))

        return self._record(out, bwd if ia is not None else None)

    def mean(self, a) -> Node:
        av = self._val(a)
        ia = self._idx(a)
        out = np.asarray(av.mean())
        size = av.size

        def bwd(g, grads):
            _accum(grads, ia, np.broadcast_to(g / size, av.shape))

        return self._record(out, bwd if ia is not None else None)

    def slice_last(self, a, lo: int, hi: int) -> Node:
        av = self._val(a)
        ia = self._idx(a)
        out = av[..., lo:hi]

        def bwd(g, grads):
            full = np.zeros_like(av)
            full[..., lo:hi] = g
            _accum(grads, ia, full)

        return self._record(out, bwd if ia is not None else None)

    def concat(self, parts: Sequence) -> Node:
        values = [self._val(p) for p in parts]
        idxs = [self._idx(p) for p in parts]
        out = np.concatenate(values, axis=-1)
        widths = [v.shape[-1] for v in values]
        offsets = np.cumsum([0] + widths)

        def bwd(g, grads):
            for i, idx in enumerate(idxs):
                if idx is not None:
                    _accum(grads, idx, g[..., offsets[i]:offsets[i + 1]])

        tracked = any(i is not None for i in idxs)
        return self._record(out, bwd if tracked else None)

    def activation(self, a, kind: str) -> Node:
        if kind not in ACTIVATIONS:
            raise DomainError(f"unknown activation {kind!r}")
        av = self._val(a)
        ia = self._idx(a)
        out = _ACT_FWD[kind](av)
        if kind == "identity":
            return self._record(av, (lambda g, grads: _accum(grads, ia, g)) if ia is not None else None)

        def bwd(g, grads):
            _accum(grads, ia, _ACT_DERIV[kind](av) * g)

        return self._record(out, bwd if ia is not None else None)


def _accum(grads: list, idx: int, g: Array) -> None:
    cur = grads[idx]
    grads[idx] = g if cur is None else cur + g


class Gradients:
    """Gradients of one backward pass, indexable by node or by MLP."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def of(self, node: Node) -> Array:
        if node.tape is not self._tape:
            raise StateError("node belongs to a different tape")
        g = self._grads[node.idx]
        return g if g is not None else np.zeros_like(node.value)

    def mlp(self, params: "MlpParams") -> list[Array]:
        """Gradient arrays in declaration order [dW0, db0, dW1, db1, ...]."""
        leaves = self._tape._mlp_leaves.get(id(params))
        if leaves is None:
            raise StateError("parameters were not used in this forward pass")
        out: list[Array] = []
        for w_node, b_node in leaves:
            out.append(self.of(w_node))
            out.append(self.of(b_node))
        return out


def backward(tape: Tape, output: Node, seed: Array | None = None) -> Gradients:
    """Reverse-replay the tape from `output`, seeded with d<seed, output>.

    Exactly one backward pass is allowed per forward pass.
    """
    if len(tape) == 0:
        raise StateError("backward without a recorded forward pass")
    if not isinstance(output, Node) or output.tape is not tape:
        raise StateError("output node was not recorded on this tape")
    if tape._done:
        raise StateError("tape already consumed by a backward pass")
    if seed is None:
        seed = np.ones_like(output.value)
    else:
        seed = np.asarray(seed, dtype=output.value.dtype)
        if seed.shape != output.value.shape:
            raise DimensionError(
                f"seed shape {seed.shape} != output shape {output.value.shape}")
    grads: list = [None] * len(tape)
    grads[output.idx] = seed
    for i in range(output.idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        fn = tape._backwards[i]
        if fn is not None:
            fn(g, grads)
    tape._done = True
    return Gradients(tape, grads)


# -- MLP ---------------------------------------------------------------------


@dataclass
class MlpParams:
    """Fully-connected net parameters; hidden activation applies between layers."""

    weights: list[Array]
    biases: list[Array]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("weights/biases must pair up, one per layer")
        self.weights = [as_f32(w) for w in self.weights]
        self.biases = [as_f32(b) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise DimensionError(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(
                    f"layer {i}: input dim {w.shape[0]} != previous output "
                    f"{self.weights[i - 1].shape[1]}")

    @classmethod
    def create(cls, sizes: Sequence[int], activation: str,
               rng: np.random.Generator) -> "MlpParams":
        """Glorot-uniform weights, zero biases."""
        if len(sizes) < 2:
            raise DimensionError("need at least input and output sizes")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32))
            biases.append(np.zeros(fan_out, dtype=np.float32))
        return cls(weights=weights, biases=biases, activation=activation)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[Array]:
        """Parameter arrays in declaration order [W0, b0, W1, b1, ...]."""
        out: list[Array] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def flatten(self) -> Array:
        return np.concatenate([a.ravel() for a in self.arrays()]).astype(np.float32)

    def load_flat(self, vec: Array) -> None:
        vec = np.asarray(vec, dtype=np.float32)
        if vec.size != self.n_params:
            raise DimensionError(f"expected {self.n_params} params, got {vec.size}")
        pos = 0
        for a in self.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def copy(self) -> "MlpParams":
        return MlpParams(weights=[w.copy() for w in self.weights],
                         biases=[b.copy() for b in self.biases],
                         activation=self.activation)


def _mlp_nodes(tape: Tape, params: MlpParams) -> list[tuple[Node, Node]]:
    # One leaf pair per layer, shared across repeated forwards on one tape.
    nodes = tape._mlp_leaves.get(id(params))
    if nodes is None:
        nodes = [(tape.leaf(w), tape.leaf(b))
                 for w, b in zip(params.weights, params.biases)]
        tape._mlp_leaves[id(params)] = nodes
    return nodes


def mlp_forward(params: MlpParams, x, tape: Tape | None = None):
    """Forward pass; records on `tape` when given, pure numpy otherwise.

    Hidden layers apply `params.activation`; the output layer is linear.
    """
    xv = x.value if isinstance(x, Node) else np.asarray(x)
    if xv.shape[-1] != params.in_dim:
        raise DimensionError(
            f"input dim {xv.shape[-1]} != first layer input {params.in_dim}")
    n_layers = len(params.weights)
    if tape is None:
        h = xv
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            h = h @ w + b
            if i < n_layers - 1:
                h = _ACT_FWD[params.activation](h)
        return h
    if xv.ndim != 2:
        raise DimensionError("taped forward expects a 2-D batch")
    nodes = _mlp_nodes(tape, params)
    h = x
    for i, (w_node, b_node) in enumerate(nodes):
        h = tape.add(tape.matmul(h, w_node), b_node)
        if i < n_layers - 1:
            h = tape.activation(h, params.activation)
    return h


# -- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    """Moment estimates and hyperparameters for one parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None  # max global norm; None disables clipping
    step: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)

    @classmethod
    def for_params(cls, arrays: Sequence[Array], lr: float, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
        return state


def adam_step(arrays: Sequence[Array], grads: Sequence[Array],
              state: AdamState) -> tuple[Sequence[Array], AdamState]:
    """Standard Adam with bias correction; updates `arrays` in place."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise DimensionError("params/grads/state length mismatch")
    for a, g in zip(arrays, grads):
        if a.shape != g.shape:
            raise DimensionError(f"param {a.shape} vs grad {g.shape}")
    if state.grad_clip is not None:
        total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                                  for g in grads)))
        if total > state.grad_clip and total > 0.0:
            factor = state.grad_clip / total
            grads = [g * factor for g in grads]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        a -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return arrays, state


# -- finite differences (test oracle) -----------------------------------------


def finite_diff_grad(f: Callable[[Array], float], x: Array, h: float) -> Array:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise DomainError("finite-difference step must be positive")
    x64 = np.ascontiguousarray(x, dtype=np.float64)
    grad = np.empty_like(x64)
    flat = x64.ravel()  # view into x64
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x64))
        flat[i] = orig - h
        fm = float(f(x64))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("non-finite function value in finite_diff_grad")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
