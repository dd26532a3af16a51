"""Dense float64 helpers, seeded random streams and a small reverse-mode tape.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order.  Tokens are stored as *columns*, so a context of ``n`` tokens of width
``d`` is a ``d x n`` array.

The tape (:class:`Tape`) records a closed set of primitives and differentiates
through them in reverse creation order.  It is deliberately small: the model
zoo trained in :mod:`icldual.harness` only needs these primitives, and keeping
every backward rule hand-written keeps the finite-difference cross-check
meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erfc

from .errors import NonFiniteError, ValidationError

PRNG_ALGORITHM = "PCG64/SeedSequence"

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def check_finite(a, what="value"):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return a


def as_matrix(a, what="matrix"):
    """Coerce to a finite 2-D float64 array; 1-D input becomes a column."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.size == 0:
        raise ValidationError(f"{what} must be a non-empty 2-D array, got shape {a.shape}")
    return check_finite(a, what)


def as_vector(a, what="vector"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2 and 1 in a.shape:
        a = a.reshape(-1)
    if a.ndim != 1 or a.size == 0:
        raise ValidationError(f"{what} must be a non-empty vector, got shape {a.shape}")
    return check_finite(a, what)


@dataclass(frozen=True)
class SeededRng:
    """A reproducible random stream identified by ``(seed, stream)``.

    Streams are derived with ``numpy.random.SeedSequence(seed,
    spawn_key=(stream,))``, which hashes the pair into an independent PCG64
    state.  Two different stream indices under one seed never share state.
    """

    seed: int
    stream: int = 0
    algorithm: str = PRNG_ALGORITHM

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream),))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *index: int) -> "SeededRng":
        """Sub-stream; ``child(a, b)`` differs from ``child(b, a)``."""
        stream = int(self.stream)
        for i in index:
            stream = _mix(stream, int(i))
        return SeededRng(self.seed, stream, self.algorithm)


def _mix(a: int, b: int) -> int:
    # splitmix64-style combiner, fixed so stream ids are stable across versions
    x = (a * 0x9E3779B97F4A7C15 + b + 0x632BE59BD9B4E019) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 31
    return x


def column_softmax(m):
    """Softmax over each column, with per-column max subtraction."""
    m = as_matrix(m, "softmax input")
    z = m - m.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def outer_product(u, v):
    u = check_finite(np.asarray(u, dtype=np.float64).reshape(-1), "u")
    v = check_finite(np.asarray(v, dtype=np.float64).reshape(-1), "v")
    return np.outer(u, v)


def gelu(x):
    """Exact (erf based) GELU, x * Phi(x); erfc keeps the negative tail accurate."""
    return 0.5 * x * erfc(-x / _SQRT2)


def gelu_grad(x):
    return 0.5 * erfc(-x / _SQRT2) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def relu(x):
    return np.maximum(x, 0.0)


ACTIVATIONS = {"gelu": gelu, "elu": elu, "relu": relu}


# ---------------------------------------------------------------------------
# reverse-mode tape
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sum_fwd(a, axis=None):
    if axis is None:
        return np.asarray(a.sum()).reshape(1, 1)
    return a.sum(axis=axis, keepdims=True)


def _slice_bwd(g, out, a, index):
    ga = np.zeros_like(a)
    ga[index] = g
    return (ga,)


def _softmax_bwd(g, y, a):
    return (y * (g - (g * y).sum(axis=0, keepdims=True)),)


def _concat_bwd(g, out, *vals, axis):
    grads = []
    start = 0
    for v in vals:
        stop = start + v.shape[axis]
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(start, stop)
        grads.append(g[tuple(idx)])
        start = stop
    return tuple(grads)


# name -> (forward, backward); backward(g, out, *inputs, **attrs) -> per-input grads
_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (
        lambda a, b: a + b,
        lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    ),
    "sub": (
        lambda a, b: a - b,
        lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    ),
    "mul": (
        lambda a, b: a * b,
        lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    ),
    "div": (
        lambda a, b: a / b,
        lambda g, o, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
    ),
    "scale": (lambda a, c: c * a, lambda g, o, a, c: (c * g,)),
    "matmul": (lambda a, b: a @ b, lambda g, o, a, b: (g @ b.T, a.T @ g)),
    "transpose": (lambda a: a.T.copy(), lambda g, o, a: (g.T,)),
    "exp": (np.exp, lambda g, o, a: (g * o,)),
    "elu": (elu, lambda g, o, a: (g * elu_grad(a),)),
    "gelu": (gelu, lambda g, o, a: (g * gelu_grad(a),)),
    "relu": (relu, lambda g, o, a: (g * (a > 0),)),
    "column_softmax": (
        lambda a: column_softmax(a),
        _softmax_bwd,
    ),
    "sum": (_sum_fwd, lambda g, o, a, axis=None: (np.broadcast_to(g.reshape(o.shape), a.shape).copy(),)),
    "slice": (lambda a, index: a[index].copy(), _slice_bwd),
    "concat": (lambda *vals, axis: np.concatenate(vals, axis=axis), _concat_bwd),
    "sq_error": (
        lambda a, b: np.asarray(((a - b) ** 2).sum()).reshape(1, 1),
        lambda g, o, a, b: (2.0 * g * (a - b), -2.0 * g * (a - b)),
    ),
}

PRIMITIVES = frozenset(_OPS)


@dataclass
class _Node:
    op: str | None  # None for leaves
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    requires_grad: bool
    name: str | None = None


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other):
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self.tape.apply("add", self._lift(other), self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", self, c=float(other))
        return self.tape.apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", self, c=1.0 / float(other))
        return self.tape.apply("div", self, self._lift(other))

    def __neg__(self):
        return self.tape.apply("scale", self, c=-1.0)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._lift(other))

    def __rmatmul__(self, other):
        return self.tape.apply("matmul", self._lift(other), self)

    def __getitem__(self, index):
        if not isinstance(index, tuple):
            index = (index,)
        return self.tape.apply("slice", self, index=index)

    @property
    def T(self):
        return self.tape.apply("transpose", self)

    def sum(self, axis=None):
        return self.tape.apply("sum", self, axis=axis)


class Tape:
    """Append-only record of primitive operations (a Wengert list).

    Leaves are created with :meth:`param` (trainable, named) or :meth:`const`.
    Nodes are appended in evaluation order, so the list order is a
    topological order and the backward pass simply walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, int] = {}

    def param(self, value, name: str) -> Var:
        if name in self.params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        v = check_finite(np.array(value, dtype=np.float64, ndmin=2), name)
        self.nodes.append(_Node(None, (), {}, v, True, name))
        self.params[name] = len(self.nodes) - 1
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> Var:
        v = check_finite(np.array(value, dtype=np.float64, ndmin=2), "constant")
        self.nodes.append(_Node(None, (), {}, v, False))
        return Var(self, len(self.nodes) - 1)

    def apply(self, op: str, *inputs: Var, **attrs) -> Var:
        if op not in _OPS:
            raise ValidationError(f"unknown primitive {op!r}")
        forward, _ = _OPS[op]
        vals = [self.nodes[x.index].value for x in inputs]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = np.asarray(forward(*vals, **attrs), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"primitive {op!r} produced a non-finite value")
        req = any(self.nodes[x.index].requires_grad for x in inputs)
        self.nodes.append(_Node(op, tuple(x.index for x in inputs), attrs, out, req))
        return Var(self, len(self.nodes) - 1)

    # -- convenience wrappers for named primitives -------------------------
    def exp(self, a):
        return self.apply("exp", a)

    def elu(self, a):
        return self.apply("elu", a)

    def gelu(self, a):
        return self.apply("gelu", a)

    def relu(self, a):
        return self.apply("relu", a)

    def activation(self, name, a):
        return self.apply(name, a)

    def column_softmax(self, a):
        return self.apply("column_softmax", a)

    def concat(self, items, axis):
        return self.apply("concat", *items, axis=axis)

    def sq_error(self, a, b):
        return self.apply("sq_error", a, b if isinstance(b, Var) else self.const(b))

    # -- evaluation ---------------------------------------------------------
    def replay(self, overrides: dict[str, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-run every recorded primitive; returns the list of node values.

        With no overrides the result is bit-identical to the recorded values.
        Overriding a parameter re-evaluates the same program at a new point,
        which is what the finite-difference oracle uses.
        """
        overrides = overrides or {}
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op is None:
                if node.name is not None and node.name in overrides:
                    values.append(np.array(overrides[node.name], dtype=np.float64, ndmin=2))
                else:
                    values.append(node.value)
                continue
            forward, _ = _OPS[node.op]
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                values.append(np.asarray(forward(*(values[i] for i in node.inputs), **node.attrs)))
        return values

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        return backward_gradients(self, loss)


def backward_gradients(record: Tape, loss_node: Var) -> dict[str, np.ndarray]:
    """d(loss)/d(param) for every trainable leaf on the record."""
    if loss_node.tape is not record:
        raise ValidationError("loss node belongs to a different record")
    if loss_node.value.size != 1:
        raise ValidationError(f"loss must be scalar, got shape {loss_node.value.shape}")
    nodes = record.nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    grads[loss_node.index] = np.ones_like(loss_node.value)
    for i in range(loss_node.index, -1, -1):
        node = nodes[i]
        g = grads[i]
        if g is None or node.op is None or not node.requires_grad:
            continue
        assert all(j < i for j in node.inputs), "record is not topologically ordered"
        _, backward = _OPS[node.op]
        in_vals = [nodes[j].value for j in node.inputs]
        for j, gj in zip(node.inputs, backward(g, node.value, *in_vals, **node.attrs)):
            if not nodes[j].requires_grad:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj
    out = {}
    for name, idx in record.params.items():
        g = grads[idx]
        out[name] = np.zeros_like(nodes[idx].value) if g is None else g
    return out


def finite_difference_oracle(f: Callable[[np.ndarray], float], theta, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    if not h > 0:
        raise ValidationError("step h must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta))
        flat[i] = orig - h
        fm = float(f(theta))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def tape_finite_differences(record: Tape, loss_node: Var, h: float = 1e-6) -> dict[str, np.ndarray]:
    """Finite-difference gradients of a recorded loss, via :meth:`Tape.replay`."""
    base = {name: record.nodes[idx].value.copy() for name, idx in record.params.items()}
    out = {}
    for name in base:

        def f(theta, name=name):
            vals = record.replay({**base, name: theta})
            return vals[loss_node.index].item()

        out[name] = finite_difference_oracle(f, base[name], h)
    return out


def relative_error(a, b, floor: float = 1e-300) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


@dataclass
class GradientCheck:
    max_relative_error: float
    per_param: dict[str, float] = field(default_factory=dict)


def check_tape_gradients(record: Tape, loss_node: Var, h: float = 1e-6) -> GradientCheck:
    analytic = backward_gradients(record, loss_node)
    numeric = tape_finite_differences(record, loss_node, h)
    per = {k: relative_error(analytic[k], numeric[k], floor=1e-12) for k in analytic}
    return GradientCheck(max(per.values()) if per else 0.0, per)
