#!/usr/bin/env python3
"""
autodiff.py
Reverse-mode automatic differentiation over scalar computation graphs.

A Tape is an append-only Wengert list: each node stores its kind, parent
indices, local partial derivatives and forward value. Parents always precede
children, so the backward pass is a single reverse sweep.

Graph structure is scalar (one node per latent channel), but every node value
is a float64 numpy array over the sample batch. Parameters are shape-() leaves;
their gradients are summed over the batch. A tape has a single writer; use one
tape per training replica.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DimensionError, DomainError, NumericalError

Number = Union[float, int, np.ndarray]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# forward functions and their local partials, keyed by primitive kind
G: Dict[str, Callable] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a: -a,
    "exp": np.exp,
    "ln": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "abs": np.abs,
    "relu": lambda a: np.maximum(a, 0.0),
}

# DG[kind](inputs, output) -> partial of output w.r.t. each input
DG: Dict[str, Callable] = {
    "add": lambda x, y: (1.0, 1.0),
    "sub": lambda x, y: (1.0, -1.0),
    "mul": lambda x, y: (x[1], x[0]),
    "div": lambda x, y: (1.0 / x[1], -x[0] / (x[1] * x[1])),
    "neg": lambda x, y: (-1.0,),
    "exp": lambda x, y: (y,),
    "ln": lambda x, y: (1.0 / x[0],),
    "sqrt": lambda x, y: (0.5 / y,),
    "tanh": lambda x, y: (1.0 - y * y,),
    "sigmoid": lambda x, y: (y * (1.0 - y),),
    # subgradient 1 at zero for both, which keeps relu(x) = (x + |x|) / 2 consistent
    "abs": lambda x, y: (np.where(x[0] >= 0, 1.0, -1.0),),
    "relu": lambda x, y: (np.where(x[0] >= 0, 1.0, 0.0),),
}

PRIMITIVES = tuple(G) + ("dot", "sum", "mean")


class Tape:
    def __init__(self):
        self.kinds: List[str] = []
        self.parents: List[Tuple[int, ...]] = []
        self.partials: List[Tuple[Number, ...]] = []
        self.values: List[np.ndarray] = []
        self.params: Dict[int, str] = {}

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, kind: str, parents: Tuple[int, ...], partials: Tuple[Number, ...], value) -> "Value":
        self.kinds.append(kind)
        self.parents.append(parents)
        self.partials.append(partials)
        self.values.append(value)
        return Value(self, len(self.values) - 1)

    # ---------- leaves ----------
    def constant(self, x: Number) -> "Value":
        return self._push("const", (), (), np.asarray(x, dtype=np.float64))

    def input(self, x: Number) -> "Value":
        arr = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("non-finite graph input")
        return self._push("input", (), (), arr)

    def param(self, x: Number, name: str = "") -> "Value":
        v = self._push("param", (), (), np.asarray(float(x), dtype=np.float64))
        self.params[v.index] = name or f"p{v.index}"
        return v

    def lift(self, x: Union["Value", Number]) -> "Value":
        if isinstance(x, Value):
            if x.tape is not self:
                raise NumericalError("value belongs to a different tape")
            return x
        return self.constant(x)


class Value:
    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def data(self) -> np.ndarray:
        return self.tape.values[self.index]

    def __repr__(self) -> str:
        return f"Value(#{self.index} {self.tape.kinds[self.index]} data={self.data})"

    def __add__(self, other):
        return primitive("add", self, self.tape.lift(other))

    def __radd__(self, other):
        return primitive("add", self.tape.lift(other), self)

    def __sub__(self, other):
        return primitive("sub", self, self.tape.lift(other))

    def __rsub__(self, other):
        return primitive("sub", self.tape.lift(other), self)

    def __mul__(self, other):
        return primitive("mul", self, self.tape.lift(other))

    def __rmul__(self, other):
        return primitive("mul", self.tape.lift(other), self)

    def __truediv__(self, other):
        return primitive("div", self, self.tape.lift(other))

    def __rtruediv__(self, other):
        return primitive("div", self.tape.lift(other), self)

    def __neg__(self):
        return primitive("neg", self)

    def __abs__(self):
        return primitive("abs", self)

    def exp(self):
        return primitive("exp", self)

    def ln(self):
        return primitive("ln", self)

    def sqrt(self):
        return primitive("sqrt", self)

    def tanh(self):
        return primitive("tanh", self)

    def sigmoid(self):
        return primitive("sigmoid", self)

    def relu(self):
        return primitive("relu", self)


def _check_finite(kind: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{kind}: non-finite result")
    return value


def primitive(kind: str, *inputs: Value) -> Value:
    """Record one primitive node with its local partials."""
    if kind not in G:
        raise NumericalError(f"unknown primitive '{kind}'")
    tape = inputs[0].tape
    xs = [v.data for v in inputs]
    if kind in ("ln", "sqrt") and np.any(xs[0] < 0):
        raise DomainError(f"{kind} of negative value")
    if kind == "ln" and np.any(xs[0] == 0):
        raise DomainError("ln of zero")
    if kind == "div" and np.any(xs[1] == 0):
        raise DomainError("division by exact zero")
    with np.errstate(all="ignore"):
        y = _check_finite(kind, np.asarray(G[kind](*xs), dtype=np.float64))
        partials = DG[kind](xs, y)
    return tape._push(kind, tuple(v.index for v in inputs), partials, y)


def dot(weights: Sequence[Value], inputs: Sequence[Value], bias: Optional[Value] = None) -> Value:
    """Fused sum_i w_i * x_i (+ b) as one node."""
    if len(weights) != len(inputs):
        raise DimensionError(f"dot: {len(weights)} weights vs {len(inputs)} inputs")
    tape = (weights[0] if weights else bias).tape
    ws = [w.data for w in weights]
    xs = [x.data for x in inputs]
    y = sum((w * x for w, x in zip(ws, xs)), np.asarray(0.0))
    parents = [w.index for w in weights] + [x.index for x in inputs]
    partials: List[Number] = xs + ws
    if bias is not None:
        y = y + bias.data
        parents.append(bias.index)
        partials.append(1.0)
    return tape._push("dot", tuple(parents), tuple(partials), _check_finite("dot", np.asarray(y, dtype=np.float64)))


def vsum(values: Sequence[Value]) -> Value:
    tape = values[0].tape
    y = sum((v.data for v in values), np.asarray(0.0))
    return tape._push("sum", tuple(v.index for v in values), (1.0,) * len(values), np.asarray(y, dtype=np.float64))


def mean(value: Value) -> Value:
    """Mean over the batch axis: an array node becomes a shape-() node."""
    x = value.data
    n = max(x.size, 1)
    return value.tape._push("mean", (value.index,), (np.full(x.shape, 1.0 / n),), np.asarray(x.mean(), dtype=np.float64))


def softplus(x: Value) -> Value:
    # relu(x) + ln(1 + exp(-|x|)): no overflow for large |x|
    return x.relu() + (1.0 + (-abs(x)).exp()).ln()


# ---------- backward ----------
_NO_GRAD = frozenset({"const", "input"})


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    g = np.asarray(g)
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, output: Value) -> Dict[int, float]:
    """Gradients of output (summed over the batch) w.r.t. every parameter node."""
    if output.tape is not tape:
        raise NumericalError("output is not on this tape")
    grads: List[Optional[np.ndarray]] = [None] * len(tape)
    grads[output.index] = np.ones_like(output.data)
    kinds = tape.kinds
    for i in range(output.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        for p, d in zip(tape.parents[i], tape.partials[i]):
            if kinds[p] in _NO_GRAD:
                continue
            contrib = _unbroadcast(g * d, tape.values[p].shape)
            grads[p] = contrib if grads[p] is None else grads[p] + contrib
    return {i: float(np.sum(grads[i])) if grads[i] is not None else 0.0 for i in tape.params}


def gradients_by_name(tape: Tape, grads: Dict[int, float]) -> Dict[str, float]:
    return {tape.params[i]: g for i, g in grads.items()}


# ---------- dense layers ----------
@dataclass
class Dense:
    """Parameter storage for one dense layer: W (out x in) and b (out)."""
    name: str
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def glorot(cls, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> "Dense":
        limit = math.sqrt(6.0 / (n_in + n_out))
        return cls(name, rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def param_count(self) -> int:
        return self.weights.size + self.bias.size

    def bind(self, tape: Tape) -> "DenseLayer":
        o, i = self.weights.shape
        W = [[tape.param(self.weights[r, c], f"{self.name}.W[{r},{c}]") for c in range(i)] for r in range(o)]
        b = [tape.param(self.bias[r], f"{self.name}.b[{r}]") for r in range(o)]
        return DenseLayer(self.name, W, b)


@dataclass
class DenseLayer:
    """A dense layer bound to a tape: weights and bias are parameter Values."""
    name: str
    weights: List[List[Value]]
    bias: List[Value]

    def param_count(self) -> int:
        return sum(len(row) for row in self.weights) + len(self.bias)

    def gradient_arrays(self, grads: Dict[int, float]) -> Tuple[np.ndarray, np.ndarray]:
        gW = np.array([[grads[w.index] for w in row] for row in self.weights], dtype=np.float64)
        gb = np.array([grads[b.index] for b in self.bias], dtype=np.float64)
        return gW.reshape(len(self.weights), -1), gb


def dense_apply(layer: DenseLayer, x: Sequence[Value]) -> List[Value]:
    width = len(layer.weights[0]) if layer.weights else 0
    if len(x) != width:
        raise DimensionError(f"{layer.name}: input length {len(x)} != layer input width {width}")
    return [dot(row, x, b) for row, b in zip(layer.weights, layer.bias)]


# ---------- gradient check ----------
@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    analytic: List[float] = field(default_factory=list)
    numeric: List[float] = field(default_factory=list)


Builder = Callable[[Tape, List[Value]], Value]


def _evaluate(builder: Builder, params: Sequence[float]) -> float:
    tape = Tape()
    out = builder(tape, [tape.param(p) for p in params])
    val = float(np.sum(out.data))
    if not math.isfinite(val):
        raise NumericalError("grad_check: non-finite function value")
    return val


def grad_check(builder: Builder, params: Sequence[float], step: float = 1e-5, tol: float = 1e-4) -> GradCheckResult:
    """Reverse-mode gradients vs central differences; rel. error uses max(1, |analytic|)."""
    if not step > 0:
        raise NumericalError("grad_check: step must be > 0")
    tape = Tape()
    leaves = [tape.param(p) for p in params]
    out = builder(tape, leaves)
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("grad_check: non-finite function value")
    grads = backward(tape, out)
    analytic = [grads[v.index] for v in leaves]
    numeric = []
    for i in range(len(params)):
        up = list(params); up[i] += step
        dn = list(params); dn[i] -= step
        numeric.append((_evaluate(builder, up) - _evaluate(builder, dn)) / (2 * step))
    errs = [abs(a - n) / max(1.0, abs(a)) for a, n in zip(analytic, numeric)]
    worst = max(errs) if errs else 0.0
    return GradCheckResult(worst <= tol, worst, analytic, numeric)
