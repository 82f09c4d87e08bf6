"""Scalar expression graphs with reverse-mode differentiation.

A :class:`Graph` is an append-only DAG of scalar operations, so parents
always precede their children. :func:`gradient` performs reverse-mode
differentiation *symbolically*: every derivative is a new node in the same
graph, which makes derivative graphs differentiable again (second spatial
derivatives are obtained by differentiating a first-derivative node).

Values are computed by the execution engine in :mod:`nspinn.engine`, which
evaluates a graph either at a single point or for a whole batch of input
bindings at once (one vector value per node). The batch dimension lives in
the bindings, not in the graph; the only batch-aware operation is
``batch_mean``, which reduces a per-point node to its batch average.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, Mapping, Sequence, Union

import numpy as np

# Operation codes. Leaves come first; the engine skips them in sweeps.
CONST, INPUT, PARAM = 0, 1, 2
ADD, SUB, MUL, DIV, POWI, EXP, TANH, SIGMOID, SILU, MINC, MAXC, BOX, MEAN = range(3, 16)

OP_NAMES = {
    CONST: "const", INPUT: "input", PARAM: "param", ADD: "add", SUB: "sub",
    MUL: "mul", DIV: "div", POWI: "pow-int", EXP: "exp", TANH: "tanh",
    SIGMOID: "sigmoid", SILU: "silu", MINC: "min-const", MAXC: "max-const",
    BOX: "box", MEAN: "batch-mean",
}

Number = Union[int, float]


class Graph:
    """Append-only computation graph of scalar nodes."""

    def __init__(self) -> None:
        self.ops: list[int] = []
        self.pa: list[int] = []
        self.pb: list[int] = []
        self.pay0: list[float] = []
        self.pay1: list[float] = []
        self.ipay: list[int] = []
        self.input_ids: dict[str, int] = {}
        self.input_names: dict[int, str] = {}
        self.param_ids: dict[int, int] = {}  # slot -> node id
        self._const_ids: dict[float, int] = {}
        self._program_cache: dict = {}

    def __len__(self) -> int:
        return len(self.ops)

    def _push(self, op: int, a: int = -1, b: int = -1, p0: float = 0.0,
              p1: float = 0.0, ip: int = 0) -> int:
        self.ops.append(op)
        self.pa.append(a)
        self.pb.append(b)
        self.pay0.append(p0)
        self.pay1.append(p1)
        self.ipay.append(ip)
        return len(self.ops) - 1

    def constant(self, value: Number) -> "Expr":
        v = float(value)
        i = self._const_ids.get(v)
        if i is None:
            i = self._push(CONST, p0=v)
            self._const_ids[v] = i
        return Expr(self, i)

    def input(self, name: str) -> "Expr":
        i = self.input_ids.get(name)
        if i is None:
            i = self._push(INPUT)
            self.input_ids[name] = i
            self.input_names[i] = name
        return Expr(self, i)

    def param(self, slot: int) -> "Expr":
        i = self.param_ids.get(slot)
        if i is None:
            i = self._push(PARAM, ip=slot)
            self.param_ids[slot] = i
        return Expr(self, i)

    def node(self, i: int) -> "Expr":
        return Expr(self, i)

    def describe(self, i: int) -> str:
        op = self.ops[i]
        if op == INPUT:
            return f"input '{self.input_names[i]}'"
        if op == PARAM:
            return f"parameter slot {self.ipay[i]}"
        if op == CONST:
            return f"const {self.pay0[i]}"
        return OP_NAMES[op]


class Expr:
    """Handle to one graph node, with operator overloading."""

    __slots__ = ("g", "i")

    def __init__(self, g: Graph, i: int) -> None:
        self.g = g
        self.i = i

    def __repr__(self) -> str:
        return f"Expr({self.g.describe(self.i)}, id={self.i})"

    def __hash__(self) -> int:
        return hash((id(self.g), self.i))

    def __eq__(self, other) -> bool:
        return isinstance(other, Expr) and other.g is self.g and other.i == self.i

    def _lift(self, other) -> "Expr":
        if isinstance(other, Expr):
            if other.g is not self.g:
                raise ValueError("cannot mix nodes from different graphs")
            return other
        return self.g.constant(other)

    def _const(self):
        return self.g.pay0[self.i] if self.g.ops[self.i] == CONST else None

    def __add__(self, other):
        return _binary(ADD, self, self._lift(other))

    def __radd__(self, other):
        return _binary(ADD, self._lift(other), self)

    def __sub__(self, other):
        return _binary(SUB, self, self._lift(other))

    def __rsub__(self, other):
        return _binary(SUB, self._lift(other), self)

    def __mul__(self, other):
        return _binary(MUL, self, self._lift(other))

    def __rmul__(self, other):
        return _binary(MUL, self._lift(other), self)

    def __truediv__(self, other):
        return _binary(DIV, self, self._lift(other))

    def __rtruediv__(self, other):
        return _binary(DIV, self._lift(other), self)

    def __neg__(self):
        return _binary(SUB, self.g.constant(0.0), self)

    def __pow__(self, n):
        if not isinstance(n, int):
            raise TypeError("only integer exponents are supported")
        return powi(self, n)


def _binary(op: int, x: Expr, y: Expr) -> Expr:
    """Create a binary node with light constant folding."""
    g = x.g
    cx, cy = x._const(), y._const()
    if cx is not None and cy is not None:
        if op == ADD:
            return g.constant(cx + cy)
        if op == SUB:
            return g.constant(cx - cy)
        if op == MUL:
            return g.constant(cx * cy)
        if op == DIV and cy != 0.0:
            return g.constant(cx / cy)
    if op == ADD:
        if cx == 0.0:
            return y
        if cy == 0.0:
            return x
    elif op == SUB:
        if cy == 0.0:
            return x
    elif op == MUL:
        if cx == 1.0:
            return y
        if cy == 1.0:
            return x
        if cx == 0.0 or cy == 0.0:
            return g.constant(0.0)
    elif op == DIV:
        if cy == 1.0:
            return x
    return Expr(g, g._push(op, x.i, y.i))


def _unary(op: int, x: Expr, fold: Callable[[float], float]) -> Expr:
    c = x._const()
    if c is not None:
        return x.g.constant(fold(c))
    return Expr(x.g, x.g._push(op, x.i))


def exp(x: Expr) -> Expr:
    return _unary(EXP, x, math.exp)


def tanh(x: Expr) -> Expr:
    return _unary(TANH, x, math.tanh)


def sigmoid(x: Expr) -> Expr:
    return _unary(SIGMOID, x, lambda v: 1.0 / (1.0 + math.exp(-v)))


def silu(x: Expr) -> Expr:
    return _unary(SILU, x, lambda v: v / (1.0 + math.exp(-v)))


def powi(x: Expr, n: int) -> Expr:
    if n == 0:
        return x.g.constant(1.0)
    if n == 1:
        return x
    c = x._const()
    if c is not None:
        return x.g.constant(c ** n)
    return Expr(x.g, x.g._push(POWI, x.i, ip=n))


def minimum(x: Expr, c: Number) -> Expr:
    cc = x._const()
    if cc is not None:
        return x.g.constant(min(cc, float(c)))
    return Expr(x.g, x.g._push(MINC, x.i, p0=float(c)))


def maximum(x: Expr, c: Number) -> Expr:
    cc = x._const()
    if cc is not None:
        return x.g.constant(max(cc, float(c)))
    return Expr(x.g, x.g._push(MAXC, x.i, p0=float(c)))


def box(x: Expr, lo: float, hi: float, right_closed: bool = False,
        left_open: bool = False) -> Expr:
    """Interval indicator: 1 on [lo, hi) by default; the flags close the
    right end or open the left end.

    Its derivative is identically zero; this is the degree-0 base case used
    by the spline recursion, which stays piecewise smooth for orders >= 1.
    """
    flags = (1 if right_closed else 0) | (2 if left_open else 0)
    return Expr(x.g, x.g._push(BOX, x.i, p0=float(lo), p1=float(hi),
                               ip=flags))


def batch_mean(x: Expr) -> Expr:
    """Average of a per-point node over the evaluation batch."""
    return Expr(x.g, x.g._push(MEAN, x.i))


def ancestors(g: Graph, roots: Iterable[int]) -> np.ndarray:
    """Boolean mask of nodes that the roots depend on (roots included)."""
    mask = np.zeros(len(g), dtype=bool)
    stack = list(roots)
    while stack:
        i = stack.pop()
        if mask[i]:
            continue
        mask[i] = True
        a, b = g.pa[i], g.pb[i]
        if a >= 0 and not mask[a]:
            stack.append(a)
        if b >= 0 and not mask[b]:
            stack.append(b)
    return mask


def gradient(out: Expr, wrt: Sequence[Expr]) -> Dict[Expr, Expr]:
    """Reverse-mode derivatives of ``out`` w.r.t. the given leaves.

    Returns one derivative node per requested leaf, inside the same graph;
    leaves the output does not depend on map to the constant 0. The
    returned nodes are differentiable again (reverse-over-reverse), which
    is how second derivatives are built.

    Batch-mean nodes are rejected here: aggregated losses are
    differentiated numerically by the engine's adjoint sweep instead.
    """
    g = out.g
    mask = ancestors(g, [out.i])
    adj: dict[int, Expr] = {out.i: g.constant(1.0)}
    for i in range(len(mask) - 1, -1, -1):
        if not mask[i]:
            continue
        a_i = adj.get(i)
        if a_i is None:
            continue
        op = g.ops[i]
        if op in (CONST, INPUT, PARAM, BOX):
            continue
        if op == MEAN:
            raise ValueError("gradient through batch-mean is not defined; "
                             "use the engine's backward sweep for aggregated losses")
        pa, pb = g.pa[i], g.pb[i]
        x = Expr(g, pa)
        if op == ADD:
            _accum(adj, pa, a_i)
            _accum(adj, pb, a_i)
        elif op == SUB:
            _accum(adj, pa, a_i)
            _accum(adj, pb, -a_i)
        elif op == MUL:
            _accum(adj, pa, a_i * Expr(g, pb))
            _accum(adj, pb, a_i * x)
        elif op == DIV:
            y = Expr(g, pb)
            _accum(adj, pa, a_i / y)
            _accum(adj, pb, -(a_i * Expr(g, i)) / y)
        elif op == POWI:
            n = g.ipay[i]
            _accum(adj, pa, a_i * (float(n) * powi(x, n - 1)))
        elif op == EXP:
            _accum(adj, pa, a_i * Expr(g, i))
        elif op == TANH:
            _accum(adj, pa, a_i * (1.0 - powi(Expr(g, i), 2)))
        elif op == SIGMOID:
            s = Expr(g, i)
            _accum(adj, pa, a_i * (s * (1.0 - s)))
        elif op == SILU:
            s = sigmoid(x)
            _accum(adj, pa, a_i * (s + Expr(g, i) * (1.0 - s)))
        elif op == MINC:
            _accum(adj, pa, a_i * box(x, -math.inf, g.pay0[i]))
        elif op == MAXC:
            _accum(adj, pa, a_i * box(x, g.pay0[i], math.inf))
        else:  # pragma: no cover
            raise AssertionError(f"missing derivative rule for {OP_NAMES[op]}")
    zero = g.constant(0.0)
    return {w: adj.get(w.i, zero) for w in wrt}


def _accum(adj: dict, i: int, contribution: Expr) -> None:
    prev = adj.get(i)
    adj[i] = contribution if prev is None else prev + contribution


def evaluate(outputs: Union[Expr, Sequence[Expr]],
             bindings: Mapping[str, Union[Number, np.ndarray]] | None = None,
             theta: np.ndarray | None = None,
             check_finite: bool = True):
    """Evaluate graph nodes under the given input bindings.

    Bindings map input-leaf names to scalars or equal-length 1-D arrays;
    parameter leaves take their values from ``theta`` by slot. Scalar-only
    bindings yield floats, otherwise per-point arrays. Non-finite results
    raise with the offending node named (disable via ``check_finite`` only
    when a caller checks its own aggregates).
    """
    from . import engine

    single = isinstance(outputs, Expr)
    outs = [outputs] if single else list(outputs)
    if not outs:
        return []
    g = outs[0].g
    program = engine.compile_program(g, tuple(o.i for o in outs))
    runner = engine.Runner(program, _batch_size(bindings))
    runner.bind(bindings or {}, theta)
    runner.forward()
    if check_finite:
        runner.check_finite()
    scalar = all(np.isscalar(v) or np.ndim(v) == 0
                 for v in (bindings or {}).values())
    vals = [runner.value(o.i).copy() for o in outs]
    if scalar:
        vals = [float(v[0]) for v in vals]
    return vals[0] if single else vals


def _batch_size(bindings) -> int:
    n = 1
    for v in (bindings or {}).values():
        if not np.isscalar(v) and np.ndim(v) > 0:
            m = len(v)
            if n not in (1, m):
                raise ValueError("shape error: mixed binding lengths "
                                 f"({n} vs {m})")
            n = m
    return n


def finite_difference_check(build: Callable[[Sequence[Expr]], Expr],
                            point: Sequence[float],
                            h: float = 1e-5) -> float:
    """Worst relative error of reverse-mode vs. central differences.

    ``build`` constructs a scalar expression from freshly created input
    leaves; the check compares each analytic partial against
    (f(x+h e_k) - f(x-h e_k)) / 2h, relative to max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError("invalid step: h must be positive")
    g = Graph()
    xs = [g.input(f"x{k}") for k in range(len(point))]
    y = build(xs)
    grads = gradient(y, xs)
    base = {f"x{k}": float(v) for k, v in enumerate(point)}
    worst = 0.0
    for k in range(len(point)):
        analytic = evaluate(grads[xs[k]], base)
        hi = dict(base)
        lo = dict(base)
        hi[f"x{k}"] += h
        lo[f"x{k}"] -= h
        num = (evaluate(y, hi) - evaluate(y, lo)) / (2.0 * h)
        err = abs(analytic - num) / max(1.0, abs(analytic))
        worst = max(worst, err)
    return worst
