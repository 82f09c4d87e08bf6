"""Batched graph execution: compiled programs, forward and adjoint sweeps.

A :class:`Program` freezes the ancestor subgraph of some output nodes into
flat arrays; a :class:`Runner` owns the value/adjoint workspace for one
batch size and executes sweeps over it. Kernels are numba-compiled when
available (set ``NSPINN_NO_NUMBA=1`` to force the pure-numpy twin, which
implements identical semantics and serves as a cross-check in tests).

The forward sweep computes one value row per node (length = batch size;
scalars are stored replicated). The backward sweep accumulates adjoints in
reverse order; the true adjoint of a batch-constant node is the sum of its
row, which makes broadcast parameters and ``batch_mean`` reductions come
out right without any shape bookkeeping.
"""

from __future__ import annotations

import os
from typing import Mapping, Union

import numpy as np

from .autodiff import (ADD, BOX, CONST, DIV, EXP, Graph, MAXC, MEAN, MINC,
                       MUL, PARAM, POWI, SIGMOID, SILU, SUB, TANH)

_USE_NUMBA = os.environ.get("NSPINN_NO_NUMBA", "") != "1"
if _USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        _USE_NUMBA = False

Number = Union[int, float]


class Program:
    """Topologically ordered, index-remapped slice of a graph."""

    def __init__(self, graph: Graph, out_ids: tuple[int, ...]) -> None:
        from .autodiff import ancestors

        mask = ancestors(graph, out_ids)
        rows = np.flatnonzero(mask)
        remap = np.full(len(graph), -1, dtype=np.int64)
        remap[rows] = np.arange(rows.size)
        self.n = int(rows.size)
        ops = np.asarray(graph.ops, dtype=np.int64)[rows]
        pa = np.asarray(graph.pa, dtype=np.int64)[rows]
        pb = np.asarray(graph.pb, dtype=np.int64)[rows]
        self.op = ops
        self.a = np.where(pa >= 0, remap[np.maximum(pa, 0)], -1)
        self.b = np.where(pb >= 0, remap[np.maximum(pb, 0)], -1)
        self.p0 = np.asarray(graph.pay0, dtype=np.float64)[rows]
        self.p1 = np.asarray(graph.pay1, dtype=np.float64)[rows]
        self.ip = np.asarray(graph.ipay, dtype=np.int64)[rows]
        self.node_row = {int(r): int(remap[r]) for r in rows}
        self.input_rows = {name: int(remap[i])
                           for name, i in graph.input_ids.items() if mask[i]}
        pslots = [(slot, int(remap[i]))
                  for slot, i in graph.param_ids.items() if mask[i]]
        pslots.sort()
        self.param_slots = np.asarray([s for s, _ in pslots], dtype=np.int64)
        self.param_rows = np.asarray([r for _, r in pslots], dtype=np.int64)
        const_rows = np.flatnonzero(self.op == CONST)
        self.const_rows = const_rows
        self.const_vals = self.p0[const_rows]
        self.orig_ids = rows  # program row -> graph node id
        self.op_names = {int(remap[r]): graph.describe(int(r)) for r in rows}


def compile_program(graph: Graph, out_ids: tuple[int, ...]) -> Program:
    key = frozenset(out_ids)
    prog = graph._program_cache.get(key)
    if prog is None:
        prog = Program(graph, out_ids)
        graph._program_cache[key] = prog
    return prog


class Runner:
    """Workspace binding a program to a fixed batch size."""

    def __init__(self, program: Program, batch: int) -> None:
        self.p = program
        self.batch = int(batch)
        self.vals = np.empty((program.n, self.batch), dtype=np.float64)
        self.vals[program.const_rows] = program.const_vals[:, None]
        self.adj: np.ndarray | None = None
        self.touched = np.zeros(program.n, dtype=np.uint8)

    def bind(self, bindings: Mapping[str, Union[Number, np.ndarray]],
             theta: np.ndarray | None = None) -> None:
        for name, row in self.p.input_rows.items():
            if name not in bindings:
                raise ValueError(f"unbound input '{name}'")
            v = bindings[name]
            if np.isscalar(v) or np.ndim(v) == 0:
                self.vals[row] = float(v)
            else:
                arr = np.asarray(v, dtype=np.float64)
                if arr.shape != (self.batch,):
                    raise ValueError("shape error: binding "
                                     f"'{name}' has length {arr.shape}, "
                                     f"expected {self.batch}")
                self.vals[row] = arr
        if self.p.param_rows.size:
            if theta is None:
                raise ValueError("unbound input: parameter values required")
            self.vals[self.p.param_rows] = \
                np.asarray(theta, dtype=np.float64)[self.p.param_slots][:, None]

    def forward(self) -> None:
        p = self.p
        _forward(p.op, p.a, p.b, p.p0, p.p1, p.ip, self.vals)

    def value(self, node_id: int) -> np.ndarray:
        return self.vals[self.p.node_row[node_id]]

    def check_finite(self) -> None:
        if np.isfinite(self.vals).all():
            return
        bad = int(np.flatnonzero(~np.isfinite(self.vals).all(axis=1))[0])
        raise ValueError("non-finite value at node "
                         f"{int(self.p.orig_ids[bad])} "
                         f"({self.p.op_names[bad]})")

    def backward(self, seed_node: int,
                 seed: Union[Number, np.ndarray] = 1.0) -> None:
        """Adjoint sweep seeded at one node.

        A scalar seed lands in column 0 (the row-sum convention makes the
        column placement irrelevant); a vector seed weights each batch
        point, e.g. d(sum_j s_j * f_j)/d(leaf).
        """
        p = self.p
        if self.adj is None:
            self.adj = np.empty_like(self.vals)
        self.touched[:] = 0
        row = p.node_row[seed_node]
        self.adj[row] = 0.0
        if np.isscalar(seed) or np.ndim(seed) == 0:
            self.adj[row, 0] = float(seed)
        else:
            self.adj[row] = np.asarray(seed, dtype=np.float64)
        self.touched[row] = 1
        _backward(p.op, p.a, p.b, p.p0, p.p1, p.ip, self.vals, self.adj,
                  self.touched)

    def adjoint_sum(self, node_id: int) -> float:
        """Total adjoint of a node (sum over the batch)."""
        row = self.p.node_row[node_id]
        if not self.touched[row]:
            return 0.0
        return float(self.adj[row].sum())

    def input_grad(self, name: str) -> np.ndarray:
        # Inputs the outputs never depended on are absent from the program;
        # their derivative is identically zero.
        row = self.p.input_rows.get(name)
        if row is None or not self.touched[row]:
            return np.zeros(self.batch)
        return self.adj[row].copy()

    def param_grads(self, n_slots: int) -> np.ndarray:
        g = np.zeros(n_slots, dtype=np.float64)
        rows, slots = self.p.param_rows, self.p.param_slots
        live = self.touched[rows] == 1
        if live.any():
            g[slots[live]] = self.adj[rows[live]].sum(axis=1)
        return g


# ---------------------------------------------------------------------------
# Kernels. The numba and numpy twins must implement identical semantics.
# ---------------------------------------------------------------------------

def _forward_py(op, a, b, p0, p1, ip, vals):
    # IEEE semantics to mirror the numba kernels: inf/nan propagate
    # silently and are caught by the finiteness checks
    with np.errstate(all="ignore"):
        _forward_py_inner(op, a, b, p0, p1, ip, vals)


def _forward_py_inner(op, a, b, p0, p1, ip, vals):
    for i in range(op.size):
        o = op[i]
        if o <= PARAM:
            continue
        x = vals[a[i]]
        if o == ADD:
            vals[i] = x + vals[b[i]]
        elif o == SUB:
            vals[i] = x - vals[b[i]]
        elif o == MUL:
            vals[i] = x * vals[b[i]]
        elif o == DIV:
            vals[i] = x / vals[b[i]]
        elif o == POWI:
            vals[i] = x ** ip[i]
        elif o == EXP:
            vals[i] = np.exp(x)
        elif o == TANH:
            vals[i] = np.tanh(x)
        elif o == SIGMOID:
            vals[i] = 1.0 / (1.0 + np.exp(-x))
        elif o == SILU:
            vals[i] = x / (1.0 + np.exp(-x))
        elif o == MINC:
            vals[i] = np.minimum(x, p0[i])
        elif o == MAXC:
            vals[i] = np.maximum(x, p0[i])
        elif o == BOX:
            left = (x > p0[i]) if ip[i] & 2 else (x >= p0[i])
            right = (x <= p1[i]) if ip[i] & 1 else (x < p1[i])
            vals[i] = (left & right).astype(np.float64)
        elif o == MEAN:
            vals[i] = x.sum() / x.size


def _acc_py(adj, touched, row, contribution):
    if touched[row]:
        adj[row] += contribution
    else:
        adj[row] = contribution
        touched[row] = 1


def _backward_py(op, a, b, p0, p1, ip, vals, adj, touched):
    with np.errstate(all="ignore"):
        _backward_py_inner(op, a, b, p0, p1, ip, vals, adj, touched)


def _backward_py_inner(op, a, b, p0, p1, ip, vals, adj, touched):
    for i in range(op.size - 1, -1, -1):
        if not touched[i]:
            continue
        o = op[i]
        if o <= PARAM or o == BOX:
            continue
        ai, bi = a[i], b[i]
        g = adj[i]
        x = vals[ai]
        if o == ADD:
            _acc_py(adj, touched, ai, g)
            _acc_py(adj, touched, bi, g)
        elif o == SUB:
            _acc_py(adj, touched, ai, g)
            _acc_py(adj, touched, bi, -g)
        elif o == MUL:
            _acc_py(adj, touched, ai, g * vals[bi])
            _acc_py(adj, touched, bi, g * x)
        elif o == DIV:
            y = vals[bi]
            _acc_py(adj, touched, ai, g / y)
            _acc_py(adj, touched, bi, -g * vals[i] / y)
        elif o == POWI:
            n = ip[i]
            _acc_py(adj, touched, ai, g * (float(n) * x ** (n - 1)))
        elif o == EXP:
            _acc_py(adj, touched, ai, g * vals[i])
        elif o == TANH:
            _acc_py(adj, touched, ai, g * (1.0 - vals[i] * vals[i]))
        elif o == SIGMOID:
            s = vals[i]
            _acc_py(adj, touched, ai, g * s * (1.0 - s))
        elif o == SILU:
            s = 1.0 / (1.0 + np.exp(-x))
            _acc_py(adj, touched, ai, g * (s + vals[i] * (1.0 - s)))
        elif o == MINC:
            _acc_py(adj, touched, ai, g * (x < p0[i]))
        elif o == MAXC:
            _acc_py(adj, touched, ai, g * (x >= p0[i]))
        elif o == MEAN:
            total = g.sum()
            _acc_py(adj, touched, ai,
                    np.full(g.size, total / g.size))


if _USE_NUMBA:

    @njit(cache=True, error_model="numpy")
    def _forward_nb(op, a, b, p0, p1, ip, vals):  # pragma: no cover
        n, B = vals.shape
        for i in range(n):
            o = op[i]
            if o <= 2:
                continue
            ai = a[i]
            if o == 3:  # add
                bi = b[i]
                for j in range(B):
                    vals[i, j] = vals[ai, j] + vals[bi, j]
            elif o == 4:  # sub
                bi = b[i]
                for j in range(B):
                    vals[i, j] = vals[ai, j] - vals[bi, j]
            elif o == 5:  # mul
                bi = b[i]
                for j in range(B):
                    vals[i, j] = vals[ai, j] * vals[bi, j]
            elif o == 6:  # div
                bi = b[i]
                for j in range(B):
                    vals[i, j] = vals[ai, j] / vals[bi, j]
            elif o == 7:  # pow-int
                m = ip[i]
                for j in range(B):
                    vals[i, j] = vals[ai, j] ** m
            elif o == 8:  # exp
                for j in range(B):
                    vals[i, j] = np.exp(vals[ai, j])
            elif o == 9:  # tanh
                for j in range(B):
                    vals[i, j] = np.tanh(vals[ai, j])
            elif o == 10:  # sigmoid
                for j in range(B):
                    vals[i, j] = 1.0 / (1.0 + np.exp(-vals[ai, j]))
            elif o == 11:  # silu
                for j in range(B):
                    vals[i, j] = vals[ai, j] / (1.0 + np.exp(-vals[ai, j]))
            elif o == 12:  # min-const
                c = p0[i]
                for j in range(B):
                    v = vals[ai, j]
                    vals[i, j] = v if v < c else c
            elif o == 13:  # max-const
                c = p0[i]
                for j in range(B):
                    v = vals[ai, j]
                    vals[i, j] = v if v > c else c
            elif o == 14:  # box
                lo = p0[i]
                hi = p1[i]
                flags = ip[i]
                for j in range(B):
                    v = vals[ai, j]
                    inside_lo = v > lo if flags & 2 else v >= lo
                    inside_hi = v <= hi if flags & 1 else v < hi
                    vals[i, j] = 1.0 if (inside_lo and inside_hi) else 0.0
            elif o == 15:  # batch-mean
                s = 0.0
                for j in range(B):
                    s += vals[ai, j]
                s /= B
                for j in range(B):
                    vals[i, j] = s

    @njit(cache=True, error_model="numpy")
    def _backward_nb(op, a, b, p0, p1, ip, vals, adj, touched):  # pragma: no cover
        n, B = vals.shape
        buf = np.empty(B)
        for i in range(n - 1, -1, -1):
            if touched[i] == 0:
                continue
            o = op[i]
            if o <= 2 or o == 14:
                continue
            ai = a[i]
            bi = b[i]
            if o == 3:  # add
                for j in range(B):
                    buf[j] = adj[i, j]
                _acc_nb(adj, touched, ai, buf)
                _acc_nb(adj, touched, bi, buf)
            elif o == 4:  # sub
                for j in range(B):
                    buf[j] = adj[i, j]
                _acc_nb(adj, touched, ai, buf)
                for j in range(B):
                    buf[j] = -adj[i, j]
                _acc_nb(adj, touched, bi, buf)
            elif o == 5:  # mul
                for j in range(B):
                    buf[j] = adj[i, j] * vals[bi, j]
                _acc_nb(adj, touched, ai, buf)
                for j in range(B):
                    buf[j] = adj[i, j] * vals[ai, j]
                _acc_nb(adj, touched, bi, buf)
            elif o == 6:  # div
                for j in range(B):
                    buf[j] = adj[i, j] / vals[bi, j]
                _acc_nb(adj, touched, ai, buf)
                for j in range(B):
                    buf[j] = -adj[i, j] * vals[i, j] / vals[bi, j]
                _acc_nb(adj, touched, bi, buf)
            elif o == 7:  # pow-int
                m = ip[i]
                for j in range(B):
                    buf[j] = adj[i, j] * m * vals[ai, j] ** (m - 1)
                _acc_nb(adj, touched, ai, buf)
            elif o == 8:  # exp
                for j in range(B):
                    buf[j] = adj[i, j] * vals[i, j]
                _acc_nb(adj, touched, ai, buf)
            elif o == 9:  # tanh
                for j in range(B):
                    buf[j] = adj[i, j] * (1.0 - vals[i, j] * vals[i, j])
                _acc_nb(adj, touched, ai, buf)
            elif o == 10:  # sigmoid
                for j in range(B):
                    s = vals[i, j]
                    buf[j] = adj[i, j] * s * (1.0 - s)
                _acc_nb(adj, touched, ai, buf)
            elif o == 11:  # silu
                for j in range(B):
                    s = 1.0 / (1.0 + np.exp(-vals[ai, j]))
                    buf[j] = adj[i, j] * (s + vals[i, j] * (1.0 - s))
                _acc_nb(adj, touched, ai, buf)
            elif o == 12:  # min-const
                c = p0[i]
                for j in range(B):
                    buf[j] = adj[i, j] if vals[ai, j] < c else 0.0
                _acc_nb(adj, touched, ai, buf)
            elif o == 13:  # max-const
                c = p0[i]
                for j in range(B):
                    buf[j] = adj[i, j] if vals[ai, j] >= c else 0.0
                _acc_nb(adj, touched, ai, buf)
            elif o == 15:  # batch-mean
                s = 0.0
                for j in range(B):
                    s += adj[i, j]
                s /= B
                for j in range(B):
                    buf[j] = s
                _acc_nb(adj, touched, ai, buf)

    @njit(cache=True, inline="always", error_model="numpy")
    def _acc_nb(adj, touched, row, buf):  # pragma: no cover
        if touched[row] == 1:
            for j in range(buf.size):
                adj[row, j] += buf[j]
        else:
            for j in range(buf.size):
                adj[row, j] = buf[j]
            touched[row] = 1

    _forward = _forward_nb
    _backward = _backward_nb
else:
    _forward = _forward_py
    _backward = _backward_py
