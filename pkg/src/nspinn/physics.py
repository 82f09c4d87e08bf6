"""Navier-Stokes residual graphs and per-case loss assembly.

Residuals come from nested reverse-mode differentiation of the network
outputs: first derivatives in t, x, y and second derivatives in x, y, all
as nodes of the same graph. Gradient-type boundary terms (pressure or
velocity gradients at a boundary) use the same mechanism, never one-sided
finite differences.

Each case contributes exactly its published list of loss terms; the
physics term is the mean of r_u^2 + r_v^2 + r_c^2 over interior points.
The forcing term is identically zero for all four cases, and no
non-dimensionalization is applied (inputs are normalized inside the
networks only).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Expr, Graph
from .nets import NetworkSpec, Params
from .sampling import CaseDefinition


@dataclass
class ResidualTriple:
    """Momentum-x, momentum-y, and continuity residual nodes."""

    r_u: Expr
    r_v: Expr
    r_c: Expr


def ns_residuals(outputs: Sequence[Expr], inputs: Sequence[Expr],
                 rho: float, nu: float) -> ResidualTriple:
    """Residual nodes for the incompressible momentum + continuity system.

    ``outputs`` are (u, v, p) nodes built over the (t, x, y) ``inputs``.
    """
    u, v, p = outputs
    t, x, y = inputs
    du = ad.gradient(u, (t, x, y))
    dv = ad.gradient(v, (t, x, y))
    dp = ad.gradient(p, (x, y))
    u_xx = ad.gradient(du[x], (x,))[x]
    u_yy = ad.gradient(du[y], (y,))[y]
    v_xx = ad.gradient(dv[x], (x,))[x]
    v_yy = ad.gradient(dv[y], (y,))[y]
    r_u = du[t] + u * du[x] + v * du[y] + (1.0 / rho) * dp[x] \
        - nu * (u_xx + u_yy)
    r_v = dv[t] + u * dv[x] + v * dv[y] + (1.0 / rho) * dp[y] \
        - nu * (v_xx + v_yy)
    r_c = du[x] + dv[y]
    return ResidualTriple(r_u, r_v, r_c)


def residual_values(triple: ResidualTriple,
                    bindings: Mapping[str, np.ndarray],
                    theta: Optional[np.ndarray] = None):
    """Evaluate a residual triple, naming the first blown-up point."""
    ru, rv, rc = ad.evaluate([triple.r_u, triple.r_v, triple.r_c],
                             bindings, theta, check_finite=False)
    vals = np.stack([np.atleast_1d(ru), np.atleast_1d(rv), np.atleast_1d(rc)])
    if not np.isfinite(vals).all():
        j = int(np.flatnonzero(~np.isfinite(vals).all(axis=0))[0])
        coords = {k: (v if np.isscalar(v) else np.asarray(v)[j])
                  for k, v in bindings.items()}
        raise ValueError(f"residual blow-up at point {coords}")
    return ru, rv, rc


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

@dataclass
class TermSpec:
    """One loss term as graph nodes plus its binding leaves."""

    tag: str
    role: str
    pointwise: Expr          # per-point squared residual
    aggregate: Expr          # batch mean of pointwise (the term's MSE)
    weighted: Expr           # batch mean of w * pointwise
    weight_leaf: str         # per-point weight input (1 for mean schemes)
    lam_leaf: str            # per-term coefficient input


@dataclass
class TrainingProblem:
    """Everything the trainer needs for one (case, network) pair."""

    graph: Graph
    case: CaseDefinition
    spec: NetworkSpec
    terms: list[TermSpec]
    total: Expr
    roles: tuple[str, ...]
    shared_slots: np.ndarray  # gradient-norm probe (last hidden layer)

    @property
    def tags(self) -> tuple[str, ...]:
        return tuple(t.tag for t in self.terms)

    def role_leaves(self, role: str) -> tuple[str, str, str]:
        return (f"{role}.t", f"{role}.x", f"{role}.y")


TERM_ORDER = {
    "cavity": ("phy", "left", "right", "bottom", "up", "initial"),
    "poiseuille": ("phy", "inlet", "wall", "initial"),
    "bfs-slip": ("phy", "inlet", "outlet", "wall", "initial"),
    "bfs-no-slip": ("phy", "inlet", "initial"),
}


def _sq(e: Expr) -> Expr:
    return ad.powi(e, 2)


def build_problem(case: CaseDefinition, spec: NetworkSpec) -> TrainingProblem:
    """Construct the full loss graph for a case.

    Every role gets its own forward instance over its own (t, x, y) leaves;
    parameter slots are shared across instances.
    """
    if case.name not in TERM_ORDER:
        raise ValueError(f"unknown case '{case.name}'")
    sizes = spec.layer_sizes
    if sizes[0] != 3 or sizes[-1] != 3:
        raise ValueError("shape error: flow cases need 3 inputs (t,x,y) "
                         f"and 3 outputs (u,v,p), got {sizes}")
    g = Graph()
    tags = TERM_ORDER[case.name]
    terms: list[TermSpec] = []

    def instance(role: str):
        t = g.input(f"{role}.t")
        x = g.input(f"{role}.x")
        y = g.input(f"{role}.y")
        u, v, p = nets.forward(spec, (t, x, y), case.domain)
        return (t, x, y), (u, v, p)

    def add_term(tag: str, role: str, pointwise: Expr) -> None:
        w = g.input(f"w.{tag}")
        terms.append(TermSpec(tag, role, pointwise,
                              ad.batch_mean(pointwise),
                              ad.batch_mean(w * pointwise),
                              f"w.{tag}", f"lam.{tag}"))

    u0, v0, p0 = case.initial_uvp
    for tag in tags:
        if tag == "phy":
            ins, outs = instance("interior")
            r = ns_residuals(outs, ins, case.rho, case.nu)
            add_term("phy", "interior", _sq(r.r_u) + _sq(r.r_v) + _sq(r.r_c))
        elif tag == "initial":
            _, (u, v, p) = instance("initial")
            add_term("initial", "initial",
                     _sq(u - u0) + _sq(v - v0) + _sq(p - p0))
        elif tag in ("left", "right", "bottom"):
            _, (u, v, p) = instance(tag)
            add_term(tag, tag, _sq(u) + _sq(v))
        elif tag == "up":
            _, (u, v, p) = instance("up")
            add_term("up", "up", _sq(u - 1.0) + _sq(v))
        elif tag == "inlet":
            (t, x, y), (u, v, p) = instance("inlet")
            if case.name == "poiseuille":
                p_x = ad.gradient(p, (x,))[x]
                pw = _sq(u - case.inlet_u) + _sq(p - case.p_inlet) + _sq(p_x)
            elif case.name == "bfs-slip":
                pw = _sq(u - case.inlet_u) + _sq(v)
            else:  # bfs-no-slip
                p_x = ad.gradient(p, (x,))[x]
                pw = _sq(u - case.inlet_u) + _sq(v) \
                    + _sq(p - case.p_inlet) + _sq(p_x)
            add_term("inlet", "inlet", pw)
        elif tag == "outlet":
            (t, x, y), (u, v, p) = instance("outlet")
            u_x = ad.gradient(u, (x,))[x]
            v_x = ad.gradient(v, (x,))[x]
            add_term("outlet", "outlet",
                     _sq(u - case.u_outlet) + _sq(v - case.v_outlet)
                     + _sq(p) + _sq(u_x) + _sq(v_x))
        elif tag == "wall":
            (t, x, y), (u, v, p) = instance("wall")
            p_y = ad.gradient(p, (y,))[y]
            add_term("wall", "wall", _sq(p - case.p_wall) + _sq(p_y))
        else:  # pragma: no cover
            raise AssertionError(tag)

    total = None
    for term in terms:
        part = g.input(term.lam_leaf) * term.weighted
        total = part if total is None else total + part
    roles = tuple(dict.fromkeys(t.role for t in terms))
    return TrainingProblem(g, case, spec, terms, total, roles,
                           nets.last_hidden_slots(spec))


@dataclass
class LossTerm:
    """One evaluated loss term."""

    tag: str
    pointwise: np.ndarray
    aggregate: float


_PROBLEM_CACHE: dict = {}


def cached_problem(case: CaseDefinition, spec: NetworkSpec) -> TrainingProblem:
    key = (case, spec)
    if key not in _PROBLEM_CACHE:
        _PROBLEM_CACHE[key] = build_problem(case, spec)
    return _PROBLEM_CACHE[key]


def assemble_losses(case: CaseDefinition, spec: NetworkSpec, params: Params,
                    batches: Mapping[str, np.ndarray]) -> list[LossTerm]:
    """Evaluate every loss term of a case on the given per-role batches.

    Batch arrays are (n, 3) rows of (t, x, y); every role the case's term
    list needs must be present.
    """
    problem = cached_problem(case, spec)
    missing = [r for r in problem.roles if r not in batches]
    if missing:
        raise ValueError(f"incomplete batch set: missing {missing}")
    from . import engine

    out: list[LossTerm] = []
    for term in problem.terms:
        pts = np.asarray(batches[term.role], dtype=np.float64)
        prog = engine.compile_program(
            problem.graph, (term.pointwise.i, term.aggregate.i))
        runner = engine.Runner(prog, len(pts))
        tl, xl, yl = problem.role_leaves(term.role)
        runner.bind({tl: pts[:, 0], xl: pts[:, 1], yl: pts[:, 2]},
                    params.theta)
        runner.forward()
        runner.check_finite()
        out.append(LossTerm(term.tag, runner.value(term.pointwise.i).copy(),
                            float(runner.value(term.aggregate.i)[0])))
    return out
