"""Network definitions: tanh MLPs and spline-blend (KAN-style) layers.

Both families map (t, x, y) to (u, v, p) as expression graphs over shared
parameter slots, so one flat parameter vector drives every instantiation
of the same network inside a graph.

Spline-blend layers put a fixed uniform knot grid on [-1, 1] per input
unit; physical inputs are affinely normalized into that range before the
first layer. Hidden activations can drift outside the grid, where every
basis function is exactly zero and the edge degrades to its silu branch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Expr, Graph

Domain = Sequence[tuple[float, float]]

FAMILIES = ("tanh-mlp", "kan")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: sizes, activation family, spline grid."""

    layer_sizes: tuple[int, ...]
    family: str = "tanh-mlp"
    grid_size: int = 5
    spline_order: int = 3
    input_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family '{self.family}'")
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(n <= 0 for n in sizes):
            raise ValueError("layer_sizes needs >= 2 positive entries")
        if self.family == "kan" and (self.grid_size < 1 or self.spline_order < 0):
            raise ValueError("kan needs grid_size >= 1 and spline_order >= 0")

    @property
    def basis_count(self) -> int:
        return self.grid_size + self.spline_order

    def param_count(self) -> int:
        sizes = self.layer_sizes
        if self.family == "tanh-mlp":
            return sum(nin * nout + nout for nin, nout in zip(sizes, sizes[1:]))
        per_edge = self.basis_count + 2  # coefficients + both blend weights
        return sum(nin * nout * per_edge for nin, nout in zip(sizes, sizes[1:]))


# ---------------------------------------------------------------------------
# B-spline basis (Cox-de Boor)
# ---------------------------------------------------------------------------

def knot_vector(grid_size: int, order: int,
                lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Uniform interior knots over [lo, hi] with `order` replicated-spacing
    extension knots on each side; length grid_size + 2*order + 1."""
    h = (hi - lo) / grid_size
    return lo + h * (np.arange(grid_size + 2 * order + 1) - order)


def _last_interior_span(knots: Sequence[float], order: int) -> int:
    # Span whose right end is the last interior knot; its degree-0 box is
    # right-closed so the basis sums to 1 at the right boundary.
    return len(knots) - order - 2


def _box_value(x: float, i: int, knots: Sequence[float], last: int) -> float:
    # Half-open spans, except the one ending at the last interior knot,
    # which is right-closed (so the basis still sums to 1 there); its
    # successor opens on the left to avoid double counting.
    if i == last:
        return 1.0 if knots[i] <= x <= knots[i + 1] else 0.0
    if i == last + 1:
        return 1.0 if knots[i] < x < knots[i + 1] else 0.0
    return 1.0 if knots[i] <= x < knots[i + 1] else 0.0


def bspline_basis(x: float, i: int, order: int,
                  knots: Sequence[float]) -> float:
    """B_i^order(x) by the two-term recursion; zero-span terms contribute 0."""
    if i < 0 or i + order + 1 >= len(knots):
        raise ValueError(f"invalid basis index {i} for order {order} "
                         f"and {len(knots)} knots")
    return _bspline_rec(x, i, order, knots,
                        _last_interior_span(knots, order))


def _bspline_rec(x, i, d, knots, last):
    if d == 0:
        return _box_value(x, i, knots, last)
    out = 0.0
    den = knots[i + d] - knots[i]
    if den != 0.0:
        out += (x - knots[i]) / den * _bspline_rec(x, i, d - 1, knots, last)
    den = knots[i + d + 1] - knots[i + 1]
    if den != 0.0:
        out += (knots[i + d + 1] - x) / den * \
            _bspline_rec(x, i + 1, d - 1, knots, last)
    return out


def bspline_stack(x: Expr, grid_size: int, order: int,
                  knots: Optional[np.ndarray] = None) -> list[Expr]:
    """All grid_size + order basis nodes of the given order at x.

    Levels of the recursion are shared across bases, so the whole stack
    costs far less than independent per-basis recursions.
    """
    if knots is None:
        knots = knot_vector(grid_size, order)
    n_knots = len(knots)
    last = _last_interior_span(knots, order)
    diffs = [x - float(k) for k in knots]          # x - xi_j
    rdiffs = [float(k) - x for k in knots]         # xi_j - x
    level = [ad.box(x, float(knots[j]), float(knots[j + 1]),
                    right_closed=(j == last), left_open=(j == last + 1))
             for j in range(n_knots - 1)]
    for d in range(1, order + 1):
        nxt = []
        for j in range(n_knots - 1 - d):
            den1 = float(knots[j + d] - knots[j])
            den2 = float(knots[j + d + 1] - knots[j + 1])
            term = None
            if den1 != 0.0:
                term = diffs[j] / den1 * level[j]
            if den2 != 0.0:
                t2 = rdiffs[j + d + 1] / den2 * level[j + 1]
                term = t2 if term is None else term + t2
            nxt.append(term if term is not None else x.g.constant(0.0))
        level = nxt
    return level[: grid_size + order]


def kan_edge(x: Expr, lam_base: Union[Expr, float],
             lam_spline: Union[Expr, float],
             coeffs: Sequence[Union[Expr, float]],
             grid_size: int, order: int,
             knots: Optional[np.ndarray] = None) -> Expr:
    """lam_base * silu(x) + lam_spline * sum_i c_i B_i(x)."""
    basis = bspline_stack(x, grid_size, order, knots)
    if len(coeffs) != len(basis):
        raise ValueError(f"expected {len(basis)} coefficients, "
                         f"got {len(coeffs)}")
    spline = None
    for c, b in zip(coeffs, basis):
        term = c * b if isinstance(c, Expr) else b * float(c)
        spline = term if spline is None else spline + term
    return lam_base * ad.silu(x) + lam_spline * spline


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamBlock:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def param_layout(spec: NetworkSpec) -> list[ParamBlock]:
    blocks: list[ParamBlock] = []
    off = 0
    sizes = spec.layer_sizes
    for layer, (nin, nout) in enumerate(zip(sizes, sizes[1:])):
        if spec.family == "tanh-mlp":
            for name, shape in ((f"layer{layer}.weight", (nout, nin)),
                                (f"layer{layer}.bias", (nout,))):
                blocks.append(ParamBlock(name, shape, off))
                off += blocks[-1].size
        else:
            for name, shape in (
                    (f"layer{layer}.coeff", (nout, nin, spec.basis_count)),
                    (f"layer{layer}.lam_base", (nout, nin)),
                    (f"layer{layer}.lam_spline", (nout, nin))):
                blocks.append(ParamBlock(name, shape, off))
                off += blocks[-1].size
    assert off == spec.param_count()
    return blocks


@dataclass
class Params:
    """Flat trainable vector plus its block layout."""

    spec: NetworkSpec
    theta: np.ndarray
    seed: int = 0

    def block(self, name: str) -> np.ndarray:
        for b in param_layout(self.spec):
            if b.name == name:
                return self.theta[b.offset:b.offset + b.size].reshape(b.shape)
        raise KeyError(name)


def init_params(spec: NetworkSpec, seed: int,
                noise_scale: float = 0.1) -> Params:
    """Xavier-normal linear weights, zero biases, noise-scaled spline
    coefficients. Deterministic per seed.

    The per-edge blend weights are the linear mixing applied to the silu
    and spline branches, so they get the same Xavier-normal treatment as
    MLP weight matrices; starting them at 1 instead makes deep layers sum
    n_in O(1) branches and blows the initial outputs (and the physics
    residuals) up by orders of magnitude.
    """
    rng = np.random.default_rng(seed)
    blocks = param_layout(spec)
    theta = np.zeros(spec.param_count(), dtype=np.float64)
    for b in blocks:
        view = theta[b.offset:b.offset + b.size]
        if b.name.endswith(".weight"):
            nout, nin = b.shape
            view[:] = rng.normal(0.0, np.sqrt(2.0 / (nin + nout)), b.size)
        elif b.name.endswith(".bias"):
            view[:] = 0.0
        elif b.name.endswith(".coeff"):
            view[:] = noise_scale * rng.standard_normal(b.size)
        else:  # lam_base / lam_spline
            nout, nin = b.shape
            view[:] = rng.normal(0.0, np.sqrt(2.0 / (nin + nout)), b.size)
    if not np.isfinite(theta).all():
        raise ValueError("non-finite parameter after initialization")
    return Params(spec, theta, seed)


def last_hidden_slots(spec: NetworkSpec) -> np.ndarray:
    """Slot indices of the last hidden layer's parameters."""
    hidden = len(spec.layer_sizes) - 3  # layer feeding the output layer
    idx = []
    for b in param_layout(spec):
        if b.name.startswith(f"layer{hidden}."):
            idx.extend(range(b.offset, b.offset + b.size))
    return np.asarray(idx, dtype=np.int64)


# ---------------------------------------------------------------------------
# Forward graphs
# ---------------------------------------------------------------------------

def forward(spec: NetworkSpec, inputs: Sequence[Expr],
            domain: Optional[Domain] = None) -> tuple[Expr, ...]:
    """Build the network's output nodes from the given input nodes.

    ``domain`` gives per-input (lo, hi) physical ranges; inputs are then
    affinely mapped onto the spline grid range before the first layer
    (applied to both families so they train on identical coordinates).
    """
    if len(inputs) != spec.layer_sizes[0]:
        raise ValueError("shape error: expected "
                         f"{spec.layer_sizes[0]} inputs, got {len(inputs)}")
    g = inputs[0].g
    lo, hi = spec.input_range
    h: list[Expr] = list(inputs)
    if domain is not None:
        if len(domain) != len(inputs):
            raise ValueError("shape error: domain rank mismatch")
        h = [lo + (hi - lo) * (z - d0) / (d1 - d0)
             for z, (d0, d1) in zip(h, domain)]
    if spec.family == "tanh-mlp":
        return _forward_mlp(g, spec, h)
    return _forward_kan(g, spec, h)


def _forward_mlp(g: Graph, spec: NetworkSpec, h: list[Expr]):
    sizes = spec.layer_sizes
    blocks = {b.name: b for b in param_layout(spec)}
    n_layers = len(sizes) - 1
    for layer in range(n_layers):
        w = blocks[f"layer{layer}.weight"]
        bias = blocks[f"layer{layer}.bias"]
        nin, nout = sizes[layer], sizes[layer + 1]
        out = []
        for j in range(nout):
            z = g.param(bias.offset + j)
            for k in range(nin):
                z = z + g.param(w.offset + j * nin + k) * h[k]
            out.append(ad.tanh(z) if layer < n_layers - 1 else z)
        h = out
    return tuple(h)


def _forward_kan(g: Graph, spec: NetworkSpec, h: list[Expr]):
    sizes = spec.layer_sizes
    blocks = {b.name: b for b in param_layout(spec)}
    knots = knot_vector(spec.grid_size, spec.spline_order, *spec.input_range)
    nb = spec.basis_count
    for layer in range(len(sizes) - 1):
        nin, nout = sizes[layer], sizes[layer + 1]
        coeff = blocks[f"layer{layer}.coeff"]
        lam_b = blocks[f"layer{layer}.lam_base"]
        lam_s = blocks[f"layer{layer}.lam_spline"]
        stacks = [bspline_stack(h[k], spec.grid_size, spec.spline_order, knots)
                  for k in range(nin)]
        silus = [ad.silu(h[k]) for k in range(nin)]
        out = []
        for j in range(nout):
            acc = None
            for k in range(nin):
                spline = None
                base_off = coeff.offset + (j * nin + k) * nb
                for i in range(nb):
                    term = g.param(base_off + i) * stacks[k][i]
                    spline = term if spline is None else spline + term
                edge = (g.param(lam_b.offset + j * nin + k) * silus[k]
                        + g.param(lam_s.offset + j * nin + k) * spline)
                acc = edge if acc is None else acc + edge
            out.append(acc)
        h = out
    return tuple(h)


_PREDICT_CACHE: dict = {}


def predict(spec: NetworkSpec, params: Params, points: np.ndarray,
            domain: Optional[Domain] = None,
            chunk: int = 4096) -> np.ndarray:
    """Evaluate the network at an (N, d_in) array of points."""
    from . import engine

    points = np.asarray(points, dtype=np.float64)
    key = (spec, None if domain is None else tuple(map(tuple, domain)))
    cached = _PREDICT_CACHE.get(key)
    if cached is None:
        g = Graph()
        ins = [g.input(f"in{k}") for k in range(spec.layer_sizes[0])]
        outs = forward(spec, ins, domain)
        prog = engine.compile_program(g, tuple(o.i for o in outs))
        cached = (prog, [o.i for o in outs])
        _PREDICT_CACHE[key] = cached
    prog, out_ids = cached
    n = points.shape[0]
    result = np.empty((n, len(out_ids)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        runner = engine.Runner(prog, stop - start)
        runner.bind({f"in{k}": points[start:stop, k]
                     for k in range(points.shape[1])}, params.theta)
        runner.forward()
        for c, oid in enumerate(out_ids):
            result[start:stop, c] = runner.value(oid)
    return result


# ---------------------------------------------------------------------------
# Checkpoint format: key -> array map with a JSON header; round-trips
# bit-exactly (float64 arrays are stored raw).
# ---------------------------------------------------------------------------

def spec_header(spec: NetworkSpec, seed: int) -> str:
    return json.dumps({
        "layer_sizes": list(spec.layer_sizes),
        "family": spec.family,
        "grid_size": spec.grid_size,
        "spline_order": spec.spline_order,
        "input_range": list(spec.input_range),
        "seed": seed,
    }, sort_keys=True)


def spec_from_header(header: str) -> tuple[NetworkSpec, int]:
    h = json.loads(header)
    spec = NetworkSpec(tuple(h["layer_sizes"]), h["family"], h["grid_size"],
                       h["spline_order"], tuple(h["input_range"]))
    return spec, int(h["seed"])


def save_params(path, params: Params) -> None:
    np.savez(path, header=np.bytes_(spec_header(params.spec, params.seed)),
             theta=params.theta)


def load_params(path) -> Params:
    with np.load(path) as data:
        spec, seed = spec_from_header(bytes(data["header"]).decode())
        return Params(spec, data["theta"].copy(), seed)
