"""Flow-case domains, Sobol collocation sampling, and mini-batching.

The Sobol generator is self-contained (classic direction numbers for up to
six dimensions, Gray-code order). Conventions, fixed and tested: the zero
point is emitted first, all coordinates lie in [0, 1), and ``skip`` drops
that many leading points of the sequence.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

_BITS = 32
_SCALE = float(2 ** _BITS)

# Primitive-polynomial degree, coefficient, and initial direction integers
# for dimensions 2..6 (dimension 1 is the van der Corput sequence).
_DIRECTIONS = (
    (1, 0, (1,)),
    (2, 1, (1, 3)),
    (3, 1, (1, 3, 1)),
    (3, 2, (1, 1, 1)),
    (4, 1, (1, 1, 3, 3)),
)

MAX_DIM = len(_DIRECTIONS) + 1


def _direction_vectors(dim: int) -> np.ndarray:
    v = np.zeros((dim, _BITS), dtype=np.uint64)
    v[0] = [1 << (_BITS - j) for j in range(1, _BITS + 1)]
    for d in range(1, dim):
        s, a, m_init = _DIRECTIONS[d - 1]
        m = list(m_init)
        for j in range(s, _BITS):
            new = m[j - s] ^ (m[j - s] << s)
            for k in range(1, s):
                if (a >> (s - 1 - k)) & 1:
                    new ^= m[j - k] << k
            m.append(new)
        v[d] = [m[j] << (_BITS - 1 - j) for j in range(_BITS)]
    return v


def sobol(n: int, dim: int, skip: int = 0) -> np.ndarray:
    """First ``n`` Sobol points in [0, 1)^dim after dropping ``skip``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= dim <= MAX_DIM:
        raise ValueError(f"dimension out of range: {dim} (supported 1..{MAX_DIM})")
    v = _direction_vectors(dim)
    out = np.empty((n, dim), dtype=np.float64)
    for row, k in enumerate(range(skip, skip + n)):
        gray = k ^ (k >> 1)
        acc = np.zeros(dim, dtype=np.uint64)
        bit = 0
        while gray:
            if gray & 1:
                acc ^= v[:, bit]
            gray >>= 1
            bit += 1
        out[row] = acc / _SCALE
    return out


# ---------------------------------------------------------------------------
# Case catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseDefinition:
    """Space-time box, fluid constants, and boundary catalog for one case."""

    name: str
    t_range: tuple[float, float]
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    rho: float
    nu: float
    segments: tuple[str, ...]
    initial_uvp: tuple[float, float, float]
    inlet_u: float = 0.0
    # Reference values in the loss listings; zero by default and
    # overridable per run (outlet pressure is zero, gradients vanish).
    p_inlet: float = 0.0
    p_wall: float = 0.0
    u_outlet: float = 0.0
    v_outlet: float = 0.0

    @property
    def domain(self):
        return (self.t_range, self.x_range, self.y_range)


CASES: dict[str, CaseDefinition] = {
    "cavity": CaseDefinition(
        name="cavity", t_range=(0.0, 10.0), x_range=(0.0, 1.0),
        y_range=(0.0, 1.0), rho=1056.0, nu=0.01,
        segments=("left", "right", "bottom", "up"),
        initial_uvp=(0.0, 0.0, 0.0)),
    "poiseuille": CaseDefinition(
        name="poiseuille", t_range=(0.0, 5.0), x_range=(0.0, 1.0),
        y_range=(-0.0075, 0.0075), rho=1060.0, nu=3.3144e-6,
        segments=("inlet", "outlet", "wall"),
        initial_uvp=(0.2, 0.0, 0.0), inlet_u=0.2),
    "bfs-slip": CaseDefinition(
        name="bfs-slip", t_range=(0.0, 5.0), x_range=(0.0, 1.0),
        y_range=(-7.5e-3, 7.5e-3), rho=1056.0, nu=0.00345,
        segments=("inlet", "outlet", "wall"),
        initial_uvp=(0.2, 0.0, 0.0), inlet_u=0.2),
    "bfs-no-slip": CaseDefinition(
        name="bfs-no-slip", t_range=(0.0, 5.0), x_range=(0.0, 1.0),
        y_range=(-7.5e-3, 7.5e-3), rho=1056.0, nu=0.00345,
        segments=("inlet", "outlet", "wall"),
        initial_uvp=(0.2, 0.0, 0.0), inlet_u=0.2),
}


def get_case(name: str, **overrides) -> CaseDefinition:
    if name not in CASES:
        raise ValueError(f"unknown case '{name}'")
    case = CASES[name]
    return replace(case, **overrides) if overrides else case


# Distinct skip offsets per role keep the per-role point patterns
# uncorrelated; these strides are part of the sampling contract.
ROLE_ORDER = ("interior", "initial", "left", "right", "bottom", "up",
              "inlet", "outlet", "wall")
ROLE_STRIDE = 1 << 17
SEED_STRIDE = 1 << 22


def role_skip(role: str, seed: int) -> int:
    return seed * SEED_STRIDE + ROLE_STRIDE * (ROLE_ORDER.index(role) + 1)


def _scale(raw: np.ndarray, ranges) -> np.ndarray:
    out = np.empty_like(raw)
    for k, (lo, hi) in enumerate(ranges):
        out[:, k] = lo + (hi - lo) * raw[:, k]
    return out


def sample_case(case: CaseDefinition, counts: Mapping[str, int],
                seed: int = 0) -> dict[str, np.ndarray]:
    """Collocation pools per role, as (n, 3) arrays of (t, x, y) rows.

    Interior rows fill the space-time box; boundary rows pin the segment
    coordinate exactly; initial rows sit at t = t0. Pure function of
    (case, counts, seed).
    """
    t0, tr = case.t_range
    x0, xr = case.x_range
    y0, yr = case.y_range
    pools: dict[str, np.ndarray] = {}
    for role, n in counts.items():
        if n < 0:
            raise ValueError(f"negative count for role '{role}'")
        if n == 0:
            pools[role] = np.empty((0, 3))
            continue
        skip = None
        if role in ("interior", "initial") or role in case.segments:
            skip = role_skip(role, seed)
        else:
            raise ValueError(f"undefined boundary '{role}'")
        if role == "interior":
            pools[role] = _scale(sobol(n, 3, skip), case.domain)
        elif role == "initial":
            xy = _scale(sobol(n, 2, skip), (case.x_range, case.y_range))
            pools[role] = np.column_stack([np.full(n, t0), xy])
        elif role in ("left", "right", "inlet", "outlet"):
            ty = _scale(sobol(n, 2, skip), (case.t_range, case.y_range))
            xv = {"left": x0, "inlet": x0, "right": xr, "outlet": xr}[role]
            pools[role] = np.column_stack([ty[:, 0], np.full(n, xv), ty[:, 1]])
        elif role in ("bottom", "up"):
            tx = _scale(sobol(n, 2, skip), (case.t_range, case.x_range))
            yv = y0 if role == "bottom" else yr
            pools[role] = np.column_stack([tx, np.full(n, yv)])
        elif role == "wall":
            # Both channel walls in one pool: even rows top, odd rows bottom.
            tx = _scale(sobol(n, 2, skip), (case.t_range, case.x_range))
            yv = np.where(np.arange(n) % 2 == 0, yr, y0)
            pools[role] = np.column_stack([tx, yv])
    return pools


def minibatch(points: np.ndarray, batch: int,
              rng: np.random.Generator) -> np.ndarray:
    """Uniform without-replacement draw of ``batch`` rows."""
    if batch > len(points):
        raise ValueError(f"insufficient points: batch {batch} from "
                         f"{len(points)}")
    idx = rng.choice(len(points), size=batch, replace=False)
    return points[idx]


def write_points_csv(path, pools: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["role", "t", "x", "y"])
        for role in sorted(pools):
            for t, x, y in pools[role]:
                w.writerow([role, repr(float(t)), repr(float(x)), repr(float(y))])
