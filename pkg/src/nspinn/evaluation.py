"""RMSE scoring against reference fields, field exports, timing summaries.

Reference data is a headered CSV of (t, x, y, u, v, p) rows; predictions
are evaluated exactly at the reference coordinates, never interpolated.
Relative errors back the 90% failure rule but are flagged unreliable for
near-zero fields (RMS below 1e-6), where only the absolute RMSE is
trusted.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nets
from .nets import NetworkSpec, Params
from .sampling import CaseDefinition

FIELDS = ("u", "v", "p")
RELIABLE_RMS = 1e-6


@dataclass
class ReferenceField:
    """Tabulated reference solution rows in physical units."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    source: str = ""

    def __len__(self) -> int:
        return len(self.t)

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.t, self.x, self.y])

    @property
    def values(self) -> np.ndarray:
        return np.column_stack([self.u, self.v, self.p])

    def validate(self) -> "ReferenceField":
        cols = (self.t, self.x, self.y, self.u, self.v, self.p)
        if any(not np.isfinite(c).all() for c in cols):
            raise ValueError("reference contains non-finite values")
        keys = set(zip(self.t, self.x, self.y))
        if len(keys) != len(self.t):
            raise ValueError("duplicate (t,x,y) keys in reference")
        return self


def load_reference(path) -> ReferenceField:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["t", "x", "y", "u", "v", "p"]:
            raise ValueError(f"bad reference header: {header}")
        rows = np.array([[float(c) for c in row] for row in reader])
    if rows.size == 0:
        raise ValueError("no evaluation points in reference")
    return ReferenceField(*(rows[:, k] for k in range(6)),
                          source=str(path)).validate()


def save_reference(path, ref: ReferenceField) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "u", "v", "p"])
        for row in np.column_stack([ref.points, ref.values]):
            w.writerow([repr(float(c)) for c in row])


@dataclass
class RmseReport:
    rmse: dict[str, float]
    relative: dict[str, Optional[float]]  # None when the field RMS ~ 0
    n: int

    def lines(self) -> str:
        out = [f"n={self.n}"]
        for f in FIELDS:
            out.append(f"rmse_{f}={self.rmse[f]!r}")
            rel = self.relative[f]
            out.append(f"rel_{f}=" + ("n/a" if rel is None else repr(rel)))
        return "\n".join(out) + "\n"


def rmse(pred: np.ndarray, ref: ReferenceField) -> RmseReport:
    """Per-field root mean square error over all reference rows."""
    if len(ref) == 0:
        raise ValueError("no evaluation points")
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != (len(ref), 3):
        raise ValueError(f"shape error: predictions {pred.shape} vs "
                         f"{(len(ref), 3)} reference")
    out_rmse, out_rel = {}, {}
    for k, f in enumerate(FIELDS):
        truth = ref.values[:, k]
        err = math.sqrt(float(np.mean((pred[:, k] - truth) ** 2)))
        rms = math.sqrt(float(np.mean(truth ** 2)))
        out_rmse[f] = err
        out_rel[f] = err / rms if rms >= RELIABLE_RMS else None
    return RmseReport(out_rmse, out_rel, len(ref))


def evaluate_network(spec: NetworkSpec, params: Params,
                     case: CaseDefinition, ref: ReferenceField) -> RmseReport:
    pred = nets.predict(spec, params, ref.points, case.domain)
    return rmse(pred, ref)


def delta_improvement(rmse_tanh: float, rmse_bspline: float) -> Optional[float]:
    """Relative percentage difference; None when the baseline is zero."""
    if rmse_tanh == 0.0:
        return None
    return (rmse_tanh - rmse_bspline) / rmse_tanh * 100.0


def export_field_grid(spec: NetworkSpec, params: Params,
                      case: CaseDefinition, t: float, resolution: int,
                      path, reference: Optional[ReferenceField] = None) -> int:
    """Regular-grid snapshot CSV at one time; returns the row count.

    Reference columns appear when the reference covers time ``t`` and the
    grid coordinates coincide exactly with reference rows.
    """
    t0, tr = case.t_range
    if not t0 <= t <= tr:
        raise ValueError(f"time out of range: {t} not in [{t0}, {tr}]")
    xs = np.linspace(*case.x_range, resolution)
    ys = np.linspace(*case.y_range, resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([np.full(gx.size, t), gx.ravel(), gy.ravel()])
    pred = nets.predict(spec, params, pts, case.domain)
    lookup = {}
    if reference is not None:
        at_t = reference.t == t
        lookup = {(xx, yy): val for xx, yy, val in
                  zip(reference.x[at_t], reference.y[at_t],
                      reference.values[at_t])}
    with_ref = bool(lookup) and all(
        (x, y) in lookup for x, y in zip(pts[:, 1], pts[:, 2]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["x", "y", "u", "v", "p"]
        if with_ref:
            header += ["u_ref", "v_ref", "p_ref",
                       "abs_err_u", "abs_err_v", "abs_err_p"]
        w.writerow(header)
        for row, (u, v, p) in zip(pts, pred):
            cells = [repr(float(row[1])), repr(float(row[2])), repr(float(u)),
                     repr(float(v)), repr(float(p))]
            if with_ref:
                ru, rv, rp = lookup[(row[1], row[2])]
                cells += [repr(float(ru)), repr(float(rv)), repr(float(rp)),
                          repr(float(abs(u - ru))), repr(float(abs(v - rv))),
                          repr(float(abs(p - rp)))]
            w.writerow(cells)
    return len(pts)


def timing_summary(seconds: Sequence[float]) -> dict[str, float]:
    """Mean and nearest-rank 50th/95th percentiles of iteration times."""
    if len(seconds) == 0:
        raise ValueError("empty history")
    s = np.sort(np.asarray(seconds, dtype=np.float64))
    n = s.size

    def rank(q: float) -> float:
        return float(s[min(n - 1, max(0, math.ceil(q * n) - 1))])

    return {"mean": float(s.mean()), "p50": rank(0.5), "p95": rank(0.95)}


# ---------------------------------------------------------------------------
# Synthetic analytic reference (developed laminar channel flow). Useful for
# exercising evaluation end to end without external solver output.
# ---------------------------------------------------------------------------

def poiseuille_reference(case: CaseDefinition, nx: int = 24, ny: int = 24,
                         times: Sequence[float] = (5.0,)) -> ReferenceField:
    half = case.y_range[1]
    u_max = 1.5 * case.inlet_u  # same flux as the uniform inlet profile
    dpdx = 2.0 * case.rho * case.nu * u_max / half ** 2
    xs = np.linspace(*case.x_range, nx)
    ys = np.linspace(*case.y_range, ny)
    rows = []
    for t in times:
        for x in xs:
            for y in ys:
                u = u_max * (1.0 - (y / half) ** 2)
                p = dpdx * (case.x_range[1] - x)
                rows.append((t, x, y, u, 0.0, p))
    arr = np.asarray(rows)
    return ReferenceField(*(arr[:, k] for k in range(6)),
                          source="analytic-poiseuille").validate()
