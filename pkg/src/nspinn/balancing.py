"""Loss-weighting schemes: fixed, RBA, SA, LRA, and GradNorm.

All updates are pure: they take a state plus the epoch's statistics and
return a new state. Weight values act as constants in the network's
parameter gradient; SA's multipliers get their own ascent step through the
mask m(lambda) = lambda^2.

Update cost bookkeeping mirrors the schemes' asymptotics and is asserted
in tests: RBA and SA touch batch x terms point-weights per epoch, while
LRA and GradNorm touch one weight per term but require an extra gradient
pass per term (counted by the trainer).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

SCHEMES = ("fixed", "rba", "sa", "lra", "gradnorm")

DEFAULT_HYPER = {
    "gamma": 0.5,          # RBA decay
    "eta_star": 0.5,       # RBA learning rate
    "alpha_sa": 0.001,     # SA ascent rate
    "alpha_ema": 0.5,      # LRA moving-average factor
    "alpha_asym": 1.5,     # GradNorm asymmetry exponent
    "gradnorm_lr": 0.025,  # GradNorm weight step
    "lra_ceiling": 1e4,    # cap for zero-gradient terms
}


class WeightDivergence(RuntimeError):
    """A scheme produced non-finite weights."""


@dataclass
class WeightState:
    scheme: str
    term_tags: tuple[str, ...]
    term_weights: np.ndarray
    point_weights: Optional[dict[str, np.ndarray]]
    hyper: dict[str, float]
    step_count: int = 0
    initial_losses: Optional[np.ndarray] = None
    counters: dict[str, int] = field(default_factory=lambda: {
        "point_weight_touches": 0,
        "term_weight_touches": 0,
        "gradient_passes": 0,
    })

    @property
    def per_point(self) -> bool:
        return self.scheme in ("rba", "sa")

    def effective_point_weights(self, tag: str) -> np.ndarray | float:
        """Per-point multiplier applied inside the term mean."""
        if self.point_weights is None:
            return 1.0
        lam = self.point_weights[tag]
        return lam * lam if self.scheme == "sa" else lam

    def bindings(self) -> dict[str, np.ndarray | float]:
        """Values for the loss graph's lam.* and w.* leaves."""
        out: dict[str, np.ndarray | float] = {}
        for k, tag in enumerate(self.term_tags):
            out[f"lam.{tag}"] = float(self.term_weights[k])
            out[f"w.{tag}"] = self.effective_point_weights(tag)
        return out


def make_state(scheme: str, tags: Sequence[str], batch: int,
               weights: Optional[Sequence[float]] = None,
               **hyper) -> WeightState:
    """Initial state for a scheme; every multiplier starts at 1."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme '{scheme}'")
    h = dict(DEFAULT_HYPER)
    h.update(hyper)
    tags = tuple(tags)
    m = len(tags)
    if scheme == "fixed":
        return fixed_weights(tags, weights if weights is not None
                             else np.ones(m), hyper=h)
    tw = np.ones(m)
    pw = ({tag: np.ones(batch) for tag in tags}
          if scheme in ("rba", "sa") else None)
    return WeightState(scheme, tags, tw, pw, h)


def fixed_weights(tags: Sequence[str], constants: Sequence[float],
                  hyper: Optional[dict] = None) -> WeightState:
    tags = tuple(tags)
    w = np.asarray(constants, dtype=np.float64)
    if w.shape != (len(tags),):
        raise ValueError("weight/term arity mismatch: "
                         f"{w.size} weights for {len(tags)} terms")
    return WeightState("fixed", tags, w.copy(), None,
                       dict(hyper or DEFAULT_HYPER))


def heuristic_constants(tags: Sequence[str], w_phy: float = 0.1,
                        w_bc: float = 2.0, w_ic: float = 2.0) -> np.ndarray:
    """Fixed heuristic weighting: one constant each for the physics,
    boundary, and initial groups, broadcast over boundary terms."""
    return np.asarray([w_phy if t == "phy" else w_ic if t == "initial"
                       else w_bc for t in tags])


def _bump(state: WeightState, key: str, amount: int) -> dict[str, int]:
    c = dict(state.counters)
    c[key] = c.get(key, 0) + amount
    return c


def rba_update(state: WeightState,
               residuals: Mapping[str, np.ndarray]) -> WeightState:
    """lambda <- gamma * lambda + eta* |e| / max|e|, per point and term.

    All-zero residuals decay the weights by gamma (defined, not an error).
    """
    gamma = state.hyper["gamma"]
    eta = state.hyper["eta_star"]
    new_pw = {}
    touched = 0
    for tag in state.term_tags:
        lam = state.point_weights[tag]
        e = np.abs(np.asarray(residuals[tag], dtype=np.float64))
        peak = e.max() if e.size else 0.0
        if peak > 0.0:
            new_pw[tag] = gamma * lam + eta * e / peak
        else:
            new_pw[tag] = gamma * lam
        touched += lam.size
    return replace(state, point_weights=new_pw,
                   step_count=state.step_count + 1,
                   counters=_bump(state, "point_weight_touches", touched))


def sa_update(state: WeightState,
              residuals: Mapping[str, np.ndarray]) -> WeightState:
    """Ascent through the mask: lambda <- lambda + alpha * lambda * e^2."""
    alpha = state.hyper["alpha_sa"]
    new_pw = {}
    touched = 0
    for tag in state.term_tags:
        lam = state.point_weights[tag]
        e = np.asarray(residuals[tag], dtype=np.float64)
        lam = lam + alpha * lam * e * e
        if not np.isfinite(lam).all():
            raise WeightDivergence(f"weight divergence in term '{tag}'")
        new_pw[tag] = lam
        touched += lam.size
    return replace(state, point_weights=new_pw,
                   step_count=state.step_count + 1,
                   counters=_bump(state, "point_weight_touches", touched))


def lra_update(state: WeightState,
               term_grads: Mapping[str, np.ndarray]) -> WeightState:
    """Gradient-ratio annealing: lambda_hat = max|g_phy| / mean|g_i|,
    folded in by an exponential moving average; the physics weight is 1."""
    alpha = state.hyper["alpha_ema"]
    ceiling = state.hyper["lra_ceiling"]
    ref = np.abs(np.asarray(term_grads["phy"])).max()
    new_w = state.term_weights.copy()
    for k, tag in enumerate(state.term_tags):
        if tag == "phy":
            new_w[k] = 1.0
            continue
        denom = np.abs(np.asarray(term_grads[tag])).mean()
        if denom == 0.0:
            log.warning("zero-gradient term '%s'; capping ratio at %g",
                        tag, ceiling)
            lam_hat = ceiling
        else:
            lam_hat = ref / denom
        new_w[k] = (1.0 - alpha) * state.term_weights[k] + alpha * lam_hat
    if not np.isfinite(new_w).all():
        raise WeightDivergence("weight divergence in gradient-ratio update")
    return replace(state, term_weights=new_w,
                   step_count=state.step_count + 1,
                   counters=_bump(state, "term_weight_touches", len(new_w)))


def gradnorm_update(state: WeightState,
                    grad_norms: Mapping[str, float],
                    losses: Mapping[str, float]) -> WeightState:
    """One L1 step of the gradient-norm balancing objective.

    Targets are mean(w_i * n_i) * r_i^alpha with r_i the relative inverse
    training rate from the loss ratios L_i(t) / L_i(0); after the step the
    weights are rescaled to sum to the term count. Instability is
    surfaced, not clamped: non-finite or non-positive weight mass aborts.
    """
    alpha = state.hyper["alpha_asym"]
    lr = state.hyper["gradnorm_lr"]
    m = len(state.term_tags)
    L = np.asarray([losses[t] for t in state.term_tags], dtype=np.float64)
    n = np.asarray([grad_norms[t] for t in state.term_tags], dtype=np.float64)
    L0 = state.initial_losses
    if L0 is None:
        L0 = L.copy()
    valid = L0 > 0.0
    ratios = np.ones(m)
    ratios[valid] = L[valid] / L0[valid]
    rate = np.ones(m)
    if valid.any():
        rate[valid] = ratios[valid] / ratios[valid].mean()
    w = state.term_weights
    gw = w * n
    target = gw.mean() * rate ** alpha
    step = np.sign(gw - target) * n
    new_w = w - lr * step
    total = new_w.sum()
    if not np.isfinite(new_w).all() or not np.isfinite(total) or total <= 0:
        raise WeightDivergence("gradient-norm weights diverged")
    new_w = new_w * (m / total)
    return replace(state, term_weights=new_w, initial_losses=L0,
                   step_count=state.step_count + 1,
                   counters=_bump(state, "term_weight_touches", m))


def weighted_total(terms, state: WeightState) -> float:
    """Recompute the scalar training objective from evaluated terms.

    Mean schemes: sum_k lambda_k * aggregate_k. Point schemes: sum of
    mean(w_i * pointwise_i) with w the effective per-point weights.
    """
    if len(terms) != len(state.term_tags):
        raise ValueError("weight/term arity mismatch")
    total = 0.0
    for k, term in enumerate(terms):
        if state.per_point:
            w = state.effective_point_weights(term.tag)
            total += float(np.mean(w * term.pointwise))
        else:
            total += float(state.term_weights[k]) * term.aggregate
    return total
