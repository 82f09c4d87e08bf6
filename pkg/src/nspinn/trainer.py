"""Adam training loop with per-epoch weight updates and checkpointing.

An "epoch" is one mini-batch iteration: draw one batch per role, assemble
the weighted loss, backpropagate to the network parameters, take an Adam
step, then (strictly after the step) let the weighting scheme update its
state from this epoch's statistics.

Runs are deterministic given the seed; checkpoints capture parameters,
optimizer moments, weight state, RNG state, and the history so far, so a
resumed run reproduces the uninterrupted one exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import balancing, engine, physics, sampling
from .balancing import WeightState
from .nets import NetworkSpec, Params, init_params, spec_from_header, spec_header
from .physics import TrainingProblem
from .sampling import CaseDefinition


class TrainingDiverged(RuntimeError):
    """Non-finite training loss; carries the epoch it happened at."""

    def __init__(self, epoch: int, detail: str = "") -> None:
        super().__init__(f"training diverged at epoch {epoch}"
                         + (f": {detail}" if detail else ""))
        self.epoch = epoch


class GradientBlowup(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, lr: float = 0.001) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState,
              blocks=None) -> tuple[np.ndarray, AdamState]:
    """Standard bias-corrected Adam update; returns new arrays."""
    if grad.shape != theta.shape:
        raise ValueError("shape error: gradient/parameter mismatch")
    if not np.isfinite(grad).all():
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        name = f"slot {bad}"
        if blocks:
            for b in blocks:
                if b.offset <= bad < b.offset + b.size:
                    name = b.name
                    break
        raise GradientBlowup(f"gradient blow-up in {name}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    theta_new = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return theta_new, replace(state, m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# Records and configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainRecord:
    epoch: int
    aggregates: np.ndarray      # unweighted per-term means, fixed term order
    total: float                # weighted objective driving the step
    weights: np.ndarray         # term weights (point schemes: mean multiplier)
    seconds: float


@dataclass
class TrainConfig:
    epochs: int = 5000
    batch: int = 128
    lr: float = 0.001
    seed: int = 0
    interior_count: int = 20000
    boundary_count: int = 2000
    initial_count: int = 2000
    checkpoint_every: int = 1000
    checkpoint_path: Optional[str] = None
    noise_scale: float = 0.1


@dataclass
class TrainResult:
    params: Params
    history: list[TrainRecord]
    state: WeightState
    adam: Optional[AdamState] = None
    rng: Optional[np.random.Generator] = None
    status: str = "OK"
    diverged_epoch: Optional[int] = None

    @property
    def tags(self):
        return self.state.term_tags


def default_counts(problem: TrainingProblem, cfg: TrainConfig):
    counts = {}
    for role in problem.roles:
        if role == "interior":
            counts[role] = cfg.interior_count
        elif role == "initial":
            counts[role] = cfg.initial_count
        else:
            counts[role] = cfg.boundary_count
    return counts


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(case: CaseDefinition, spec: NetworkSpec, scheme_state: WeightState,
          cfg: TrainConfig,
          problem: Optional[TrainingProblem] = None,
          pools: Optional[Mapping[str, np.ndarray]] = None,
          resume: Optional[str] = None) -> TrainResult:
    """Run the optimization loop; raises TrainingDiverged on a non-finite
    objective (the caller maps that to status F)."""
    if problem is None:
        problem = physics.cached_problem(case, spec)
    if pools is None:
        pools = sampling.sample_case(case, default_counts(problem, cfg),
                                     cfg.seed)
    for role in problem.roles:
        if len(pools[role]) < cfg.batch:
            raise ValueError(f"insufficient points: role '{role}' has "
                             f"{len(pools[role])} < batch {cfg.batch}")

    blocks = None
    state = scheme_state
    history: list[TrainRecord] = []
    start_epoch = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        params = ck["params"]
        adam = ck["adam"]
        state = ck["weight_state"]
        rng = np.random.default_rng()
        rng.bit_generator.state = ck["rng_state"]
        history = ck["history"]
        start_epoch = ck["epoch"]
    else:
        params = init_params(spec, cfg.seed, cfg.noise_scale)
        adam = AdamState.fresh(params.theta.size, cfg.lr)
        rng = np.random.default_rng(cfg.seed)

    from .nets import param_layout
    blocks = param_layout(spec)

    prog = engine.compile_program(problem.graph, _training_outputs(problem))
    runner = engine.Runner(prog, cfg.batch)
    n_slots = params.theta.size
    per_term_grads = state.scheme in ("lra", "gradnorm")
    theta = params.theta

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        tic = time.perf_counter()
        bindings: dict = {}
        for role in problem.roles:
            batch = sampling.minibatch(pools[role], cfg.batch, rng)
            tl, xl, yl = problem.role_leaves(role)
            bindings[tl] = batch[:, 0]
            bindings[xl] = batch[:, 1]
            bindings[yl] = batch[:, 2]
        bindings.update(state.bindings())
        runner.bind(bindings, theta)
        runner.forward()

        aggregates = np.array([float(runner.value(t.aggregate.i)[0])
                               for t in problem.terms])
        total = float(runner.value(problem.total.i)[0])
        if not np.isfinite(total) or not np.isfinite(aggregates).all():
            raise TrainingDiverged(epoch, "non-finite loss")

        pointwise = None
        if state.per_point or per_term_grads:
            pointwise = {t.tag: runner.value(t.pointwise.i).copy()
                         for t in problem.terms}

        if per_term_grads:
            term_grads = {}
            for t in problem.terms:
                runner.backward(t.aggregate.i, 1.0)
                term_grads[t.tag] = runner.param_grads(n_slots)
            state.counters["gradient_passes"] += len(problem.terms)
            grad = np.zeros(n_slots)
            for k, t in enumerate(problem.terms):
                grad += state.term_weights[k] * term_grads[t.tag]
        else:
            runner.backward(problem.total.i, 1.0)
            state.counters["gradient_passes"] += 1
            grad = runner.param_grads(n_slots)

        try:
            theta, adam = adam_step(theta, grad, adam, blocks)

            # Weight update happens strictly after the parameter step.
            if state.scheme == "rba":
                state = balancing.rba_update(
                    state, {k: np.sqrt(v) for k, v in pointwise.items()})
            elif state.scheme == "sa":
                state = balancing.sa_update(
                    state, {k: np.sqrt(v) for k, v in pointwise.items()})
            elif state.scheme == "lra":
                state = balancing.lra_update(state, term_grads)
            elif state.scheme == "gradnorm":
                norms = {t.tag: float(np.linalg.norm(
                    term_grads[t.tag][problem.shared_slots]))
                    for t in problem.terms}
                state = balancing.gradnorm_update(
                    state, norms, dict(zip(state.term_tags, aggregates)))
            else:
                state = replace(state, step_count=state.step_count + 1)
        except (balancing.WeightDivergence, GradientBlowup) as exc:
            raise TrainingDiverged(epoch, str(exc)) from exc

        history.append(TrainRecord(
            epoch, aggregates, total, _weight_snapshot(state),
            time.perf_counter() - tic))

        if (cfg.checkpoint_path and cfg.checkpoint_every > 0
                and epoch % cfg.checkpoint_every == 0):
            save_checkpoint(cfg.checkpoint_path, case, spec, cfg,
                            Params(spec, theta, cfg.seed), adam, state,
                            rng, history, epoch)

    return TrainResult(Params(spec, theta, cfg.seed), history, state,
                       adam, rng)


def _training_outputs(problem: TrainingProblem) -> tuple[int, ...]:
    ids = [problem.total.i]
    for t in problem.terms:
        ids.extend((t.pointwise.i, t.aggregate.i))
    return tuple(ids)


def _weight_snapshot(state: WeightState) -> np.ndarray:
    if state.per_point:
        return np.array([state.point_weights[t].mean()
                         for t in state.term_tags])
    return state.term_weights.copy()


def detect_failure(result: TrainResult, rmse_report=None) -> str:
    """Status F on divergence or any reliable relative error above 90%."""
    if result.status == "F" or result.diverged_epoch is not None:
        return "F"
    if rmse_report is not None:
        for rel in rmse_report.relative.values():
            if rel is not None and rel > 0.9:
                return "F"
    return "OK"


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_checkpoint(path, case: CaseDefinition, spec: NetworkSpec,
                    cfg: TrainConfig, params: Params, adam: AdamState,
                    state: WeightState, rng: np.random.Generator,
                    history: Sequence[TrainRecord], epoch: int) -> None:
    tags = state.term_tags
    hist_agg = np.array([r.aggregates for r in history]).reshape(len(history),
                                                                 len(tags))
    meta = {
        "case": case.name,
        "header": spec_header(spec, params.seed),
        "scheme": state.scheme,
        "hyper": state.hyper,
        "tags": list(tags),
        "step_count": state.step_count,
        "counters": state.counters,
        "adam": {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1,
                 "beta2": adam.beta2, "eps": adam.eps},
        "rng_state": rng.bit_generator.state,
        "epoch": epoch,
        "cfg": {k: getattr(cfg, k) for k in (
            "epochs", "batch", "lr", "seed", "interior_count",
            "boundary_count", "initial_count", "checkpoint_every",
            "noise_scale")},
        "case_overrides": {k: getattr(case, k) for k in (
            "p_inlet", "p_wall", "u_outlet", "v_outlet")},
    }
    arrays = {
        "meta": np.bytes_(json.dumps(meta, sort_keys=True)),
        "theta": params.theta,
        "adam_m": adam.m,
        "adam_v": adam.v,
        "term_weights": state.term_weights,
        "initial_losses": (state.initial_losses
                           if state.initial_losses is not None
                           else np.array([])),
        "hist_epoch": np.array([r.epoch for r in history], dtype=np.int64),
        "hist_agg": hist_agg,
        "hist_total": np.array([r.total for r in history]),
        "hist_weights": np.array([r.weights for r in history]).reshape(
            len(history), len(tags)),
        "hist_seconds": np.array([r.seconds for r in history]),
    }
    if state.point_weights is not None:
        arrays["point_weights"] = np.stack([state.point_weights[t]
                                            for t in tags])
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        spec, seed = spec_from_header(meta["header"])
        tags = tuple(meta["tags"])
        pw = None
        if "point_weights" in data:
            stacked = data["point_weights"]
            pw = {t: stacked[k].copy() for k, t in enumerate(tags)}
        state = WeightState(
            meta["scheme"], tags, data["term_weights"].copy(), pw,
            dict(meta["hyper"]), meta["step_count"],
            data["initial_losses"].copy() if data["initial_losses"].size
            else None,
            dict(meta["counters"]))
        a = meta["adam"]
        adam = AdamState(data["adam_m"].copy(), data["adam_v"].copy(),
                         a["t"], a["lr"], a["beta1"], a["beta2"], a["eps"])
        history = [TrainRecord(int(e), data["hist_agg"][k].copy(),
                               float(data["hist_total"][k]),
                               data["hist_weights"][k].copy(),
                               float(data["hist_seconds"][k]))
                   for k, e in enumerate(data["hist_epoch"])]
        rng_state = meta["rng_state"]
        # JSON turns the uint64 pool back into plain ints; numpy accepts that.
        return {
            "case_name": meta["case"],
            "case_overrides": meta["case_overrides"],
            "spec": spec,
            "seed": seed,
            "cfg": meta["cfg"],
            "params": Params(spec, data["theta"].copy(), seed),
            "adam": adam,
            "weight_state": state,
            "rng_state": rng_state,
            "history": history,
            "epoch": int(meta["epoch"]),
        }


# ---------------------------------------------------------------------------
# CSV artifacts. The loss-history file intentionally excludes wall-clock
# timing so identical runs produce bitwise-identical files; timings go to
# their own file.
# ---------------------------------------------------------------------------

def write_history_csv(path, history: Sequence[TrainRecord],
                      tags: Sequence[str]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,total," + ",".join(tags) + "\n")
        for r in history:
            cells = [str(r.epoch), repr(float(r.total))]
            cells += [repr(float(v)) for v in r.aggregates]
            fh.write(",".join(cells) + "\n")


def write_weights_csv(path, history: Sequence[TrainRecord],
                      tags: Sequence[str]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,term,lambda\n")
        for r in history:
            for tag, w in zip(tags, r.weights):
                fh.write(f"{r.epoch},{tag},{repr(float(w))}\n")


def write_timing_csv(path, history: Sequence[TrainRecord]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,iter_seconds\n")
        for r in history:
            fh.write(f"{r.epoch},{repr(float(r.seconds))}\n")
