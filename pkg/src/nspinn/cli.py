"""Configuration parsing and command dispatch.

Config is a flat key=value format with section prefixes (case., net.,
scheme., train., ...); precedence is flags > file > defaults. Every run
writes a manifest of its complete effective configuration, and a manifest
is itself a valid config file, so runs replay exactly.

Commands: train, eval, export, sweep. The process exits nonzero exactly
when training diverged (non-finite loss) or an error fired; a failure
grade that comes from high test error is a recorded result, not a program
failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import balancing, evaluation, nets, sampling, trainer
from .balancing import make_state
from .nets import NetworkSpec
from .sampling import get_case
from .trainer import TrainConfig, TrainingDiverged

ENV_OUT_ROOT = "NSPINN_OUT"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 2


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in str(text).replace(" ", "").split(","))


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(p for p in str(text).replace(" ", "").split(",") if p)


# key -> (parser, default). Defaults follow the training protocol: Adam lr
# 0.001, batch 128, spline grid 5 / order 3 / noise 0.1, decay and rate
# 0.5, SA rate 0.001, EMA factor 0.5.
SCHEMA: dict = {
    "case.name": (str, "cavity"),
    "case.p_inlet": (float, 0.0),
    "case.p_wall": (float, 0.0),
    "case.u_outlet": (float, 0.0),
    "case.v_outlet": (float, 0.0),
    "net.family": (str, "tanh-mlp"),
    "net.layers": (_int_list, (3, 20, 20, 3)),
    "net.grid_size": (int, 5),
    "net.spline_order": (int, 3),
    "net.noise_scale": (float, 0.1),
    "scheme.name": (str, "fixed"),
    "scheme.gamma": (float, 0.5),
    "scheme.eta_star": (float, 0.5),
    "scheme.alpha_sa": (float, 0.001),
    "scheme.alpha_ema": (float, 0.5),
    "scheme.alpha_asym": (float, 1.5),
    "scheme.gradnorm_lr": (float, 0.025),
    "scheme.lra_ceiling": (float, 1e4),
    "scheme.w_phy": (float, 0.1),
    "scheme.w_bc": (float, 2.0),
    "scheme.w_ic": (float, 2.0),
    "train.epochs": (int, 5000),
    "train.batch": (int, 128),
    "train.lr": (float, 0.001),
    "train.seed": (int, 0),
    "train.interior_count": (int, 20000),
    "train.boundary_count": (int, 2000),
    "train.initial_count": (int, 2000),
    "train.checkpoint_every": (int, 1000),
    "train.outdir": (str, "run"),
    "train.reference": (str, ""),
    "train.checkpoint": (str, ""),
    "export.time": (float, 0.0),
    "export.resolution": (int, 50),
    "sweep.cases": (_str_list, ("cavity", "poiseuille", "bfs-slip",
                                "bfs-no-slip")),
    "sweep.families": (_str_list, ("tanh-mlp", "kan")),
    "sweep.schemes": (_str_list, ("fixed", "rba", "lra", "sa", "gradnorm")),
    "sweep.reference_dir": (str, ""),
    # family-matched desk-scale architectures (563 vs 550 parameters)
    "sweep.tanh_layers": (_int_list, (3, 20, 20, 3)),
    "sweep.kan_layers": (_int_list, (3, 5, 5, 3)),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def manifest_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(str(c) for c in v)
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"


def _parse_value(key: str, raw) -> object:
    parser, _ = SCHEMA[key]
    try:
        return parser(raw)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"invalid config: {key}={raw!r} ({exc})") from exc


def _validate(values: dict) -> None:
    checks = [
        ("train.batch", lambda v: v >= 1),
        ("train.epochs", lambda v: v >= 0),
        ("train.lr", lambda v: v > 0),
        ("net.grid_size", lambda v: v >= 1),
        ("net.spline_order", lambda v: v >= 0),
        ("export.resolution", lambda v: v >= 1),
    ]
    for key, ok in checks:
        if not ok(values[key]):
            raise ValueError(f"invalid config: {key}={values[key]}")
    if values["case.name"] not in sampling.CASES:
        raise ValueError(f"invalid config: case.name={values['case.name']}")
    if values["net.family"] not in nets.FAMILIES:
        raise ValueError(f"invalid config: net.family={values['net.family']}")
    if values["scheme.name"] not in balancing.SCHEMES:
        raise ValueError(f"invalid config: scheme.name={values['scheme.name']}")


def parse_config(path=None, overrides=()) -> RunConfig:
    """Merge defaults, an optional key=value file, then overrides."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    merged = []
    if path:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    merged.append(line)
    merged.extend(overrides)
    for item in merged:
        if "=" not in item:
            raise ValueError(f"invalid config line: {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ValueError(f"unknown option '{key}'")
        values[key] = _parse_value(key, raw.strip())
    _validate(values)
    return RunConfig(values)


def build_pieces(cfg: RunConfig):
    """Case, network spec, weight state, and train config from one config."""
    case = get_case(cfg["case.name"],
                    p_inlet=cfg["case.p_inlet"], p_wall=cfg["case.p_wall"],
                    u_outlet=cfg["case.u_outlet"],
                    v_outlet=cfg["case.v_outlet"])
    spec = NetworkSpec(cfg["net.layers"], cfg["net.family"],
                       cfg["net.grid_size"], cfg["net.spline_order"])
    from .physics import TERM_ORDER
    tags = TERM_ORDER[case.name]
    hyper = {
        "gamma": cfg["scheme.gamma"], "eta_star": cfg["scheme.eta_star"],
        "alpha_sa": cfg["scheme.alpha_sa"],
        "alpha_ema": cfg["scheme.alpha_ema"],
        "alpha_asym": cfg["scheme.alpha_asym"],
        "gradnorm_lr": cfg["scheme.gradnorm_lr"],
        "lra_ceiling": cfg["scheme.lra_ceiling"],
    }
    weights = balancing.heuristic_constants(
        tags, cfg["scheme.w_phy"], cfg["scheme.w_bc"], cfg["scheme.w_ic"])
    state = make_state(cfg["scheme.name"], tags, cfg["train.batch"],
                       weights=weights, **hyper)
    tc = TrainConfig(
        epochs=cfg["train.epochs"], batch=cfg["train.batch"],
        lr=cfg["train.lr"], seed=cfg["train.seed"],
        interior_count=cfg["train.interior_count"],
        boundary_count=cfg["train.boundary_count"],
        initial_count=cfg["train.initial_count"],
        checkpoint_every=cfg["train.checkpoint_every"],
        noise_scale=cfg["net.noise_scale"])
    return case, spec, state, tc


def resolve_outdir(cfg: RunConfig) -> Path:
    root = os.environ.get(ENV_OUT_ROOT, "")
    out = Path(root) / cfg["train.outdir"] if root else Path(cfg["train.outdir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(cfg: RunConfig) -> int:
    out = resolve_outdir(cfg)
    (out / "manifest.cfg").write_text(cfg.manifest_text())
    case, spec, state, tc = build_pieces(cfg)
    tc.checkpoint_path = str(out / "checkpoint.npz")
    status = "OK"
    try:
        resume = cfg["train.checkpoint"] or None
        result = trainer.train(case, spec, state, tc, resume=resume)
    except TrainingDiverged as exc:
        (out / "report.txt").write_text(f"status=F\n{exc}\n")
        print(f"F: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    tags = result.tags
    trainer.write_history_csv(out / "loss_history.csv", result.history, tags)
    trainer.write_weights_csv(out / "weights.csv", result.history, tags)
    trainer.write_timing_csv(out / "timing.csv", result.history)
    trainer.save_checkpoint(tc.checkpoint_path, case, spec, tc,
                            result.params, result.adam, result.state,
                            result.rng, result.history,
                            result.history[-1].epoch if result.history else 0)
    report = [f"status={status}"]
    if result.history:
        report.append(f"final_total={result.history[-1].total!r}")
    if cfg["train.reference"]:
        ref = evaluation.load_reference(cfg["train.reference"])
        rep = evaluation.evaluate_network(spec, result.params, case, ref)
        status = trainer.detect_failure(result, rep)
        report[0] = f"status={status}"
        (out / "rmse_report.txt").write_text(rep.lines())
        report.append("rmse_report=rmse_report.txt")
    (out / "report.txt").write_text("\n".join(report) + "\n")
    print(f"{status}: trained {cfg['case.name']} for "
          f"{len(result.history)} epochs -> {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    out = resolve_outdir(cfg)
    ckpt = cfg["train.checkpoint"]
    if not ckpt or not Path(ckpt).exists():
        print("error: checkpoint not found", file=sys.stderr)
        return EXIT_ERROR
    if not cfg["train.reference"] or not Path(cfg["train.reference"]).exists():
        print("error: reference not found", file=sys.stderr)
        return EXIT_ERROR
    ck = trainer.load_checkpoint(ckpt)
    case = get_case(ck["case_name"], **ck["case_overrides"])
    ref = evaluation.load_reference(cfg["train.reference"])
    rep = evaluation.evaluate_network(ck["spec"], ck["params"], case, ref)
    (out / "rmse_report.txt").write_text(rep.lines())
    print(rep.lines(), end="")
    return EXIT_OK


def cmd_export(cfg: RunConfig) -> int:
    out = resolve_outdir(cfg)
    ckpt = cfg["train.checkpoint"]
    if not ckpt or not Path(ckpt).exists():
        print("error: checkpoint not found", file=sys.stderr)
        return EXIT_ERROR
    ck = trainer.load_checkpoint(ckpt)
    case = get_case(ck["case_name"], **ck["case_overrides"])
    ref = (evaluation.load_reference(cfg["train.reference"])
           if cfg["train.reference"] else None)
    n = evaluation.export_field_grid(
        ck["spec"], ck["params"], case, cfg["export.time"],
        cfg["export.resolution"], out / "field_grid.csv", ref)
    print(f"wrote {n} rows -> {out / 'field_grid.csv'}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    """Grid over (scheme x family x case); one row per cell and field."""
    out = resolve_outdir(cfg)
    (out / "manifest.cfg").write_text(cfg.manifest_text())
    rows = []
    results: dict = {}
    for scheme in cfg["sweep.schemes"]:
        for family in cfg["sweep.families"]:
            for case_name in cfg["sweep.cases"]:
                cell = dict(cfg.values)
                cell["scheme.name"] = scheme
                cell["net.family"] = family
                cell["net.layers"] = (cfg["sweep.kan_layers"]
                                      if family == "kan"
                                      else cfg["sweep.tanh_layers"])
                cell["case.name"] = case_name
                cell["train.outdir"] = str(
                    Path(cfg["train.outdir"]) / f"{scheme}_{family}_{case_name}")
                ref_dir = cfg["sweep.reference_dir"]
                ref_path = Path(ref_dir) / f"{case_name}.csv" if ref_dir else None
                cell_cfg = RunConfig(cell)
                case, spec, state, tc = build_pieces(cell_cfg)
                status, final_loss, rep = "OK", None, None
                try:
                    result = trainer.train(case, spec, state, tc)
                    final_loss = result.history[-1].total if result.history else None
                    if ref_path and ref_path.exists():
                        ref = evaluation.load_reference(ref_path)
                        rep = evaluation.evaluate_network(
                            spec, result.params, case, ref)
                        status = trainer.detect_failure(result, rep)
                except (TrainingDiverged, balancing.WeightDivergence):
                    status = "F"
                results[(scheme, family, case_name)] = (status, final_loss, rep)
    for scheme in cfg["sweep.schemes"]:
        for family in cfg["sweep.families"]:
            for case_name in cfg["sweep.cases"]:
                status, final_loss, rep = results[(scheme, family, case_name)]
                base = results.get((scheme, "tanh-mlp", case_name))
                for f in evaluation.FIELDS:
                    rm = rep.rmse[f] if rep else None
                    delta = None
                    if (family != "tanh-mlp" and base and base[2] and rep
                            and base[2].rmse[f]):
                        delta = evaluation.delta_improvement(
                            base[2].rmse[f], rep.rmse[f])
                    rows.append([scheme, family, case_name, f,
                                 "" if rm is None else repr(rm),
                                 "" if final_loss is None else repr(final_loss),
                                 "" if delta is None else f"{delta:.2f}",
                                 status])
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "family", "case", "field", "rmse",
                    "final_loss", "delta_pct", "status"])
        w.writerows(rows)
    print(f"sweep: {len(results)} cells -> {out / 'sweep.csv'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export,
            "sweep": cmd_sweep}


def dispatch(command: str, cfg: RunConfig) -> int:
    if command not in COMMANDS:
        raise ValueError(f"unknown command '{command}'")
    return COMMANDS[command](cfg)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nspinn",
        description="Mesh-free Navier-Stokes network training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="override one config key")
        for key in SCHEMA:
            p.add_argument(f"--{key}", dest=f"opt::{key}", default=None)
    args = parser.parse_args(argv)
    overrides = list(args.set)
    for key in SCHEMA:
        v = getattr(args, f"opt::{key}")
        if v is not None:
            overrides.append(f"{key}={v}")
    try:
        cfg = parse_config(args.config, overrides)
        return dispatch(args.command, cfg)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
