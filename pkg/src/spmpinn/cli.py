"""Command-line entry point: simulate, pretrain, estimate, sweep, compare.

Every command writes its artifacts and a ``manifest.json`` into ``--out``
and prints a short report between ``---`` delimiter lines. Exit codes: 0
success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .params import SIDES, DegradationScenario, ParameterError, apply_degradation, cell_capacity, load_default, load_parameter_set

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("spmpinn")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class InputError(Exception):
    pass


class NumericalFailure(Exception):
    pass


def _sha256(path: Path | None) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest() if path else ""


def write_manifest(out: Path, args, started: str, extra: dict | None = None) -> Path:
    doc = {
        "command": args.command,
        "tool_version": __version__,
        "seed": args.seed,
        "config_file": str(args.config) if args.config else None,
        "config_sha256": _sha256(args.config),
        "params_file": str(args.params) if args.params else "builtin:lg_m50",
        "params_sha256": _sha256(args.params),
        "argv": sys.argv[1:],
        "started": started,
        "finished": _now(),
    }
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _report(title: str, items: dict) -> None:
    print(f"--- {title} ---")
    for k, v in items.items():
        print(f"{k}: {v}")
    print("---")


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    try:
        return tomllib.loads(args.config.read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from exc


def _cell(args):
    return load_parameter_set(args.params) if args.params else load_default()


def _load_models(directory: Path):
    from .network import load_checkpoint

    models = [load_checkpoint(directory / f"pinn_{s}.json") for s in SIDES]
    for m, s in zip(models, SIDES):
        if m.side != s:
            raise InputError(f"checkpoint pinn_{s}.json holds the {m.side} electrode")
    return models


def cmd_simulate(args, cfg: dict, out: Path) -> dict:
    from .plotting import plot_voltage
    from .spm_solver import CurrentProfile, simulate_profile

    cell = _cell(args)
    scenario = DegradationScenario(args.eps_factor_pos, args.eps_factor_neg, args.d_factor_pos, args.d_factor_neg)
    sim_cell = apply_degradation(cell, scenario)
    current = args.c_rate * cell.one_c_current * {"charge": -1.0, "discharge": 1.0, "rest": 0.0}[args.mode]
    soc0 = args.soc0 if args.soc0 is not None else (1.0 if args.mode == "discharge" else 0.0)
    duration = args.duration
    if duration is None:
        if current == 0:
            raise InputError("--duration is required for a rest profile")
        duration = cell_capacity(cell) / abs(current)
    res = simulate_profile(sim_cell, CurrentProfile.constant(current, duration), soc0, dt=args.dt, n_r=args.n_r)
    res.to_csv(out / "voltage.csv")
    plot_voltage(res.times, {"solver": res.voltage}, out / "voltage.svg", title=f"{args.mode} {args.c_rate:g}C")
    if res.failed:
        raise NumericalFailure(res.message)
    return {
        "status": res.status,
        "samples": len(res.times),
        "end_time_s": float(res.times[-1]),
        "end_voltage_V": float(res.voltage[-1]),
        "csv": str(out / "voltage.csv"),
    }


def cmd_pretrain(args, cfg: dict, out: Path) -> dict:
    from .network import load_checkpoint, save_checkpoint
    from .plotting import plot_history, plot_voltage
    from .pretrain import TrainConfig, evaluate_against_solver, init_models, train, validation_profile, write_history

    cell = _cell(args)
    train_cfg = dict(cfg.get("train", {}))
    train_cfg["seed"] = args.seed
    if args.epochs is not None:
        train_cfg["epochs"] = args.epochs
    tc = TrainConfig.from_dict(train_cfg)
    if args.resume:
        models = [load_checkpoint(args.resume / f"pinn_{s}.json") for s in SIDES]
    else:
        models = list(init_models(cell, tc))
    (mp, mn), history = train(models[0], models[1], cell, tc, checkpoint_dir=out)
    for m in (mp, mn):
        save_checkpoint(m, out / f"pinn_{m.side}.json")
    write_history(history, out / "history.csv")
    plot_history(history, out / "history.svg")
    prof, soc0 = validation_profile(cell)
    ev = evaluate_against_solver(mp, mn, cell, prof, soc0)
    ref = ev["reference"]
    curves = {"solver": ref.voltage}
    if "voltage_pinn" in ev:
        curves["PINN"] = ev["voltage_pinn"]
    plot_voltage(ref.times, curves, out / "validation_voltage.svg", title="held-out 1C charge")
    return {
        "epochs": mp.metadata["epoch"],
        "conc_rmse_pos": ev["conc_rmse_pos"],
        "conc_rmse_neg": ev["conc_rmse_neg"],
        "voltage_rmse_V": ev["voltage_rmse"],
        "train_seconds": mp.metadata.get("train_seconds", 0.0) + mn.metadata.get("train_seconds", 0.0),
    }


def _estimation_config(cfg: dict, args):
    from .finetune import EstimationConfig

    d = dict(cfg.get("estimate", {}))
    if getattr(args, "max_iters", None) is not None:
        d["max_iters"] = args.max_iters
    return EstimationConfig.from_dict(d)


def cmd_estimate(args, cfg: dict, out: Path) -> dict:
    from .finetune import VoltageDataset, finetune, predicted_voltage, write_summary
    from .plotting import plot_trajectory, plot_voltage

    cell = _cell(args)
    models = _load_models(args.checkpoints)
    ds = VoltageDataset.read_csv(args.data)
    ec = _estimation_config(cfg, args)
    run = finetune(models, cell, ds, ec)
    run.write_trajectory(out / "trajectory.csv")
    summary = write_summary(run, cell, out / "summary.json")
    if run.trajectory:
        plot_trajectory(run.trajectory, run.names, out / "trajectory.svg")
        if run.status != "failed":
            with torch.no_grad():
                v = predicted_voltage(*run.models, cell, ds, soc0=ec.soc0).numpy()
            plot_voltage(ds.times, {"data": ds.voltages, "PINN": v}, out / "voltage_fit.svg")
    if run.status == "failed":
        raise NumericalFailure(run.message)
    report = {"status": run.status, "iterations": run.iterations}
    report.update({k: v for k, v in summary["recovered"].items()})
    report.update({f"LAM_{k}": v for k, v in summary.get("lam", {}).items()})
    return report


def cmd_sweep(args, cfg: dict, out: Path) -> dict:
    from .finetune import sweep_lam_grid

    cell = _cell(args)
    models = _load_models(args.checkpoints)
    sw = cfg.get("sweep", {})
    lam_pos = sw.get("lam_pos", [0.0, 0.1, 0.2])
    lam_neg = sw.get("lam_neg", [0.0, 0.1, 0.2])
    rows = sweep_lam_grid(models, cell, lam_pos, lam_neg, _estimation_config(cfg, args), out_dir=out)
    failed = [r for r in rows if r["status"] == "failed"]
    for r in failed:
        print(f"failed cell LAM=({r['lam_pos']}, {r['lam_neg']}): {r['message']}", file=sys.stderr)
    if rows and len(failed) == len(rows):
        raise NumericalFailure("every sweep cell failed")
    ae = [r["ae"] for r in rows if not math.isnan(r["ae"])]
    return {"cells": len(rows), "failed": len(failed), "max_ae": max(ae) if ae else math.nan, "csv": str(out / "sweep.csv")}


def cmd_compare(args, cfg: dict, out: Path) -> dict:
    from .baselines import ObjectiveSpec, compare_report, default_bounds, format_compare, nelder_mead, write_compare_csv
    from .finetune import finetune, synthetic_dataset

    cell = _cell(args)
    cc = cfg.get("compare", {})
    factors = {
        "eps_pos": cc.get("eps_factor_pos", 1.1),
        "eps_neg": cc.get("eps_factor_neg", 0.75),
        "D_pos": cc.get("d_factor_pos", 100.0),
        "D_neg": cc.get("d_factor_neg", 100.0),
    }
    free = tuple(cc.get("free_params", ["eps_pos", "eps_neg", "D_pos", "D_neg"]))
    scenario = DegradationScenario(factors["eps_pos"], factors["eps_neg"], factors["D_pos"], factors["D_neg"])
    initial = {p: getattr(cell.electrode(p.rsplit("_", 1)[1]), p.rsplit("_", 1)[0]) for p in free}
    target = {p: initial[p] * factors[p] for p in free}
    ds = synthetic_dataset(cell, scenario)
    runs = []
    if not cc.get("skip_nelder_mead", False):
        bounds = default_bounds(initial)
        bounds.update({k: tuple(v) for k, v in cc.get("bounds", {}).items()})
        spec = ObjectiveSpec(ds, cell, free, bounds)
        runs.append(nelder_mead(spec, initial, max_iters=cc.get("nm_max_iters", 400)))
    pinn = None
    if not cc.get("skip_pinn", False):
        ec = _estimation_config({"estimate": {"trainable": list(free), **cfg.get("estimate", {})}}, args)
        pinn = finetune(_load_models(args.checkpoints), cell, ds, ec)
        pinn.write_trajectory(out / "pinn_trajectory.csv")
    rows = compare_report(pinn, runs, initial, target)
    write_compare_csv(rows, out / "compare.csv")
    text = format_compare(rows)
    (out / "compare.txt").write_text(text + "\n")
    print(text)
    return {"rows": len(rows), "csv": str(out / "compare.csv")}


COMMANDS = {
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "estimate": cmd_estimate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="cap on torch worker threads")
    common.add_argument("--params", type=Path, help="parameter TOML (default: built-in LG M50 set)")
    common.add_argument("--config", type=Path, help="command config TOML")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spmpinn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run the reference solver")
    s.add_argument("--mode", choices=("charge", "discharge", "rest"), default="charge")
    s.add_argument("--c-rate", type=float, default=1.0)
    s.add_argument("--duration", type=float, help="seconds (default: full nominal (dis)charge)")
    s.add_argument("--soc0", type=float)
    s.add_argument("--dt", type=float, default=1.0)
    s.add_argument("--n-r", type=int, default=50)
    for name in ("eps-factor-pos", "eps-factor-neg", "d-factor-pos", "d-factor-neg"):
        s.add_argument(f"--{name}", type=float, default=1.0)

    s = sub.add_parser("pretrain", parents=[common], help="physics-only training of both electrode networks")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", type=Path, help="directory with pinn_pos.json / pinn_neg.json")

    s = sub.add_parser("estimate", parents=[common], help="fine-tune on a voltage CSV")
    s.add_argument("--checkpoints", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--max-iters", type=int)

    s = sub.add_parser("sweep", parents=[common], help="LAM grid of synthetic estimation runs")
    s.add_argument("--checkpoints", type=Path, required=True)
    s.add_argument("--max-iters", type=int)

    s = sub.add_parser("compare", parents=[common], help="PINN vs Nelder-Mead on a degradation scenario")
    s.add_argument("--checkpoints", type=Path, required=True)
    s.add_argument("--max-iters", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    torch.manual_seed(args.seed)
    np.random.seed(args.seed)
    started = _now()
    from .finetune import SchemaError
    from .network import CheckpointError
    from .pretrain import TrainingDiverged
    from .spm_solver import SaturationError, SingularExchangeCurrent

    try:
        cfg = _load_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        report = COMMANDS[args.command](args, cfg, args.out)
    except (InputError, ParameterError, SchemaError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalFailure, TrainingDiverged, SaturationError, SingularExchangeCurrent, FloatingPointError) as exc:
        if args.out.is_dir():
            write_manifest(args.out, args, started, {"status": "failed", "error": str(exc)})
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_manifest(args.out, args, started, {"status": "ok"})
    _report(args.command, report)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
