"""Transfer-learning parameter estimation from terminal-voltage data.

The pretrained networks keep their branch and trunk frozen. The dense head
and selected physical scalars (``eps``, ``D`` and optionally the
stoichiometric limits) are tuned on the sum of each electrode's frozen-weight
physics loss and a shared voltage-mismatch term.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .autodiff import DTYPE, Adam
from .network import PinnModel, forward, merged_features, set_phase2_mask
from .params import SIDES, CellParams, DegradationScenario, apply_degradation, cell_capacity
from .pretrain import (
    LOSS_COLUMNS,
    TERMS,
    NonFiniteResidual,
    initial_stoichiometry,
    make_sample,
    mean_current,
    reduce,
    residual_losses,
    sample_features,
)
from .spm_solver import CurrentProfile, SimulationResult, SingularExchangeCurrent, simulate_profile, terminal_voltage


class SchemaError(ValueError):
    pass


@dataclass
class VoltageDataset:
    times: np.ndarray
    currents: np.ndarray
    voltages: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.currents = np.asarray(self.currents, dtype=float)
        self.voltages = np.asarray(self.voltages, dtype=float)
        if not (self.times.shape == self.currents.shape == self.voltages.shape) or self.times.ndim != 1:
            raise ValueError("times, currents and voltages must be 1-D arrays of equal length")
        if self.times.size < 2:
            raise ValueError("need at least two samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not all(np.all(np.isfinite(a)) for a in (self.times, self.currents, self.voltages)):
            raise ValueError("dataset contains non-finite values")
        if self.times[0] != 0.0:
            raise ValueError("times must start at 0")

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def profile(self) -> CurrentProfile:
        return CurrentProfile(self.times, self.currents)

    def subsample(self, n: int) -> "VoltageDataset":
        """At most ``n`` samples, evenly spaced in index, keeping both ends."""
        if self.times.size <= n:
            return self
        idx = np.unique(np.round(np.linspace(0, self.times.size - 1, n)).astype(int))
        return VoltageDataset(self.times[idx], self.currents[idx], self.voltages[idx])

    @classmethod
    def from_simulation(cls, res: SimulationResult) -> "VoltageDataset":
        return cls(res.times, res.currents, res.voltage)

    @classmethod
    def read_csv(cls, path: str | Path) -> "VoltageDataset":
        """Read the solver's CSV export; only time, current and voltage are used."""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            cols = reader.fieldnames or []
            for need in ("time_s", "current_A", "voltage_V"):
                if need not in cols:
                    raise SchemaError(f"{path}: missing column {need!r}")
            rows = list(reader)
        try:
            data = {c: np.array([float(r[c]) for r in rows]) for c in ("time_s", "current_A", "voltage_V")}
        except ValueError as exc:
            raise SchemaError(f"{path}: {exc}") from exc
        return cls(data["time_s"], data["current_A"], data["voltage_V"])


# Learning rates act on the stored coordinate: log for eps and D, linear for
# the stoichiometric limits. A log-space rate r moves eps by about r*eps.
DEFAULT_LR = {"eps": 1e-3, "D": 2e-2, "theta_0": 1e-4, "theta_100": 1e-4}


@dataclass
class EstimationConfig:
    trainable: tuple[str, ...] = ("eps_pos", "eps_neg")
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    head_lr: float = 1e-4
    max_iters: int = 2000
    stop_threshold: float = 1e-7
    early_stop: bool = True
    lambda_v: float = 1.0
    v_scale: float = 1e-2
    v_norm: str = "abs"
    norm: str | None = None  # None: the norm recorded at pretraining
    counts: tuple[int, int, int] = (512, 64, 64)
    max_points: int = 512
    soc0: float = 0.0

    def __post_init__(self):
        self.trainable = tuple(self.trainable)
        self.counts = tuple(self.counts)
        self.lr = {**DEFAULT_LR, **self.lr}
        if any(v <= 0 for v in self.lr.values()) or self.head_lr < 0:
            raise ValueError("learning rates must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.lambda_v <= 0 or self.v_scale <= 0:
            raise ValueError("lambda_v and v_scale must be positive")
        if self.v_norm not in ("sq", "abs") or self.norm not in ("sq", "abs", None):
            raise ValueError("norms must be 'sq' or 'abs'")

    @classmethod
    def from_dict(cls, d: dict) -> "EstimationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown estimation config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EstimationRun:
    names: tuple[str, ...]
    initial: dict[str, float]
    learning_rates: dict[str, float]
    max_iters: int
    stop_threshold: float
    trajectory: list[dict] = field(default_factory=list)
    status: str = "pending"  # converged | capped | failed
    message: str = ""
    wall_time: float = 0.0
    models: tuple[PinnModel, PinnModel] | None = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.trajectory)

    @property
    def final(self) -> dict[str, float]:
        if not self.trajectory:
            return dict(self.initial)
        return {n: self.trajectory[-1][n] for n in self.names}

    def summary(self, cell_initial: CellParams | None = None) -> dict:
        out = {
            "status": self.status,
            "message": self.message,
            "iterations": self.iterations,
            "wall_time_s": self.wall_time,
            "initial": self.initial,
            "recovered": self.final,
        }
        if cell_initial is not None:
            out["lam"] = lam_report(self, cell_initial)
        return out

    def write_trajectory(self, path: str | Path) -> None:
        if not self.trajectory:
            cols = ["iteration", *self.names]
        else:
            cols = list(self.trajectory[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.trajectory:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _surface_inputs(model: PinnModel, ds: VoltageDataset) -> dict:
    profile = ds.profile()
    return {
        "enc": profile.current_at(np.linspace(0.0, profile.duration, model.arch.m)) / model.i_norm,
        "t": ds.times,
        "r": np.ones_like(ds.times),
        "i_t": ds.currents,
        "t_scale": model.time_scale(mean_current(profile)),
    }


def surface_features(model: PinnModel, ds: VoltageDataset) -> torch.Tensor:
    """Cached branch-trunk product at the dataset's surface points."""
    x = _surface_inputs(model, ds)
    return merged_features(model, x["t"], x["r"], x, jets=False)


def _surface(model: PinnModel, cell: CellParams, ds: VoltageDataset, values, soc0: float, feats=None):
    phys = model.physical(values)
    c0 = initial_stoichiometry(cell.electrode(model.side), soc0, phys)
    x = _surface_inputs(model, ds)
    return forward(model, x["enc"], x["t"], x["r"], x["i_t"], x["t_scale"], c0, values=values, feats=feats), phys


def predicted_voltage(
    model_pos, model_neg, cell, ds, values_pos=None, values_neg=None, soc0: float = 0.0, feats=(None, None)
) -> torch.Tensor:
    """Terminal voltage from both networks' surface outputs at the dataset's currents."""
    c_p, phys_p = _surface(model_pos, cell, ds, values_pos, soc0, feats[0])
    c_n, phys_n = _surface(model_neg, cell, ds, values_neg, soc0, feats[1])
    I = torch.as_tensor(ds.currents, dtype=DTYPE)
    return terminal_voltage(c_p, c_n, I, cell, eps_pos=phys_p.get("eps"), eps_neg=phys_n.get("eps"))


def voltage_loss(
    model_pos: PinnModel,
    model_neg: PinnModel,
    cell: CellParams,
    ds: VoltageDataset,
    values_pos=None,
    values_neg=None,
    soc0: float = 0.0,
    norm: str = "abs",
    v_scale: float = 1.0,
    feats=(None, None),
) -> torch.Tensor:
    """Mean voltage mismatch, residuals divided by ``v_scale`` (V) before the norm."""
    v = predicted_voltage(model_pos, model_neg, cell, ds, values_pos, values_neg, soc0, feats)
    return reduce((v - torch.as_tensor(ds.voltages, dtype=DTYPE)) / v_scale, norm)


def prepare_models(models: Sequence[PinnModel], cell: CellParams, trainable: Sequence[str]) -> tuple[PinnModel, PinnModel]:
    by_side = {m.side: m for m in models}
    if set(by_side) != set(SIDES):
        raise ValueError("need one positive and one negative model")
    return tuple(set_phase2_mask(by_side[s], trainable, cell.electrode(s)) for s in SIDES)


def _frozen_weights(model: PinnModel) -> dict[str, float]:
    w = model.metadata.get("weights")
    if not w:
        raise ValueError(f"{model.side} checkpoint carries no loss weights; was it pretrained?")
    return {t: float(w[f"lambda_{t}"]) for t in TERMS}


def _lr_vector(model: PinnModel, cfg: EstimationConfig) -> torch.Tensor:
    lr = torch.zeros(len(model.params), dtype=DTYPE)
    for name, seg in model.params.segments.items():
        if name.startswith("phys."):
            rate = cfg.lr[name[len("phys.") :].rsplit("_", 1)[0]]
        else:
            rate = cfg.head_lr
        lr[seg.start : seg.stop] = rate
    return lr


def _stored(model: PinnModel) -> torch.Tensor:
    return torch.cat([model.params.view(f"phys.{n}").reshape(1) for n in model.physical_names()] or [torch.zeros(0, dtype=DTYPE)])


def physics_totals(models, cell: CellParams, samples, weights, norm: str = "abs", values=None, feats=None) -> dict[str, torch.Tensor]:
    """Frozen-weight physics loss per electrode."""
    out = {}
    for k, (m, smp, w) in enumerate(zip(models, samples, weights)):
        v = None if values is None else values[m.side]
        f = None if feats is None else feats[k]
        terms = residual_losses(m, smp, cell.electrode(m.side), cell, values=v, norm=norm, feats=f)
        out[m.side] = (sum(w[t] * terms[t] for t in TERMS), terms)
    return out


def finetune(models: Sequence[PinnModel], cell: CellParams, ds: VoltageDataset, cfg: EstimationConfig) -> EstimationRun:
    """Tune heads and physical scalars of both electrodes on ``ds``.

    ``models`` are Phase-1 checkpoints; the frozen structure is applied here.
    The returned run carries the tuned models in ``run.models``.
    """
    mp, mn = prepare_models(models, cell, cfg.trainable)
    pair = (mp, mn)
    names = tuple(n for m in pair for n in m.physical_names())
    initial = {f"{k}_{m.side}": float(v) for m in pair for k, v in m.physical().items()}
    run = EstimationRun(
        names=names,
        initial=initial,
        learning_rates={n: cfg.lr[n.rsplit("_", 1)[0]] for n in names},
        max_iters=cfg.max_iters,
        stop_threshold=cfg.stop_threshold,
    )
    data = ds.subsample(cfg.max_points)
    weights = [_frozen_weights(m) for m in pair]
    norm = cfg.norm or mp.metadata.get("config", {}).get("norm", "abs")
    samples = [make_sample(m, [(data.profile(), cfg.soc0)], cfg.counts) for m in pair]
    # branch and trunk are frozen, so their outputs at the fixed points are computed once
    feats = [sample_features(m, smp) for m, smp in zip(pair, samples)]
    v_feats = tuple(surface_features(m, data) for m in pair)
    opts = [Adam(len(m.params), _lr_vector(m, cfg)) for m in pair]
    t0 = time.perf_counter()
    run.status = "capped"
    for it in range(cfg.max_iters):
        vals = {m.side: m.params.values.detach().clone().requires_grad_(True) for m in pair}
        try:
            phys = physics_totals(pair, cell, samples, weights, norm, values=vals, feats=feats)
            lv = voltage_loss(mp, mn, cell, data, vals["pos"], vals["neg"], cfg.soc0, cfg.v_norm, cfg.v_scale, v_feats)
            total = phys["pos"][0] + phys["neg"][0] + cfg.lambda_v * lv
            if not torch.isfinite(total):
                raise FloatingPointError("non-finite fine-tuning loss")
            grads = torch.autograd.grad(total, [vals["pos"], vals["neg"]])
        except (SingularExchangeCurrent, FloatingPointError, NonFiniteResidual) as exc:
            run.status, run.message = "failed", str(exc)
            break
        before = torch.cat([_stored(m) for m in pair])
        for m, opt, g in zip(pair, opts, grads):
            opt.step(m.params, torch.where(m.params.mask(), g, torch.zeros_like(g)))
        change = float((torch.cat([_stored(m) for m in pair]) - before).abs().sum())
        row = {"iteration": it + 1}
        row.update({f"{k}_{m.side}": float(v) for m in pair for k, v in m.physical().items()})
        row["L_V"] = float(lv.detach())
        for m in pair:
            for t in TERMS:
                row[f"{LOSS_COLUMNS[t]}_{m.side}"] = float(phys[m.side][1][t].detach())
            row[f"physics_{m.side}"] = float(phys[m.side][0].detach())
        row["total"] = float(total.detach())
        row["param_change"] = change
        run.trajectory.append(row)
        if cfg.early_stop and change < cfg.stop_threshold:
            run.status = "converged"
            break
    run.wall_time = time.perf_counter() - t0
    run.models = pair
    return run


def lam_report(run: EstimationRun, cell_initial: CellParams) -> dict[str, float]:
    """Loss of active material per electrode from the recovered volume fractions."""
    out = {}
    final = run.final
    for side in SIDES:
        key = f"eps_{side}"
        if key in final:
            out[side] = 1.0 - final[key] / cell_initial.electrode(side).eps
    return out


def synthetic_dataset(cell: CellParams, scenario: DegradationScenario, c_rate: float = 1.0, soc0: float = 0.0) -> VoltageDataset:
    """Voltage from the reference solver for a degraded cell, stopped at the cutoffs.

    Charges from SOC 0 (or discharges from SOC 1) at ``c_rate``.
    """
    degraded = apply_degradation(cell, scenario)
    current = (-1.0 if soc0 < 0.5 else 1.0) * c_rate * cell.one_c_current
    profile = CurrentProfile.constant(current, cell_capacity(cell) / abs(current))
    res = simulate_profile(degraded, profile, soc0, v_cutoffs=(cell.v_min, cell.v_max))
    if res.failed:
        raise RuntimeError(f"synthetic data generation failed: {res.message}")
    return VoltageDataset.from_simulation(res)


SWEEP_COLUMNS = (
    "lam_pos", "lam_neg", "eps_pos_true", "eps_neg_true", "eps_pos_hat", "eps_neg_hat",
    "lam_pos_hat", "lam_neg_hat", "ae", "status", "iterations", "physics_start", "physics_end", "message",
)


def sweep_lam_grid(
    models: Sequence[PinnModel],
    cell: CellParams,
    lam_pos: Sequence[float],
    lam_neg: Sequence[float],
    cfg: EstimationConfig,
    out_dir: str | Path | None = None,
    runs: list | None = None,
) -> list[dict]:
    """Fine-tune on solver data for every (LAM_pos, LAM_neg) pair.

    Each cell starts from the pristine checkpoints. Failures are recorded
    and the sweep continues. Completed runs are appended to ``runs`` if given.
    """
    rows = []
    for lp in lam_pos:
        for ln in lam_neg:
            true = {"pos": cell.pos.eps * (1 - lp), "neg": cell.neg.eps * (1 - ln)}
            row = {"lam_pos": lp, "lam_neg": ln, "eps_pos_true": true["pos"], "eps_neg_true": true["neg"]}
            try:
                ds = synthetic_dataset(cell, DegradationScenario(1 - lp, 1 - ln))
                run = finetune(models, cell, ds, cfg)
            except (RuntimeError, ValueError) as exc:
                row.update(status="failed", message=str(exc), ae=math.nan, iterations=0)
                rows.append(row)
                continue
            if runs is not None:
                runs.append(run)
            fin = run.final
            hat = {s: fin.get(f"eps_{s}", math.nan) for s in SIDES}
            lam = lam_report(run, cell)
            traj = run.trajectory
            row.update(
                eps_pos_hat=hat["pos"],
                eps_neg_hat=hat["neg"],
                lam_pos_hat=lam.get("pos", math.nan),
                lam_neg_hat=lam.get("neg", math.nan),
                ae=math.hypot(true["pos"] - hat["pos"], true["neg"] - hat["neg"]),
                status=run.status,
                iterations=run.iterations,
                physics_start=(traj[0]["physics_pos"] + traj[0]["physics_neg"]) if traj else math.nan,
                physics_end=(traj[-1]["physics_pos"] + traj[-1]["physics_neg"]) if traj else math.nan,
                message=run.message,
            )
            rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        write_sweep_csv(rows, out / "sweep.csv")
        from .plotting import plot_lam_heatmap

        plot_lam_heatmap(rows, out / "sweep_heatmap.svg")
    return rows


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def write_summary(run: EstimationRun, cell_initial: CellParams, path: str | Path) -> dict:
    summary = run.summary(cell_initial)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
