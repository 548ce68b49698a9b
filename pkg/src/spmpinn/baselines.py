"""Classical estimation baseline: Nelder-Mead on solver voltage RMSE."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .finetune import EstimationRun, VoltageDataset
from .params import CellParams, ParameterError
from .spm_solver import simulate_profile

FREE_PARAMS = ("eps_pos", "eps_neg", "D_pos", "D_neg")
PENALTY = 1e3


class BoundsError(ValueError):
    pass


@dataclass
class ObjectiveSpec:
    dataset: VoltageDataset
    base: CellParams
    free_params: tuple[str, ...]
    bounds: dict[str, tuple[float, float]]
    soc0: float = 0.0
    dt: float = 1.0
    n_r: int = 50

    def __post_init__(self):
        self.free_params = tuple(self.free_params)
        bad = [p for p in self.free_params if p not in FREE_PARAMS]
        if bad:
            raise ValueError(f"unsupported free parameter(s) {bad}; choose from {FREE_PARAMS}")
        for p in self.free_params:
            lo, hi = self.bounds[p]
            if not (0 < lo < hi and math.isfinite(hi)):
                raise ValueError(f"bounds for {p} must be finite, positive and increasing")


def default_bounds(initial: dict[str, float]) -> dict[str, tuple[float, float]]:
    """Search box around the initial values: eps in [x/2, min(2x, 1)], D in [x/10, 1000x]."""
    return {
        p: (v * 0.5, min(v * 2.0, 1.0)) if p.startswith("eps") else (v * 1e-1, v * 1e3)
        for p, v in initial.items()
    }


def substitute(base: CellParams, values: dict[str, float]) -> CellParams:
    cell = base
    for name, v in values.items():
        attr, side = name.rsplit("_", 1)
        cell = cell.with_electrode(side, dataclasses.replace(cell.electrode(side), **{attr: v}))
    return cell


def objective(x: Sequence[float], spec: ObjectiveSpec) -> float:
    """Voltage RMSE (V) of the solver with ``x`` substituted; ``PENALTY`` on solver failure."""
    values = dict(zip(spec.free_params, map(float, x)))
    for name, v in values.items():
        lo, hi = spec.bounds[name]
        if not lo <= v <= hi:
            raise BoundsError(f"{name}={v:.6g} outside [{lo:.6g}, {hi:.6g}]")
    try:
        cell = substitute(spec.base, values)
    except ParameterError:
        return PENALTY
    ds = spec.dataset
    res = simulate_profile(cell, ds.profile(), spec.soc0, dt=spec.dt, n_r=spec.n_r, v_cutoffs=(-math.inf, math.inf))
    if res.failed:
        return PENALTY
    v = np.interp(ds.times, res.times, res.voltage)
    if res.times[-1] < ds.times[-1]:
        return PENALTY
    rmse = float(np.sqrt(np.mean((v - ds.voltages) ** 2)))
    return rmse if math.isfinite(rmse) else PENALTY


@dataclass
class ClassicalRun:
    method: str
    names: tuple[str, ...]
    x: dict[str, float]
    rmse: float
    iterations: int
    evaluations: int
    wall_time: float
    status: str  # converged | capped
    x0: dict[str, float] = field(default_factory=dict)


def _is_log(name: str) -> bool:
    return name.startswith("D_")


def simplex_search(fun, u0, lo, hi, max_iters: int = 400, xatol: float = 1e-4, fatol: float = 1e-7):
    """Nelder-Mead on ``fun`` with the box ``[lo, hi]`` enforced by clipping.

    Uses the standard coefficients (1, 2, 0.5, 0.5). Returns
    ``(u_best, f_best, iterations, evaluations, converged)``; the result is
    never worse than ``u0``.
    """
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    cache: dict[tuple, float] = {}

    def f(u):
        key = tuple(np.clip(u, lo, hi))
        if key not in cache:
            val = float(fun(np.array(key)))
            cache[key] = val if math.isfinite(val) else PENALTY
        return cache[key]

    u0 = np.clip(np.asarray(u0, dtype=float), lo, hi)
    f0 = f(u0)
    res = minimize(
        f,
        u0,
        method="Nelder-Mead",
        options={"maxiter": max_iters, "xatol": xatol, "fatol": fatol, "adaptive": False},
    )
    u_best, f_best = (np.clip(res.x, lo, hi), float(res.fun)) if res.fun <= f0 else (u0, f0)
    return u_best, f_best, int(res.nit), int(res.nfev), bool(res.success)


def nelder_mead(
    spec: ObjectiveSpec,
    x0: dict[str, float],
    max_iters: int = 400,
    xatol: float = 1e-4,
    fatol: float = 1e-7,
) -> ClassicalRun:
    """Nelder-Mead on the solver objective in search coordinates (log for D, linear for eps)."""
    names = spec.free_params
    for n in names:
        lo, hi = spec.bounds[n]
        if not lo <= x0[n] <= hi:
            raise BoundsError(f"start {n}={x0[n]:.6g} outside [{lo:.6g}, {hi:.6g}]")
    to_u = lambda n, v: math.log(v) if _is_log(n) else v
    from_u = lambda n, u: math.exp(u) if _is_log(n) else u
    lo_u = np.array([to_u(n, spec.bounds[n][0]) for n in names])
    hi_u = np.array([to_u(n, spec.bounds[n][1]) for n in names])

    def to_x(u):
        # exp(log(hi)) can overshoot hi by an ulp
        return [min(max(from_u(n, ui), spec.bounds[n][0]), spec.bounds[n][1]) for n, ui in zip(names, u)]

    u0 = np.array([to_u(n, x0[n]) for n in names])
    t0 = time.perf_counter()
    u_best, f_best, nit, nfev, ok = simplex_search(lambda u: objective(to_x(u), spec), u0, lo_u, hi_u, max_iters, xatol, fatol)
    return ClassicalRun(
        method="Nelder-Mead",
        names=names,
        x=dict(zip(names, to_x(u_best))),
        rmse=f_best,
        iterations=nit,
        evaluations=nfev,
        wall_time=time.perf_counter() - t0,
        status="converged" if ok else "capped",
        x0=dict(x0),
    )


COMPARE_COLUMNS = ("method", "parameter", "initial", "target", "estimated", "relative_error_pct", "wall_time_s")


def compare_report(
    pinn_run: EstimationRun | None,
    classical_runs: Sequence[ClassicalRun],
    initial: dict[str, float],
    target: dict[str, float],
) -> list[dict]:
    """Rows in the layout: method, parameter, initial, target, estimate, relative error, time."""
    runs = []
    if pinn_run is not None:
        runs.append(("PINN", pinn_run.final, pinn_run.wall_time))
    runs += [(r.method, r.x, r.wall_time) for r in classical_runs]
    rows = []
    for method, est, wall in runs:
        for p in target:
            if p not in est:
                continue
            rows.append(
                {
                    "method": method,
                    "parameter": p,
                    "initial": initial.get(p, math.nan),
                    "target": target[p],
                    "estimated": est[p],
                    "relative_error_pct": 100.0 * abs(est[p] - target[p]) / abs(target[p]),
                    "wall_time_s": wall,
                }
            )
    return rows


def write_compare_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def format_compare(rows: list[dict]) -> str:
    """Plain-text table: one line per method with value and error per parameter."""
    params = list(dict.fromkeys(r["parameter"] for r in rows))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    head = ["Method"] + [f"{p} | err %" for p in params] + ["time s"]
    lines = []
    if rows:
        first = {r["parameter"]: r for r in rows}
        lines.append(["Initial"] + [f"{first[p]['initial']:.4g}" for p in params] + [""])
        lines.append(["Target"] + [f"{first[p]['target']:.4g}" for p in params] + [""])
    for m in methods:
        sub = {r["parameter"]: r for r in rows if r["method"] == m}
        cells = [f"{sub[p]['estimated']:.4g} | {sub[p]['relative_error_pct']:.2f}" if p in sub else "-" for p in params]
        wall = next(iter(sub.values()))["wall_time_s"]
        lines.append([m] + cells + [f"{wall:.1f}"])
    widths = [max(len(str(x)) for x in col) for col in zip(head, *lines)]
    fmt = lambda row: "  ".join(str(c).ljust(w) for c, w in zip(row, widths))
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in lines])
