"""Finite-volume reference solver for the single particle model.

Each electrode particle is split into ``n_r`` equal-width spherical shells.
Shell averages are advanced with backward Euler; the discrete operator is
conservative, so the particle's lithium inventory changes only through the
surface flux.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.linalg import solve_banded

from .params import SIDES, CellParams, ElectrodeParams, soc_to_initial_stoichiometry

CSV_HEADER = ("time_s", "current_A", "voltage_V", "c_surf_pos", "c_surf_neg")


class SaturationError(RuntimeError):
    """A stoichiometry left [0, 1]."""

    def __init__(self, side: str, t: float, value: float):
        super().__init__(f"{side} electrode saturated at t={t:.6g} s (stoichiometry {value:.6g})")
        self.side = side
        self.t = t


class SingularExchangeCurrent(RuntimeError):
    """Surface stoichiometry reached 0 or 1, where the exchange current vanishes."""


@dataclass
class ConcentrationField:
    grid: np.ndarray
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.shape != self.values.shape:
            raise ValueError("grid and values must have the same shape")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")

    @classmethod
    def uniform(cls, n_r: int, value: float, t: float = 0.0) -> "ConcentrationField":
        return cls(shell_centres(n_r), np.full(n_r, float(value)), t)

    @property
    def n_r(self) -> int:
        return self.grid.size

    def mean(self) -> float:
        """Volume-averaged stoichiometry."""
        return float(3.0 * shell_volumes(self.n_r) @ self.values)


@dataclass
class CurrentProfile:
    """Applied current, positive on discharge."""

    times: np.ndarray
    currents: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.currents = np.asarray(self.currents, dtype=float)
        if self.times.shape != self.currents.shape or self.times.ndim != 1:
            raise ValueError("times and currents must be 1-D arrays of equal length")
        if self.times.size < 2:
            raise ValueError("a profile needs at least two samples")
        if self.times[0] != 0.0:
            raise ValueError("profile times must start at 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("profile times must be strictly increasing")

    @classmethod
    def constant(cls, current: float, duration: float) -> "CurrentProfile":
        return cls(np.array([0.0, duration]), np.array([current, current]))

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def current_at(self, t):
        return np.interp(t, self.times, self.currents)

    def slope_at(self, t):
        """Piecewise-constant dI/dt of the linear interpolant."""
        slopes = np.diff(self.currents) / np.diff(self.times)
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, slopes.size - 1)
        return slopes[idx]


@dataclass
class SimulationResult:
    times: np.ndarray
    currents: np.ndarray
    voltage: np.ndarray
    surf_pos: np.ndarray
    surf_neg: np.ndarray
    mean_pos: np.ndarray
    mean_neg: np.ndarray
    fields_pos: list[ConcentrationField] | None = None
    fields_neg: list[ConcentrationField] | None = None
    status: str = "ok"  # ok | cutoff | failed
    message: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.status == "failed"

    def surface(self, side: str) -> np.ndarray:
        return self.surf_pos if side == "pos" else self.surf_neg

    def fields(self, side: str) -> list[ConcentrationField] | None:
        return self.fields_pos if side == "pos" else self.fields_neg

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, self.times, self.currents, self.voltage, self.surf_pos, self.surf_neg)


def shell_faces(n_r: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_r + 1)


def shell_centres(n_r: int) -> np.ndarray:
    return (np.arange(n_r) + 0.5) / n_r


def shell_volumes(n_r: int) -> np.ndarray:
    """Dimensionless shell volumes ``(r_out^3 - r_in^3)/3``; they sum to 1/3."""
    f = shell_faces(n_r)
    return (f[1:] ** 3 - f[:-1] ** 3) / 3.0


def _as_array_ns(x):
    return torch if isinstance(x, torch.Tensor) else np


def flux_from_current(I, e: ElectrodeParams, cell: CellParams, side: str, eps=None):
    """Molar flux out of the particle surface (mol/m^2/s) for cell current ``I``.

    ``eps`` overrides ``e.eps`` (it may be a tensor during fine-tuning).
    """
    eps = e.eps if eps is None else eps
    a = 3.0 * eps / e.R_p
    denom = a * e.delta * cell.F * cell.A
    if side == "pos":
        return -I / denom
    if side == "neg":
        return I / denom
    raise ValueError(f"side must be 'pos' or 'neg', got {side!r}")


def _check_open_interval(c_surf, side: str = "") -> None:
    if isinstance(c_surf, torch.Tensor):
        bad = bool(((c_surf <= 0) | (c_surf >= 1)).any())
    else:
        arr = np.asarray(c_surf)
        bad = bool(np.any((arr <= 0) | (arr >= 1)))
    if bad:
        label = f"{side} " if side else ""
        raise SingularExchangeCurrent(f"{label}surface stoichiometry outside (0,1): exchange current is singular")


def exchange_current(c_surf, e: ElectrodeParams, cell: CellParams):
    ns = _as_array_ns(c_surf)
    # dimensional surface concentration enters the kinetics
    return e.k * cell.F * math.sqrt(cell.c_e) * e.c_max * ns.sqrt(c_surf * (1.0 - c_surf))


def overpotential(j, c_surf, e: ElectrodeParams, cell: CellParams, side: str = ""):
    """Symmetric Butler-Volmer overpotential (V)."""
    _check_open_interval(c_surf, side)
    i0 = exchange_current(c_surf, e, cell)
    x = j * cell.F / (2.0 * i0)
    if isinstance(x, torch.Tensor):
        return (2.0 * cell.R_gas * cell.T / cell.F) * torch.asinh(x)
    return (2.0 * cell.R_gas * cell.T / cell.F) * np.arcsinh(x)


def terminal_voltage(c_surf_pos, c_surf_neg, I, cell: CellParams, eps_pos=None, eps_neg=None, pos=None, neg=None):
    """Cell voltage from surface stoichiometries and current.

    ``eps_*`` override the volume fractions and ``pos``/``neg`` the electrode
    records, which lets fine-tuning pass trainable tensors.
    """
    pos = cell.pos if pos is None else pos
    neg = cell.neg if neg is None else neg
    j_p = flux_from_current(I, pos, cell, "pos", eps=eps_pos)
    j_n = flux_from_current(I, neg, cell, "neg", eps=eps_neg)
    eta_p = overpotential(j_p, c_surf_pos, pos, cell, "pos")
    eta_n = overpotential(j_n, c_surf_neg, neg, cell, "neg")
    return cell.ocp_pos(c_surf_pos) - cell.ocp_neg(c_surf_neg) + eta_p - eta_n


class SphericalDiffusion:
    """Backward-Euler finite-volume operator for one particle.

    Solves ``dc/dt = (D/R^2) r^-2 d/dr (r^2 dc/dr)`` on shells with zero flux at
    the centre and ``D dc/dr = -(R/c_max) j`` at the surface.
    """

    def __init__(self, e: ElectrodeParams, dt: float, n_r: int):
        if dt <= 0:
            raise ValueError("dt must be > 0")
        if n_r < 2:
            raise ValueError("need at least two shells")
        self.e = e
        self.dt = dt
        self.n_r = n_r
        self.dr = 1.0 / n_r
        self.volumes = shell_volumes(n_r)
        faces = shell_faces(n_r)
        kappa = e.D / e.R_p**2
        # conductance between neighbouring shells through interior faces
        g = kappa * faces[1:-1] ** 2 / self.dr
        diag = self.volumes / dt
        diag[:-1] += g
        diag[1:] += g
        self._ab = np.zeros((3, n_r))
        self._ab[0, 1:] = -g
        self._ab[1] = diag
        self._ab[2, :-1] = -g
        # surface source per unit flux j (outer face area is 1)
        self._surface_coeff = -1.0 / (e.R_p * e.c_max)

    def surface_gradient(self, j: float) -> float:
        """Prescribed dc/dr at r = 1."""
        return -self.e.R_p * j / (self.e.D * self.e.c_max)

    def step(self, c: np.ndarray, j: float) -> np.ndarray:
        rhs = self.volumes / self.dt * c
        rhs[-1] += self._surface_coeff * j
        return solve_banded((1, 1), self._ab, rhs, check_finite=False)

    def surface(self, c: np.ndarray, j: float) -> float:
        """Second-order surface value from the outer shell and the boundary gradient."""
        return float(c[-1] + 0.5 * self.dr * self.surface_gradient(j))

    def inventory(self, c: np.ndarray) -> float:
        return float(self.volumes @ c)


def step_diffusion(fld: ConcentrationField, j: float, dt: float, e: ElectrodeParams, side: str = "electrode") -> ConcentrationField:
    op = SphericalDiffusion(e, dt, fld.n_r)
    values = op.step(fld.values, j)
    t = fld.t + dt
    _check_range(values, side, t)
    return ConcentrationField(fld.grid, values, t)


def _check_range(values: np.ndarray, side: str, t: float) -> None:
    lo, hi = values.min(), values.max()
    if lo < 0.0:
        raise SaturationError(side, t, lo)
    if hi > 1.0:
        raise SaturationError(side, t, hi)


def simulate_profile(
    cell: CellParams,
    profile: CurrentProfile,
    soc0: float,
    dt: float = 1.0,
    n_r: int = 50,
    v_cutoffs: tuple[float, float] | None = None,
    store_fields: bool = False,
) -> SimulationResult:
    """Run both electrodes in lockstep over ``profile``.

    Stops at the profile end or when the voltage leaves ``v_cutoffs`` (the
    crossing time is linearly interpolated inside the last step). Numerical
    failures return the partial result with ``status == "failed"``.
    """
    if n_r < 10:
        raise ValueError("n_r must be >= 10")
    v_lo, v_hi = (cell.v_min, cell.v_max) if v_cutoffs is None else v_cutoffs
    ops = {s: SphericalDiffusion(cell.electrode(s), dt, n_r) for s in SIDES}
    part_ops: dict[float, dict[str, SphericalDiffusion]] = {}
    c = {s: np.full(n_r, soc_to_initial_stoichiometry(soc0, cell.electrode(s), s)) for s in SIDES}
    grid = shell_centres(n_r)

    t_end = profile.duration
    times, currents, volts = [], [], []
    surf = {s: [] for s in SIDES}
    means = {s: [] for s in SIDES}
    flds = {s: [] for s in SIDES} if store_fields else None

    def record(t, I, cs, V):
        times.append(t)
        currents.append(I)
        volts.append(V)
        for s in SIDES:
            surf[s].append(cs[s])
            means[s].append(3.0 * ops[s].inventory(c[s]))
            if flds is not None:
                flds[s].append(ConcentrationField(grid, c[s].copy(), t))

    def surfaces(I):
        out = {}
        for s in SIDES:
            j = flux_from_current(I, cell.electrode(s), cell, s)
            out[s] = ops[s].surface(c[s], j)
        return out

    status, message = "ok", ""
    t = 0.0
    try:
        I = float(profile.current_at(0.0))
        cs = surfaces(I)
        V = float(terminal_voltage(cs["pos"], cs["neg"], I, cell))
        record(t, I, cs, V)
        while t < t_end - 1e-9:
            h = min(dt, t_end - t)
            if h < dt:
                if h not in part_ops:
                    part_ops[h] = {s: SphericalDiffusion(cell.electrode(s), h, n_r) for s in SIDES}
                step_ops = part_ops[h]
            else:
                step_ops = ops
            t_new = t + h
            I_new = float(profile.current_at(t_new))
            c_old = {s: c[s].copy() for s in SIDES}
            for s in SIDES:
                j = flux_from_current(I_new, cell.electrode(s), cell, s)
                c[s] = step_ops[s].step(c[s], j)
                _check_range(c[s], s, t_new)
            cs_new = surfaces(I_new)
            for s in SIDES:
                if not 0.0 <= cs_new[s] <= 1.0:
                    raise SaturationError(s, t_new, cs_new[s])
            V_new = float(terminal_voltage(cs_new["pos"], cs_new["neg"], I_new, cell))
            crossed = None
            if V_new >= v_hi > V:
                crossed = v_hi
            elif V_new <= v_lo < V:
                crossed = v_lo
            if crossed is not None:
                w = (crossed - V) / (V_new - V)
                t_star = t + w * h
                I_star = float(profile.current_at(t_star))
                cs_star = {s: cs[s] + w * (cs_new[s] - cs[s]) for s in SIDES}
                for s in SIDES:
                    c[s] = c_old[s] + w * (c[s] - c_old[s])
                record(t_star, I_star, cs_star, crossed)
                status, message = "cutoff", f"voltage cutoff {crossed} V reached at t={t_star:.6g} s"
                break
            t, I, cs, V = t_new, I_new, cs_new, V_new
            record(t, I, cs, V)
    except (SaturationError, SingularExchangeCurrent) as exc:
        status, message = "failed", str(exc)

    return SimulationResult(
        times=np.asarray(times),
        currents=np.asarray(currents),
        voltage=np.asarray(volts),
        surf_pos=np.asarray(surf["pos"]),
        surf_neg=np.asarray(surf["neg"]),
        mean_pos=np.asarray(means["pos"]),
        mean_neg=np.asarray(means["neg"]),
        fields_pos=flds["pos"] if flds else None,
        fields_neg=flds["neg"] if flds else None,
        status=status,
        message=message,
    )


def write_csv(path, times, currents, voltage, surf_pos, surf_neg) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in zip(times, currents, voltage, surf_pos, surf_neg):
            w.writerow([repr(float(v)) for v in row])
