"""Open-circuit potential curves.

Every curve accepts a Python float, a numpy array or a torch tensor and returns
the same kind, so one definition serves the reference solver and the
differentiable voltage reconstruction used during fine-tuning.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
from scipy.interpolate import PchipInterpolator

STOICH_CLAMP = 1e-6


def _ns(x):
    """Return the elementwise-function namespace matching ``x``."""
    if isinstance(x, torch.Tensor):
        return torch
    return np


def _clamp(x):
    if isinstance(x, torch.Tensor):
        return x.clamp(STOICH_CLAMP, 1.0 - STOICH_CLAMP)
    if isinstance(x, float):
        return min(max(x, STOICH_CLAMP), 1.0 - STOICH_CLAMP)
    return np.clip(x, STOICH_CLAMP, 1.0 - STOICH_CLAMP)


def _nmc811_chen2020(x):
    ns = _ns(x)
    return (
        -0.8090 * x
        + 4.4875
        - 0.0428 * ns.tanh(18.5138 * (x - 0.5542))
        - 17.7326 * ns.tanh(15.7890 * (x - 0.3117))
        + 17.5842 * ns.tanh(15.9308 * (x - 0.3120))
    )


def _graphite_siox_chen2020(x):
    ns = _ns(x)
    return (
        1.9793 * ns.exp(-39.3631 * x)
        + 0.2482
        - 0.0909 * ns.tanh(29.8538 * (x - 0.1234))
        - 0.04478 * ns.tanh(14.9159 * (x - 0.2769))
        - 0.0205 * ns.tanh(30.4444 * (x - 0.6103))
    )


def _zero(x):
    return 0.0 * x


BUILTIN_CURVES: dict[str, Callable] = {
    "nmc811_chen2020": _nmc811_chen2020,
    "graphite_siox_chen2020": _graphite_siox_chen2020,
    "zero": _zero,
}


class OCPCurve:
    """Callable potential curve U(stoichiometry) in volts.

    Build one with :meth:`builtin` or :meth:`table`. Stoichiometry is clamped
    to ``[1e-6, 1 - 1e-6]`` before evaluation.
    """

    def __init__(self, label: str, fn: Callable):
        self.label = label
        self._fn = fn

    @classmethod
    def builtin(cls, name: str) -> "OCPCurve":
        try:
            fn = BUILTIN_CURVES[name]
        except KeyError:
            known = ", ".join(sorted(BUILTIN_CURVES))
            raise ValueError(f"unknown built-in OCP {name!r} (known: {known})") from None
        return cls(f"builtin:{name}", fn)

    @classmethod
    def table(cls, stoichiometry: Sequence[float], potential: Sequence[float]) -> "OCPCurve":
        """Monotone piecewise-cubic (PCHIP) interpolant through tabulated points."""
        x = np.asarray(stoichiometry, dtype=float)
        u = np.asarray(potential, dtype=float)
        if x.ndim != 1 or x.shape != u.shape or x.size < 2:
            raise ValueError("OCP table needs matching 1-D stoichiometry/potential lists (>= 2 points)")
        if np.any(np.diff(x) <= 0):
            raise ValueError("OCP table stoichiometry must be strictly increasing")
        pchip = PchipInterpolator(x, u, extrapolate=True)
        breaks = pchip.x
        coeffs = pchip.c  # shape (4, n_intervals), highest power first
        breaks_t = torch.as_tensor(breaks, dtype=torch.float64)
        coeffs_t = torch.as_tensor(coeffs, dtype=torch.float64)

        def fn(s):
            if isinstance(s, torch.Tensor):
                idx = torch.searchsorted(breaks_t, s.detach(), right=True) - 1
                idx = idx.clamp(0, coeffs_t.shape[1] - 1)
                h = s - breaks_t[idx]
                c = coeffs_t[:, idx]
                return ((c[0] * h + c[1]) * h + c[2]) * h + c[3]
            out = pchip(s)
            return float(out) if np.ndim(out) == 0 else out

        return cls(f"table:{x.size}pts", fn)

    def __call__(self, stoich):
        return self._fn(_clamp(stoich))

    def __repr__(self) -> str:
        return f"OCPCurve({self.label})"


def ocp_from_section(section: dict) -> OCPCurve:
    kind = section.get("kind")
    if kind == "builtin":
        if "name" not in section:
            raise ValueError("builtin OCP section needs a 'name'")
        return OCPCurve.builtin(section["name"])
    if kind == "table":
        for key in ("stoichiometry", "potential"):
            if key not in section:
                raise ValueError(f"table OCP section needs '{key}'")
        return OCPCurve.table(section["stoichiometry"], section["potential"])
    raise ValueError(f"OCP kind must be 'builtin' or 'table', got {kind!r}")


__all__ = ["OCPCurve", "ocp_from_section", "BUILTIN_CURVES", "STOICH_CLAMP"]
