"""Collocation points and synthetic training profiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import CellParams, cell_capacity
from .spm_solver import CurrentProfile


def radical_inverse(k: np.ndarray, base: int = 2) -> np.ndarray:
    """Van der Corput radical inverse of non-negative integers."""
    k = np.asarray(k, dtype=np.int64).copy()
    out = np.zeros(k.shape, dtype=float)
    scale = 1.0 / base
    while np.any(k > 0):
        out += (k % base) * scale
        k //= base
        scale /= base
    return out


def hammersley_2d(n: int) -> np.ndarray:
    """``n`` Hammersley points in [0,1)^2: ``(k/n, radical_inverse_2(k))``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    k = np.arange(n)
    return np.column_stack([k / n, radical_inverse(k, 2)])


def box_discrepancy(points: np.ndarray, n_boxes: int = 4096, seed: int = 0) -> float:
    """Monte-Carlo estimate of the star discrepancy over anchored boxes."""
    rng = np.random.default_rng(seed)
    corners = rng.random((n_boxes, 2))
    inside = (points[None, :, 0] < corners[:, None, 0]) & (points[None, :, 1] < corners[:, None, 1])
    frac = inside.mean(axis=1)
    return float(np.max(np.abs(frac - corners.prod(axis=1))))


@dataclass
class CollocationBatch:
    """Points as ``(t [s], r [-], i_t [A])`` columns for each subset."""

    pde_pts: np.ndarray
    bc_centre_pts: np.ndarray
    bc_surface_pts: np.ndarray

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.pde_pts), len(self.bc_centre_pts), len(self.bc_surface_pts)


def build_batch(profile: CurrentProfile, horizon: float, counts: tuple[int, int, int]) -> CollocationBatch:
    n_pde, n_bcc, n_bcs = counts
    if min(counts) < 1:
        raise ValueError("all point counts must be >= 1")
    h = hammersley_2d(n_pde)
    t_pde = h[:, 0] * horizon
    pde = np.column_stack([t_pde, h[:, 1], profile.current_at(t_pde)])

    def boundary(n, r):
        t = np.arange(n) / n * horizon
        return np.column_stack([t, np.full(n, r), profile.current_at(t)])

    return CollocationBatch(pde, boundary(n_bcc, 0.0), boundary(n_bcs, 1.0))


def full_cc_duration(cell: CellParams, current: float) -> float:
    """Time (s) to move the cell capacity at constant ``|current|``."""
    return cell_capacity(cell) / abs(current)


def random_cc_profile(seed: int | np.random.Generator, c_rate_range: tuple[float, float], cell: CellParams) -> tuple[CurrentProfile, float]:
    """Full constant-current charge or discharge at a random C-rate.

    Charge (negative current) starts at SOC 0 and discharge at SOC 1.
    """
    low, high = c_rate_range
    if not 0 < low <= high:
        raise ValueError("need 0 < low <= high")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    c_rate = float(rng.uniform(low, high))
    charge = bool(rng.random() < 0.5)
    current = (-1.0 if charge else 1.0) * c_rate * cell.one_c_current
    profile = CurrentProfile.constant(current, full_cc_duration(cell, current))
    return profile, (0.0 if charge else 1.0)
