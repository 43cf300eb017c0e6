"""Reconstruction quality: MSE, dipole energies, peak distance, sparsity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatch, IndexOutOfRange, NoEnergy
from .model_io import DipoleGeometry


def _pair(B_true, B_est):
    B_true = np.asarray(B_true, dtype=np.float64)
    B_est = np.asarray(B_est, dtype=np.float64)
    if B_true.ndim != 2 or B_true.shape != B_est.shape:
        raise DimensionMismatch(f"shapes differ: {B_true.shape} vs {B_est.shape}")
    return B_true, B_est


def mse(B_true, B_est) -> float:
    """``||B_true - B_est||_F^2 / p`` (p = number of source rows)."""
    B_true, B_est = _pair(B_true, B_est)
    d = B_true - B_est
    return float(np.sum(d * d)) / B_true.shape[0]


def energy(B, geometry: DipoleGeometry, k: int) -> np.ndarray:
    """Per-dipole amplitude ``sqrt(bx^2 + by^2 + bz^2)`` at time index ``k``."""
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] != geometry.p:
        raise DimensionMismatch(f"B has shape {B.shape}, geometry implies {geometry.p} rows")
    if not 0 <= k < B.shape[1]:
        raise IndexOutOfRange(f"time index {k} outside 0..{B.shape[1] - 1}")
    comps = B[:, k].reshape(geometry.n_dipoles, 3)
    return np.sqrt(np.sum(comps * comps, axis=1))


def energy_table(B, geometry: DipoleGeometry) -> np.ndarray:
    """``n_dipoles x s`` matrix of energies at every time index."""
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] != geometry.p:
        raise DimensionMismatch(f"B has shape {B.shape}, geometry implies {geometry.p} rows")
    cube = B.reshape(geometry.n_dipoles, 3, B.shape[1])
    return np.sqrt(np.sum(cube * cube, axis=1))


def peak_dipole(B, geometry: DipoleGeometry, k: int) -> int:
    """Index of the most energetic dipole at ``k``; ties go to the lowest index."""
    e = energy(B, geometry, k)
    if not np.any(e > 0):
        raise NoEnergy(f"no dipole carries energy at time index {k}")
    return int(np.argmax(e))


def peak_distance(B_true, B_est, geometry: DipoleGeometry, k: int) -> float:
    """Distance between true and estimated peak dipoles at ``k``, divided by the dipole count."""
    B_true, B_est = _pair(B_true, B_est)
    i = peak_dipole(B_true, geometry, k)
    j = peak_dipole(B_est, geometry, k)
    dist = float(np.linalg.norm(geometry.coords[i] - geometry.coords[j]))
    return dist / geometry.n_dipoles


def sparsity_level(B, zero_tol: float = 0.0) -> float:
    """Fraction of entries with ``|b| <= zero_tol``."""
    if not zero_tol >= 0:
        raise ConfigError(f"zero_tol must be >= 0, got {zero_tol}")
    B = np.asarray(B, dtype=np.float64)
    if B.size == 0:
        raise DimensionMismatch("empty matrix")
    return float(np.count_nonzero(np.abs(B) <= zero_tol)) / B.size


@dataclass
class EvaluationReport:
    mse: float
    peak_distances: dict = field(default_factory=dict)  # time index -> d_k
    sparsity: float = 0.0
    runtime_s: float = 0.0

    def __post_init__(self):
        vals = [self.mse, self.sparsity, self.runtime_s, *self.peak_distances.values()]
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("evaluation fields must be finite")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ConfigError(f"sparsity must lie in [0, 1], got {self.sparsity}")
        if self.mse < 0 or self.runtime_s < 0:
            raise ConfigError("mse and runtime_s must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "peak_distances": {str(k): v for k, v in sorted(self.peak_distances.items())},
            "sparsity": self.sparsity,
            "runtime_s": self.runtime_s,
        }


def evaluate(B_true, B_est, geometry: DipoleGeometry, peak_indices, runtime_s: float = 0.0,
             zero_tol: float = 0.0) -> EvaluationReport:
    """All criteria for one estimate; ``peak_indices`` are the time indices for ``d_k``."""
    return EvaluationReport(
        mse=mse(B_true, B_est),
        peak_distances={int(k): peak_distance(B_true, B_est, geometry, int(k)) for k in peak_indices},
        sparsity=sparsity_level(B_est, zero_tol),
        runtime_s=float(runtime_s),
    )

