"""Second-difference roughness penalty and its eigendecomposition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidLength
from .model_io import as_matrix

EIGEN_CLAMP = 1e-12


@dataclass(frozen=True, eq=False)
class PenaltyOperator:
    """Symmetric PSD ``omega = P diag(lam) P^T`` with ``lam`` sorted descending.

    Built once per problem and shared; the temporal update only ever needs
    ``P`` and ``lam``.
    """

    omega: np.ndarray
    P: np.ndarray
    lam: np.ndarray

    @property
    def s(self) -> int:
        return self.omega.shape[0]

    @classmethod
    def from_matrix(cls, omega) -> "PenaltyOperator":
        omega = as_matrix(omega, "omega")
        if omega.shape[0] != omega.shape[1]:
            raise DimensionMismatch(f"penalty matrix must be square, got {omega.shape}")
        omega = 0.5 * (omega + omega.T)
        lam, P = np.linalg.eigh(omega)
        lam, P = lam[::-1].copy(), P[:, ::-1].copy()
        lam[lam < EIGEN_CLAMP] = 0.0
        for arr in (omega, P, lam):
            arr.setflags(write=False)
        return cls(omega=omega, P=P, lam=lam)


def second_difference_matrix(s: int) -> np.ndarray:
    """The (s-2) x s stencil matrix with rows ``(1, -2, 1)``."""
    if s < 3:
        raise InvalidLength(f"second-difference penalty needs s >= 3, got {s}")
    D = np.zeros((s - 2, s))
    idx = np.arange(s - 2)
    D[idx, idx] = 1.0
    D[idx, idx + 1] = -2.0
    D[idx, idx + 2] = 1.0
    return D


def second_diff_penalty(s: int) -> PenaltyOperator:
    """``omega = D^T D`` so that ``g^T omega g = sum_l (g[l-1] - 2 g[l] + g[l+1])^2``."""
    D = second_difference_matrix(s)
    return PenaltyOperator.from_matrix(D.T @ D)


def quad_form(op: PenaltyOperator, G) -> float:
    """``tr(G^T omega G)``, the summed roughness of the columns of ``G``."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim == 1:
        G = G[:, None]
    if G.shape[0] != op.s:
        raise DimensionMismatch(f"G has {G.shape[0]} rows, penalty expects {op.s}")
    return float(np.sum(G * (op.omega @ G)))
