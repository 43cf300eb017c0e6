"""Minimum-norm raw estimate of the source matrix.

With ``X = U diag(d) V^T`` (thin SVD, ``V`` is p x n) the least-squares problem
``min ||Y - X B||_F`` decouples into ``c_i = (U^T Y)_i / d_i``; the solution with
smallest Frobenius norm is ``B_hat = V C``.  Singular values at or below
``rank_tol * d[0]`` are treated as zero and their rows of ``C`` are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConvergenceFailure, DegenerateOperator, DimensionMismatch
from .model_io import as_matrix

DEFAULT_RANK_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ThinSvd:
    U: np.ndarray  # n x n
    d: np.ndarray  # n, descending
    V: np.ndarray  # p x n

    def effective_rank(self, rank_tol: float = DEFAULT_RANK_TOL) -> int:
        if self.d.size == 0 or self.d[0] <= 0:
            return 0
        return int(np.count_nonzero(self.d > rank_tol * self.d[0]))


@dataclass(frozen=True, eq=False)
class RawEstimate:
    B_hat: np.ndarray
    effective_rank: int
    rank_tol: float


def thin_svd(X) -> ThinSvd:
    """Thin SVD of a wide (n <= p) forward operator."""
    X = as_matrix(X, "X")
    n, p = X.shape
    if n > p:
        raise DimensionMismatch(f"X must be wide (n <= p), got {n}x{p}")
    try:
        U, d, Vt = np.linalg.svd(X, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"SVD of X failed: {exc}") from exc
    return ThinSvd(U=U, d=d, V=Vt.T.copy())


def _check_tol(rank_tol):
    if not 0.0 <= rank_tol < 1.0:
        raise ConfigError(f"rank_tol must lie in [0, 1), got {rank_tol}")


def raw_estimate(X, Y, rank_tol: float = DEFAULT_RANK_TOL, svd: ThinSvd | None = None) -> RawEstimate:
    """Minimum-norm least-squares solution ``B_hat`` of ``Y = X B``.

    Parameters
    ----------
    X : (n, p) array_like
    Y : (n, s) array_like
    rank_tol : float
        Relative singular-value cutoff; components with ``d_i <= rank_tol * d_1``
        contribute nothing.
    svd : ThinSvd, optional
        Precomputed factorization of ``X`` (reused across calls sharing ``X``).
    """
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    _check_tol(rank_tol)
    if svd is None:
        svd = thin_svd(X)
    rank = svd.effective_rank(rank_tol)
    if rank == 0:
        raise DegenerateOperator("all singular values of X are below the truncation threshold")

    Y_tilde = svd.U[:, :rank].T @ Y
    C = Y_tilde / svd.d[:rank, None]
    B_hat = svd.V[:, :rank] @ C
    return RawEstimate(B_hat=B_hat, effective_rank=rank, rank_tol=rank_tol)


def raw_estimate_ridge(X, Y, lam: float, rank_tol: float = DEFAULT_RANK_TOL,
                       svd: ThinSvd | None = None) -> RawEstimate:
    """Ridge-regularized minimum-norm estimate ``X^T (X X^T + lam I)^{-1} Y``.

    Computed through the SVD as ``V diag(d / (d^2 + lam)) U^T Y``.  ``lam = 0``
    gives exactly :func:`raw_estimate`.
    """
    if lam < 0:
        raise ConfigError(f"ridge parameter must be nonnegative, got {lam}")
    if lam == 0:
        return raw_estimate(X, Y, rank_tol=rank_tol, svd=svd)
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    _check_tol(rank_tol)
    if svd is None:
        svd = thin_svd(X)
    rank = svd.effective_rank(rank_tol)
    if rank == 0:
        raise DegenerateOperator("all singular values of X are below the truncation threshold")
    d = svd.d[:rank]
    C = (svd.U[:, :rank].T @ Y) * (d / (d * d + lam))[:, None]
    return RawEstimate(B_hat=svd.V[:, :rank] @ C, effective_rank=rank, rank_tol=rank_tol)
