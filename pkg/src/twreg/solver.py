"""Two-way regularized decomposition ``B_hat ~ A G^T``.

Minimizes::

    ||B_hat - A G^T||_F^2 + mu1 * sum|A| + mu2 * tr(G^T omega G)

by alternating a sparse (soft-threshold) update of the spatial coefficients
``A`` with a ridge update of the temporal factors ``G`` and a QR
re-orthonormalization of ``G``.  Both updates extract rank-one terms
sequentially, each against the residual of the terms before it.

``towr_solve`` (``mu1 = 0``) and ``sowr_solve`` (``mu2 = 0``) are the one-way
variants with closed-form half steps.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    NonFinite,
    RankDeficient,
    SingularUpdate,
    ZeroColumn,
)
from .model_io import as_matrix
from .penalty import PenaltyOperator

RANK_TOL = 1e-12
# spatial columns below this fraction of ||B_hat||_F are numerically zero
ZERO_TOL = 1e-12


@dataclass(frozen=True)
class SolverOptions:
    mu1: float = 0.0
    mu2: float = 0.0
    q: int | None = None  # None -> full rank (q = s)
    max_iter: int = 15
    rel_tol: float = 1e-6

    def __post_init__(self):
        if not (self.mu1 >= 0 and math.isfinite(self.mu1)):
            raise ConfigError(f"mu1 must be finite and >= 0, got {self.mu1}")
        if not (self.mu2 >= 0 and math.isfinite(self.mu2)):
            raise ConfigError(f"mu2 must be finite and >= 0, got {self.mu2}")
        if self.q is not None and self.q < 1:
            raise ConfigError(f"q must be >= 1, got {self.q}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.rel_tol > 0:
            raise ConfigError(f"rel_tol must be > 0, got {self.rel_tol}")

    def rank_for(self, s: int) -> int:
        q = s if self.q is None else self.q
        if q > s:
            raise ConfigError(f"q = {q} exceeds the number of time points s = {s}")
        return q

    def with_(self, **changes) -> "SolverOptions":
        return replace(self, **changes)


@dataclass(eq=False)
class DecompositionState:
    A: np.ndarray
    G: np.ndarray
    iterations_run: int = 0
    converged: bool = False
    objective_trace: list = field(default_factory=list)
    sparsity_trace: list = field(default_factory=list)
    change_trace: list = field(default_factory=list)
    orthogonality_trace: list = field(default_factory=list)

    @property
    def B_tilde(self) -> np.ndarray:
        return self.A @ self.G.T

    def diagnostics(self) -> dict:
        return {
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "objective_trace": [float(v) for v in self.objective_trace],
            "sparsity_trace": [float(v) for v in self.sparsity_trace],
            "change_trace": [float(v) for v in self.change_trace],
        }


def soft_threshold(r, lam):
    """``sign(r) * max(|r| - lam, 0)``; works elementwise on arrays."""
    if np.any(np.asarray(lam) < 0):
        raise ConfigError("threshold must be nonnegative")
    out = np.sign(r) * np.maximum(np.abs(r) - lam, 0.0)
    if np.ndim(out) == 0:
        return float(out)
    return out


def _check_pair(B_hat, other, axis_b, axis_o, what):
    if B_hat.shape[axis_b] != other.shape[axis_o]:
        raise DimensionMismatch(
            f"{what}: B_hat has shape {B_hat.shape}, factor has shape {other.shape}"
        )


def update_A(B_hat, G, mu1: float, *, strict: bool = True) -> np.ndarray:
    """Sequential rank-one soft-threshold update of ``A`` for fixed ``G``.

    Column ``j`` is fit to ``B_res = B_hat - sum_{l<j} a_l g_l^T``::

        r = B_res g_j / ||g_j||^2,    a_j = soft(r, mu1 / (2 ||g_j||^2))

    ``B_res g_j`` is accumulated as ``B_hat g_j - A[:, :j] (G[:, :j]^T g_j)``.
    A zero column of ``G`` raises :class:`ZeroColumn`, or yields a zero column of
    ``A`` when ``strict`` is false.
    """
    B_hat = np.asarray(B_hat, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    _check_pair(B_hat, G, 1, 0, "update_A")
    if mu1 < 0:
        raise ConfigError(f"mu1 must be >= 0, got {mu1}")
    p, q = B_hat.shape[0], G.shape[1]
    BG = B_hat @ G
    GtG = G.T @ G
    A = np.zeros((p, q))
    for j in range(q):
        gg = GtG[j, j]
        if gg == 0.0:
            if strict:
                raise ZeroColumn(f"column {j} of G is zero")
            continue
        r = BG[:, j] - A[:, :j] @ GtG[:j, j] if j else BG[:, j]
        A[:, j] = soft_threshold(r / gg, mu1 / (2.0 * gg))
    return A


def update_G(B_hat, A, penalty: PenaltyOperator, mu2: float, *, strict: bool = True,
             zero_tol: float = 0.0) -> np.ndarray:
    """Sequential ridge update of ``G`` for fixed ``A`` (not orthonormalized).

    ``g_j = P diag(1 / (||a_j||^2 + mu2 lam)) P^T B_res^T a_j`` with the same
    deflation residual as :func:`update_A`, built from the new ``g``'s.

    When ``||a_j||^2 + mu2 lam_l`` vanishes for some ``l`` the system is
    singular: :class:`SingularUpdate` is raised, or ``g_j`` is left at zero when
    ``strict`` is false.  Columns with ``||a_j|| <= zero_tol * ||B_hat||_F`` count
    as zero.
    """
    B_hat = np.asarray(B_hat, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    _check_pair(B_hat, A, 0, 0, "update_G")
    s = B_hat.shape[1]
    if penalty.s != s:
        raise DimensionMismatch(f"penalty is {penalty.s}x{penalty.s} but B_hat has {s} columns")
    if mu2 < 0:
        raise ConfigError(f"mu2 must be >= 0, got {mu2}")
    q = A.shape[1]
    P, lam = penalty.P, penalty.lam
    # work in the eigenbasis of omega: h_j = P^T g_j
    PtZ = P.T @ (B_hat.T @ A)
    AtA = A.T @ A
    floor = (zero_tol * float(np.linalg.norm(B_hat))) ** 2
    H = np.zeros((s, q))
    for j in range(q):
        aa = AtA[j, j]
        denom = aa + mu2 * lam
        if aa <= floor or np.any(denom <= 0.0):
            if strict:
                raise SingularUpdate(f"column {j}: ||a_j||^2 + mu2*lambda has a zero")
            continue
        z = PtZ[:, j] - H[:, :j] @ AtA[:j, j] if j else PtZ[:, j]
        H[:, j] = z / denom
    return P @ H


def _sign_fix(Q):
    idx = np.argmax(np.abs(Q), axis=0)
    signs = np.where(Q[idx, np.arange(Q.shape[1])] < 0, -1.0, 1.0)
    return Q * signs


def _repair_basis(G, candidates, previous=None):
    """Replace dependent columns of ``G`` so that the columns span ``q`` dimensions.

    A dependent column ``j`` is replaced by ``previous[:, j]`` when that extends
    the span, otherwise by the first remaining vector of ``candidates`` that does.
    """
    s, q = G.shape
    scale = float(np.max(np.linalg.norm(G, axis=0))) if q else 0.0
    basis = np.zeros((s, q))
    out = np.empty_like(G)
    cand = iter(candidates)

    def residual(v, k):
        Bk = basis[:, :k]
        for _ in range(2):
            v = v - Bk @ (Bk.T @ v)
        return v

    for j in range(q):
        v = residual(G[:, j], j)
        nv = np.linalg.norm(v)
        if scale > 0 and nv > RANK_TOL * scale:
            out[:, j] = G[:, j]
        else:
            first = () if previous is None else (previous[:, j],)
            for c in itertools.chain(first, cand):
                v = residual(c, j)
                nv = np.linalg.norm(v)
                if nv > 1e-8:
                    out[:, j] = c
                    break
            else:
                raise RankDeficient("ran out of replacement directions for G")
        basis[:, j] = v / nv
    return out


def orthonormalize(G, candidates=None, previous=None) -> np.ndarray:
    """Thin-QR orthonormalization of ``G`` with a deterministic sign convention.

    Each returned column has its largest-magnitude entry positive.  If ``G`` is
    numerically rank deficient (``|R_jj| <= 1e-12 max|R_ii|``) each offending
    column is replaced by the same column of ``previous`` or else by the next
    vector of ``candidates`` that extends the span; with neither available
    :class:`RankDeficient` is raised.
    """
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[1] > G.shape[0]:
        raise DimensionMismatch(f"G must be tall (s >= q), got shape {G.shape}")
    Q, R = np.linalg.qr(G)
    diag = np.abs(np.diag(R))
    top = diag.max() if diag.size else 0.0
    if top == 0.0 or np.any(diag <= RANK_TOL * top):
        if candidates is None and previous is None:
            raise RankDeficient("G is numerically rank deficient")
        Q, _ = np.linalg.qr(_repair_basis(G, () if candidates is None else candidates, previous))
    return _sign_fix(Q)


def objective(B_hat, A, G, penalty: PenaltyOperator, mu1: float, mu2: float) -> float:
    B_hat = np.asarray(B_hat, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if (A.shape[0] != B_hat.shape[0] or G.shape[0] != B_hat.shape[1]
            or A.shape[1] != G.shape[1] or penalty.s != G.shape[0]):
        raise DimensionMismatch(
            f"inconsistent shapes B_hat {B_hat.shape}, A {A.shape}, G {G.shape}, "
            f"penalty {penalty.s}"
        )
    fit = float(np.sum((B_hat - A @ G.T) ** 2))
    rough = float(np.sum(G * (penalty.omega @ G)))
    return fit + mu1 * float(np.abs(A).sum()) + mu2 * rough


def _replacement_order(Rt, q, s):
    """Unused right singular vectors, then the used ones from the weakest up, then unit vectors."""
    rows = list(range(q, Rt.shape[0])) + list(range(min(q, Rt.shape[0]) - 1, -1, -1))
    for i in rows:
        yield Rt[i]
    yield from np.eye(s)


def _right_singular_basis(B_hat):
    """All ``s`` right singular vectors as rows; a wide ``B_hat`` gets a completed basis."""
    _, _, Rt = np.linalg.svd(B_hat, full_matrices=False)
    s = B_hat.shape[1]
    if Rt.shape[0] < s:
        Q, _ = np.linalg.qr(Rt.T, mode="complete")
        Rt = np.vstack([Rt, Q[:, Rt.shape[0]:].T])
    return Rt


def _sparsity(M):
    return float(np.count_nonzero(M == 0.0)) / M.size


def _alternate(B_hat, penalty, opts, a_step, g_step):
    B_hat = as_matrix(B_hat, "B_hat")
    p, s = B_hat.shape
    if penalty is not None and penalty.s != s:
        raise DimensionMismatch(f"penalty is {penalty.s}x{penalty.s} but B_hat has {s} columns")
    q = opts.rank_for(s)

    Rt = _right_singular_basis(B_hat)

    def candidates():
        return _replacement_order(Rt, q, s)

    G = orthonormalize(Rt[:q].T, candidates())
    state = DecompositionState(A=B_hat @ G, G=G)
    prev = state.A @ G.T

    for it in range(1, opts.max_iter + 1):
        A = a_step(B_hat, G)
        G = orthonormalize(g_step(B_hat, A), candidates(), previous=G)
        B_tilde = A @ G.T

        obj = objective(B_hat, A, G, penalty, opts.mu1, opts.mu2) if penalty is not None \
            else float(np.sum((B_hat - B_tilde) ** 2)) + opts.mu1 * float(np.abs(A).sum())
        if not math.isfinite(obj):
            raise NonFinite(f"objective became non-finite at iteration {it}")
        diff = float(np.linalg.norm(B_tilde - prev))
        norm = float(np.linalg.norm(B_tilde))
        change = 0.0 if diff == 0.0 else (diff / norm if norm > 0 else math.inf)

        state.A, state.G = A, G
        state.iterations_run = it
        state.objective_trace.append(obj)
        state.sparsity_trace.append(_sparsity(B_tilde))
        state.change_trace.append(change)
        state.orthogonality_trace.append(float(np.max(np.abs(G.T @ G - np.eye(q)))))
        prev = B_tilde
        if change <= opts.rel_tol:
            state.converged = True
            break
    return state


def twr_solve(B_hat, penalty: PenaltyOperator, opts: SolverOptions) -> DecompositionState:
    """Two-way regularized decomposition of the raw estimate."""

    def a_step(B, G):
        return update_A(B, G, opts.mu1, strict=False)

    def g_step(B, A):
        return update_G(B, A, penalty, opts.mu2, strict=False, zero_tol=ZERO_TOL)

    return _alternate(B_hat, penalty, opts, a_step, g_step)


def towr_solve(B_hat, penalty: PenaltyOperator, opts: SolverOptions) -> DecompositionState:
    """Temporal-only variant: ``mu1`` is forced to 0 and ``A = B_hat G``."""
    opts = opts.with_(mu1=0.0)

    def g_step(B, A):
        return update_G(B, A, penalty, opts.mu2, strict=False, zero_tol=ZERO_TOL)

    return _alternate(B_hat, penalty, opts, lambda B, G: B @ G, g_step)


def sowr_solve(B_hat, opts: SolverOptions, penalty: PenaltyOperator | None = None) -> DecompositionState:
    """Spatial-only variant: ``mu2`` is forced to 0 and ``G = B_hat^T A`` before QR."""
    opts = opts.with_(mu2=0.0)

    def a_step(B, G):
        return update_A(B, G, opts.mu1, strict=False)

    return _alternate(B_hat, penalty, opts, a_step, lambda B, A: B.T @ A)

