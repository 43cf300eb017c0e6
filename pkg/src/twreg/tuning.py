"""Choosing the penalties: K-fold CV over sensors for ``mu1``, GCV for ``mu2``.

``mu1`` changes which sources survive, so it is scored by how well a fit on
the retained sensors predicts the held-out ones.  ``mu2`` only smooths each
temporal factor, so it is chosen by generalized cross-validation of the ridge
regressions inside the G-update, conditional on the current ``A``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigError, FoldTooSmall, NoValidComponent, TwrError
from .model_io import ProblemInstance
from .penalty import PenaltyOperator, second_diff_penalty
from .solver import SolverOptions, twr_solve
from .stage1 import raw_estimate

log = logging.getLogger(__name__)

TRACE_MODES = ("hat", "printed", "normalized")


@dataclass(frozen=True)
class CvSpec:
    K: int = 5
    mu1_grid: tuple = tuple(np.linspace(0.0, 1.0, 10).tolist())
    fold_seed: int = 0

    def __post_init__(self):
        grid = tuple(float(v) for v in self.mu1_grid)
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if not grid:
            raise ConfigError("mu1_grid is empty")
        if any(not math.isfinite(v) or v < 0 for v in grid):
            raise ConfigError("mu1_grid values must be finite and >= 0")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("mu1_grid must be strictly increasing")
        object.__setattr__(self, "mu1_grid", grid)


@dataclass(frozen=True)
class GcvSpec:
    mu2_lo: float = 1e-6
    mu2_hi: float = 1e4
    tol: float = 1e-3
    max_evals: int = 100
    n_scan: int = 21  # log-spaced samples before the Brent refinement
    # "hat" is scale dependent: with ||a_j|| < 1 its trace exceeds s and every
    # component is skipped, so the scale-free form is the default
    trace_mode: str = "normalized"

    def __post_init__(self):
        if not (0 <= self.mu2_lo < self.mu2_hi and math.isfinite(self.mu2_hi)):
            raise ConfigError(f"need 0 <= mu2_lo < mu2_hi, got [{self.mu2_lo}, {self.mu2_hi}]")
        if not self.tol > 0:
            raise ConfigError("tol must be > 0")
        if self.max_evals < 3 or self.n_scan < 3:
            raise ConfigError("max_evals and n_scan must be >= 3")
        if self.trace_mode not in TRACE_MODES:
            raise ConfigError(f"trace_mode must be one of {TRACE_MODES}, got {self.trace_mode!r}")


# ---------------------------------------------------------------------------
# cross-validation for mu1

def fold_partition(n: int, K: int, seed: int) -> list[np.ndarray]:
    """Split ``range(n)`` into ``K`` near-equal folds after a seeded shuffle."""
    if K < 2:
        raise ConfigError(f"K must be >= 2, got {K}")
    if K > n:
        raise FoldTooSmall(f"cannot split {n} sensors into {K} non-empty folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, K)]


def cv_fold_scores(instance: ProblemInstance, spec: CvSpec, mu2: float,
                   opts: SolverOptions | None = None,
                   penalty: PenaltyOperator | None = None) -> np.ndarray:
    """Held-out squared prediction error, one row per fold and one column per grid value."""
    opts = opts or SolverOptions()
    penalty = penalty or second_diff_penalty(instance.s)
    folds = fold_partition(instance.n, spec.K, spec.fold_seed)
    X, Y = instance.X, instance.Y
    out = np.empty((spec.K, len(spec.mu1_grid)))
    for k, test in enumerate(folds):
        train = np.setdiff1d(np.arange(instance.n), test)
        try:
            B_hat = raw_estimate(X[train], Y[train]).B_hat
        except TwrError as exc:
            raise type(exc)(f"fold {k}: {exc}") from exc
        for i, mu1 in enumerate(spec.mu1_grid):
            try:
                state = twr_solve(B_hat, penalty, opts.with_(mu1=mu1, mu2=mu2))
            except TwrError as exc:
                raise type(exc)(f"fold {k}, grid point {i} (mu1={mu1}): {exc}") from exc
            resid = Y[test] - X[test] @ state.B_tilde
            out[k, i] = float(np.sum(resid * resid))
    return out


def select_mu1(grid, scores) -> float:
    """Grid value with the lowest mean score; ties go to the smaller value."""
    scores = np.asarray(scores, dtype=np.float64)
    return float(grid[int(np.argmin(scores))])  # argmin returns the first minimum


def kfold_cv_mu1(instance: ProblemInstance, spec: CvSpec, mu2: float,
                 opts: SolverOptions | None = None,
                 penalty: PenaltyOperator | None = None):
    """Return ``(mu1_star, scores)`` where ``scores[i]`` is the fold-averaged CV score."""
    scores = cv_fold_scores(instance, spec, mu2, opts, penalty).mean(axis=0)
    return select_mu1(spec.mu1_grid, scores), scores


# ---------------------------------------------------------------------------
# generalized cross-validation for mu2

def gcv_trace(aa: float, mu2: float, lam, mode: str = "hat", a=None) -> float:
    """Trace of the ridge hat matrix ``P (aa I + mu2 diag(lam))^{-1} P^T``.

    ``mode="printed"`` instead sums ``1 / (a_l^2 + mu2 lam_l)`` over the first
    ``min(len(a), len(lam))`` entries of the spatial vector ``a``.
    ``mode="normalized"`` is the hat trace after rescaling ``a`` to unit norm
    (and ``g`` by ``||a||``), i.e. ``sum aa / (aa + mu2 lam)``.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if mode == "hat":
        return float(np.sum(1.0 / (aa + mu2 * lam)))
    if mode == "normalized":
        return float(np.sum(aa / (aa + mu2 * lam)))
    if mode == "printed":
        if a is None:
            raise ConfigError("printed trace mode needs the spatial vector a")
        a = np.asarray(a, dtype=np.float64)
        m = min(a.size, lam.size)
        return float(np.sum(1.0 / (a[:m] ** 2 + mu2 * lam[:m])))
    raise ConfigError(f"unknown trace mode {mode!r}")


@dataclass
class GcvComponents:
    """Spatial columns that take part in GCV and the ones left out."""

    valid: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


def gcv_components(A, penalty: PenaltyOperator, mu2_lo: float, mode: str = "hat") -> GcvComponents:
    """Columns with ``a_j != 0`` whose normalized trace stays below 1 on the interval.

    The trace decreases in ``mu2``, so checking at ``mu2_lo`` covers the interval.
    """
    A = np.asarray(A, dtype=np.float64)
    s = penalty.s
    out = GcvComponents()
    for j in range(A.shape[1]):
        a = A[:, j]
        aa = float(a @ a)
        if aa == 0.0:
            continue
        with np.errstate(divide="ignore"):
            tr = gcv_trace(aa, mu2_lo, penalty.lam, mode, a)
        if math.isfinite(tr) and tr / s < 1.0:
            out.valid.append(j)
        else:
            out.skipped.append(j)
    return out


def gcv_score(mu2: float, B_hat, A, penalty: PenaltyOperator, components: GcvComponents,
              mode: str = "hat") -> float:
    """Average over valid ``j`` of ``||z_j - g_j||^2 / (1 - tr(S_j)/s)^2``.

    ``z_j = B_res^T a_j`` and ``g_j = S_j z_j`` come from an exact sequential
    G-update at this ``mu2``, so the deflation residuals track ``mu2`` too.
    In ``"normalized"`` mode the residual is ``z_j / ||a_j||^2 - g_j``, the
    misfit of the ridge regression in the units of ``g``.
    """
    B_hat = np.asarray(B_hat, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if not components.valid:
        raise NoValidComponent("no spatial column qualifies for GCV")
    P, lam = penalty.P, penalty.lam
    s, q = penalty.s, A.shape[1]
    PtZ = P.T @ (B_hat.T @ A)
    AtA = A.T @ A
    H = np.zeros((s, q))
    valid = set(components.valid)
    total = 0.0
    for j in range(q):
        aa = AtA[j, j]
        if aa == 0.0:
            continue
        z = PtZ[:, j] - H[:, :j] @ AtA[:j, j] if j else PtZ[:, j]
        H[:, j] = z / (aa + mu2 * lam)
        if j in valid:
            denom = 1.0 - gcv_trace(aa, mu2, lam, mode, A[:, j]) / s
            r = (z / aa if mode == "normalized" else z) - H[:, j]  # P is orthogonal, so norms agree in either basis
            total += float(r @ r) / denom ** 2
    return total / len(components.valid)


def minimize_1d(f, lo: float, hi: float, tol: float = 1e-3, max_evals: int = 100):
    """Bounded Brent search (golden section plus parabolic steps).

    ``tol`` is the final bracket width in the units of the search variable.
    Returns ``(x_min, f_min, n_evals)``.
    """
    if not lo < hi:
        raise ConfigError(f"need lo < hi, got [{lo}, {hi}]")
    res = minimize_scalar(f, bounds=(lo, hi), method="bounded",
                          options={"xatol": tol, "maxiter": max_evals})
    return float(res.x), float(res.fun), int(res.nfev)


@dataclass
class GcvResult:
    mu2_star: float
    samples: list  # [(mu2, gcv), ...] in evaluation order
    n_skipped: int
    non_unimodal: bool


def gcv_mu2(B_hat, A, penalty: PenaltyOperator, spec: GcvSpec | None = None) -> GcvResult:
    """Minimize GCV over ``[mu2_lo, mu2_hi]``.

    A log-spaced scan locates the best sample, then Brent refines in
    ``log10(mu2)`` between its neighbours, so ``tol`` is a relative tolerance.
    A zero lower bound is scanned at ``mu2_hi * 1e-12``.
    """
    spec = spec or GcvSpec()
    comps = gcv_components(A, penalty, spec.mu2_lo, spec.trace_mode)
    if not comps.valid:
        raise NoValidComponent(
            f"all {len(comps.skipped)} nonzero spatial columns have tr(S)/s >= 1 or none exist"
        )
    samples = []

    def f(log_mu):
        mu = 10.0 ** log_mu
        v = gcv_score(mu, B_hat, A, penalty, comps, spec.trace_mode)
        samples.append((mu, v))
        return v

    lo = math.log10(spec.mu2_lo if spec.mu2_lo > 0 else spec.mu2_hi * 1e-12)
    hi = math.log10(spec.mu2_hi)
    grid = np.linspace(lo, hi, spec.n_scan)
    vals = [f(x) for x in grid]
    best = int(np.argmin(vals))
    interior = 0 < best < len(grid) - 1
    # both ends below some interior sample and the best at an end: not unimodal
    non_unimodal = (not interior) and max(vals[1:-1]) > max(vals[0], vals[-1])
    budget = spec.max_evals - spec.n_scan
    if budget >= 3:
        a, b = grid[max(best - 1, 0)], grid[min(best + 1, len(grid) - 1)]
        x, fx, _ = minimize_1d(f, a, b, tol=spec.tol, max_evals=budget)
        mu_star = 10.0 ** x if fx <= vals[best] else 10.0 ** grid[best]
    else:
        mu_star = 10.0 ** grid[best]
    if comps.skipped:
        log.warning("GCV skipped %d component(s) with tr(S)/s >= 1", len(comps.skipped))
    return GcvResult(mu2_star=float(mu_star), samples=samples,
                     n_skipped=len(comps.skipped), non_unimodal=bool(non_unimodal))


# ---------------------------------------------------------------------------

@dataclass
class TuningResult:
    mu1_star: float
    mu2_star: float
    report: dict


def auto_tune(instance: ProblemInstance, cv_spec: CvSpec | None = None,
              gcv_spec: GcvSpec | None = None, opts: SolverOptions | None = None,
              passes: int = 2) -> TuningResult:
    """Alternate GCV for ``mu2`` (given the current ``A``) and CV for ``mu1``.

    Each pass fits the full data at the current penalties, refreshes ``mu2``
    by GCV on that fit's ``A`` and then ``mu1`` by CV at the new ``mu2``.  The
    starting penalties are those in ``opts``.
    """
    cv_spec = cv_spec or CvSpec()
    gcv_spec = gcv_spec or GcvSpec()
    opts = opts or SolverOptions()
    if passes < 1:
        raise ConfigError(f"passes must be >= 1, got {passes}")
    penalty = second_diff_penalty(instance.s)
    B_hat = raw_estimate(instance.X, instance.Y).B_hat
    mu1, mu2 = opts.mu1, opts.mu2
    warnings: list[str] = []
    history = []
    fold_scores = gcv = None
    for k in range(passes):
        state = twr_solve(B_hat, penalty, opts.with_(mu1=mu1, mu2=mu2))
        if not state.converged:
            warnings.append(f"pass {k + 1}: fit at mu1={mu1}, mu2={mu2} did not converge")
        gcv = gcv_mu2(B_hat, state.A, penalty, gcv_spec)
        if gcv.n_skipped:
            warnings.append(f"pass {k + 1}: GCV skipped {gcv.n_skipped} component(s)")
        if gcv.non_unimodal:
            warnings.append(f"pass {k + 1}: GCV curve is not unimodal")
        mu2 = gcv.mu2_star
        fold_scores = cv_fold_scores(instance, cv_spec, mu2, opts, penalty)
        mu1 = select_mu1(cv_spec.mu1_grid, fold_scores.mean(axis=0))
        history.append({"mu1": mu1, "mu2": mu2})
        log.info("tuning pass %d: mu1=%g mu2=%g", k + 1, mu1, mu2)

    report = {
        "mu1_grid": list(cv_spec.mu1_grid),
        "cv_scores": fold_scores.tolist(),
        "mu1_star": mu1,
        "gcv_samples": [[float(m), float(v)] for m, v in gcv.samples],
        "mu2_star": mu2,
        "warnings": warnings,
        "passes": history,
    }
    return TuningResult(mu1_star=mu1, mu2_star=mu2, report=report)
