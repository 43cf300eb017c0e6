import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twreg.errors import ConfigError, DimensionMismatch, RankDeficient, SingularUpdate, ZeroColumn
from twreg.penalty import quad_form, second_diff_penalty
from twreg.solver import (
    SolverOptions,
    objective,
    orthonormalize,
    soft_threshold,
    sowr_solve,
    towr_solve,
    twr_solve,
    update_A,
    update_G,
)


def grid_argmin(f, lo, hi, step=1e-4):
    xs = np.arange(lo, hi + step / 2, step)
    return xs[int(np.argmin(f(xs)))]


def orthonormal(rng, s, q):
    Q, _ = np.linalg.qr(rng.standard_normal((s, q)))
    return Q


def naive_update_A(B, G, mu1):
    # explicit residual matrix, rebuilt for every column
    A = np.zeros((B.shape[0], G.shape[1]))
    for j in range(G.shape[1]):
        Bres = B - A[:, :j] @ G[:, :j].T
        gg = G[:, j] @ G[:, j]
        r = Bres @ G[:, j] / gg
        A[:, j] = np.sign(r) * np.maximum(np.abs(r) - mu1 / (2 * gg), 0)
    return A


def sparse_smooth_instance(seed):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, 20)
    B = np.zeros((30, 20))
    B[3] = 3 * np.sin(2 * np.pi * t)
    B[11] = 2 * np.exp(-(((t - 0.5) / 0.15) ** 2))
    B[20] = -2 * np.cos(np.pi * t)
    return B + 0.05 * rng.standard_normal((30, 20))


# soft threshold ---------------------------------------------------------------

def test_soft_threshold_examples():
    assert soft_threshold(2.0, 0.5) == pytest.approx(1.5)
    assert soft_threshold(-2.0, 0.5) == pytest.approx(-1.5)
    assert soft_threshold(0.3, 0.5) == 0.0
    for r in (-3.0, -0.1, 0.0, 0.7, 12.0):
        assert soft_threshold(r, 0.0) == r
    with pytest.raises(ConfigError):
        soft_threshold(1.0, -0.1)


def test_soft_threshold_grid_oracle(rng):
    for _ in range(100):
        r, lam = rng.uniform(-3, 3), rng.uniform(0, 2)
        a = grid_argmin(lambda x: x * x - 2 * x * r + 2 * lam * np.abs(x), -4, 4)
        assert abs(soft_threshold(r, lam) - a) <= 2e-4


# A-update -------------------------------------------------------------------

def test_update_A_scalar_example():
    A = update_A(np.array([[2.0], [0.5]]), np.array([[1.0]]), 1.0)
    assert np.allclose(A, [[1.5], [0.0]])


def test_update_A_brute_force_optimum(rng):
    for _ in range(20):
        p, q = int(rng.integers(1, 6)), int(rng.integers(1, 3))
        s = q + int(rng.integers(0, 3))
        B = rng.standard_normal((p, s))
        G = orthonormal(rng, s, q)
        mu1 = rng.uniform(0, 2)
        A = update_A(B, G, mu1)
        C = B @ G  # ||B - A G^T||^2 = ||B G - A||^2 + const for orthonormal G
        for i in range(p):
            for j in range(q):
                c = C[i, j]
                best = grid_argmin(lambda a: (a - c) ** 2 + mu1 * np.abs(a), -abs(c) - 1, abs(c) + 1)
                assert abs(A[i, j] - best) <= 1e-4


def test_update_A_deflation_equivalence(rng):
    B = rng.standard_normal((8, 6))
    G = orthonormal(rng, 6, 6)
    mu1 = 0.4
    expected = soft_threshold(B @ G, mu1 / 2)
    assert np.max(np.abs(update_A(B, G, mu1) - expected)) <= 1e-10


def test_update_A_matches_explicit_residual(rng):
    # non-orthonormal G: the cross terms of the deflation matter
    for _ in range(10):
        B = rng.standard_normal((7, 5))
        G = rng.standard_normal((5, 3))
        assert np.allclose(update_A(B, G, 0.3), naive_update_A(B, G, 0.3), atol=1e-12)


def test_update_A_zero_penalty_and_full_shrinkage(rng):
    B = rng.standard_normal((6, 4))
    G = orthonormal(rng, 4, 4)
    assert np.allclose(update_A(B, G, 0.0), B @ G, atol=1e-12)
    big = 2 * np.max(np.abs(B @ G))
    assert not np.any(update_A(B, G, big))


def test_update_A_zero_column(rng):
    B = rng.standard_normal((4, 3))
    G = orthonormal(rng, 3, 2)
    G[:, 1] = 0.0
    with pytest.raises(ZeroColumn):
        update_A(B, G, 0.1)
    A = update_A(B, G, 0.1, strict=False)
    assert not np.any(A[:, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_update_A_sparsity_monotone_in_mu1(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((10, 6))
    G = orthonormal(rng, 6, 6)
    counts = [np.count_nonzero(update_A(B, G, mu)) for mu in np.linspace(0, 4, 15)]
    assert all(b <= a for a, b in zip(counts, counts[1:]))


# G-update -------------------------------------------------------------------

def test_update_G_zero_penalty_unit_column(rng):
    B = rng.standard_normal((5, 6))
    a = rng.standard_normal((5, 1))
    a /= np.linalg.norm(a)
    g = update_G(B, a, second_diff_penalty(6), 0.0)
    assert np.allclose(g, B.T @ a, atol=1e-12)


def test_update_G_direct_solve(rng):
    B = rng.standard_normal((4, 5))
    a = rng.standard_normal((4, 1))
    pen = second_diff_penalty(5)
    g = update_G(B, a, pen, 0.7)
    direct = np.linalg.solve((a.T @ a)[0, 0] * np.eye(5) + 0.7 * pen.omega, B.T @ a)
    assert np.allclose(g, direct, atol=1e-8)


def test_update_G_stationarity(rng):
    for _ in range(25):
        p, s, q = int(rng.integers(3, 9)), int(rng.integers(3, 9)), int(rng.integers(1, 4))
        B = rng.standard_normal((p, s))
        A = rng.standard_normal((p, q))
        mu2 = rng.uniform(0, 3)
        pen = second_diff_penalty(s)
        G = update_G(B, A, pen, mu2)
        for j in range(q):
            Bres = B - A[:, :j] @ G[:, :j].T
            a = A[:, j]
            lhs = (a @ a) * G[:, j] + mu2 * pen.omega @ G[:, j]
            assert np.linalg.norm(lhs - Bres.T @ a) <= 1e-8


def test_update_G_singular():
    pen = second_diff_penalty(5)
    with pytest.raises(SingularUpdate):
        update_G(np.ones((3, 5)), np.zeros((3, 2)), pen, 1.0)
    G = update_G(np.ones((3, 5)), np.zeros((3, 2)), pen, 1.0, strict=False)
    assert not np.any(G)


def test_update_G_shape_checks(rng):
    with pytest.raises(DimensionMismatch):
        update_G(np.ones((3, 5)), np.ones((3, 1)), second_diff_penalty(4), 1.0)
    with pytest.raises(DimensionMismatch):
        update_G(np.ones((3, 5)), np.ones((4, 1)), second_diff_penalty(5), 1.0)


# orthonormalize ---------------------------------------------------------------

def test_orthonormalize_examples(rng):
    Q = orthonormalize(np.array([[2.0, 0.0], [0.0, 3.0], [0.0, 0.0]]))
    assert np.allclose(Q, [[1, 0], [0, 1], [0, 0]])
    G = orthonormal(rng, 5, 3)
    Q = orthonormalize(G)
    assert np.allclose(np.abs(Q), np.abs(G), atol=1e-12)


def test_orthonormalize_projector_and_signs(rng):
    G = rng.standard_normal((6, 3))
    Q = orthonormalize(G)
    assert np.max(np.abs(Q.T @ Q - np.eye(3))) <= 1e-10
    proj = G @ np.linalg.solve(G.T @ G, G.T)
    assert np.max(np.abs(Q @ Q.T - proj)) <= 1e-9
    idx = np.argmax(np.abs(Q), axis=0)
    assert np.all(Q[idx, np.arange(3)] > 0)
    assert np.array_equal(orthonormalize(-G), Q)


def test_orthonormalize_rank_deficient(rng):
    G = rng.standard_normal((5, 3))
    G[:, 2] = G[:, 0] + G[:, 1]
    with pytest.raises(RankDeficient):
        orthonormalize(G)
    Q = orthonormalize(G, candidates=np.eye(5))
    assert np.max(np.abs(Q.T @ Q - np.eye(3))) <= 1e-10
    prev = orthonormal(rng, 5, 3)
    Q = orthonormalize(G, previous=prev)
    assert np.max(np.abs(Q.T @ Q - np.eye(3))) <= 1e-10
    with pytest.raises(RankDeficient):
        orthonormalize(np.zeros((3, 2)), candidates=[np.ones(3)])


# objective ------------------------------------------------------------------

def test_objective_examples(rng):
    pen = second_diff_penalty(6)
    B = rng.standard_normal((4, 6))
    null, _ = np.linalg.qr(np.stack([np.ones(6), np.arange(6.0)], axis=1))
    assert objective(B, np.zeros((4, 2)), null, pen, 0.3, 2.0) == pytest.approx(np.sum(B * B))
    G = orthonormal(rng, 6, 6)
    assert objective(B, B @ G, G, pen, 0.0, 0.0) == pytest.approx(0.0, abs=1e-20 + 1e-12)
    A, G = rng.standard_normal((4, 3)), rng.standard_normal((6, 3))
    fit = sum((B[i, l] - sum(A[i, j] * G[l, j] for j in range(3))) ** 2 for i in range(4) for l in range(6))
    rough = sum((G[l - 1, j] - 2 * G[l, j] + G[l + 1, j]) ** 2 for j in range(3) for l in range(1, 5))
    expected = fit + 0.3 * np.abs(A).sum() + 2.0 * rough
    assert abs(objective(B, A, G, pen, 0.3, 2.0) - expected) <= 1e-10 * max(1, expected)
    with pytest.raises(DimensionMismatch):
        objective(B, A, G[:5], pen, 0.0, 0.0)


# full solves ------------------------------------------------------------------

def test_options_validation():
    for bad in ({"mu1": -1}, {"mu2": float("nan")}, {"q": 0}, {"max_iter": 0}, {"rel_tol": 0}):
        with pytest.raises(ConfigError):
            SolverOptions(**bad)
    with pytest.raises(ConfigError):
        SolverOptions(q=7).rank_for(5)
    assert SolverOptions().rank_for(9) == 9


def test_unpenalized_reproduces_raw_estimate(rng):
    B = rng.standard_normal((12, 8))
    st_ = twr_solve(B, second_diff_penalty(8), SolverOptions())
    assert np.linalg.norm(st_.B_tilde - B) <= 1e-8 * np.linalg.norm(B)
    assert st_.converged


def test_zero_raw_estimate():
    pen = second_diff_penalty(5)
    B = np.zeros((6, 5))
    G0 = orthonormalize(np.linalg.svd(B, full_matrices=False)[2].T)
    st_ = twr_solve(B, pen, SolverOptions(mu1=0.5, mu2=1.0))
    assert st_.converged and st_.iterations_run == 1
    assert not np.any(st_.A)
    assert np.allclose(st_.G, G0, atol=1e-12)


def test_small_instance_converges_to_fixed_point():
    B = sparse_smooth_instance(0)
    pen = second_diff_penalty(20)
    opts = SolverOptions(mu1=1.0, mu2=1.0)
    st_ = twr_solve(B, pen, opts)
    assert st_.converged and st_.iterations_run <= 15
    assert len(set(st_.sparsity_trace[-2:])) == 1
    # one more iteration by hand barely moves the estimate
    A = update_A(B, st_.G, opts.mu1, strict=False)
    G = orthonormalize(update_G(B, A, pen, opts.mu2, strict=False), previous=st_.G)
    change = np.linalg.norm(A @ G.T - st_.B_tilde) / np.linalg.norm(A @ G.T)
    assert change < opts.rel_tol


def test_orthonormal_and_finite_every_iteration(desk_data):
    from twreg.stage1 import raw_estimate
    B = raw_estimate(desk_data.X, desk_data.Y).B_hat
    st_ = twr_solve(B, second_diff_penalty(B.shape[1]), SolverOptions(mu1=0.3, mu2=2.0))
    assert max(st_.orthogonality_trace) <= 1e-8
    assert all(np.isfinite(st_.objective_trace))
    assert len(st_.objective_trace) == len(st_.sparsity_trace) == st_.iterations_run


def test_bit_deterministic(rng):
    B = rng.standard_normal((15, 10))
    pen = second_diff_penalty(10)
    a = twr_solve(B, pen, SolverOptions(mu1=0.4, mu2=0.5))
    b = twr_solve(B.copy(), pen, SolverOptions(mu1=0.4, mu2=0.5))
    assert np.array_equal(a.A, b.A) and np.array_equal(a.G, b.G)
    assert a.objective_trace == b.objective_trace


@pytest.mark.parametrize("seed", range(5))
def test_towr_equals_twr_without_sparsity(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((14, 9))
    pen = second_diff_penalty(9)
    opts = SolverOptions(mu2=rng.uniform(0.1, 3))
    a, b = towr_solve(B, pen, opts), twr_solve(B, pen, opts.with_(mu1=0.0))
    assert np.max(np.abs(a.B_tilde - b.B_tilde)) <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_sowr_equals_twr_without_smoothing(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((14, 9))
    pen = second_diff_penalty(9)
    opts = SolverOptions(mu1=rng.uniform(0.05, 1))
    a, b = sowr_solve(B, opts, pen), twr_solve(B, pen, opts.with_(mu2=0.0))
    assert np.max(np.abs(a.B_tilde - b.B_tilde)) <= 1e-9


def test_one_way_limits(rng):
    B = rng.standard_normal((10, 7))
    pen = second_diff_penalty(7)
    assert np.allclose(towr_solve(B, pen, SolverOptions()).B_tilde, B, atol=1e-8)
    assert np.allclose(sowr_solve(B, SolverOptions()).B_tilde, B, atol=1e-8)
    big = sowr_solve(B, SolverOptions(mu1=1e3))
    assert not np.any(big.A) and not np.any(big.B_tilde)


def test_towr_constant_rows_give_smooth_factor(rng):
    B = np.outer(rng.standard_normal(8), np.ones(10))
    pen = second_diff_penalty(10)
    st1 = towr_solve(B, pen, SolverOptions(mu2=2.0, q=1))
    assert quad_form(pen, st1.G) <= 1e-8
    full = towr_solve(B, pen, SolverOptions(mu2=2.0))
    active = np.flatnonzero(np.linalg.norm(full.A, axis=0) > 1e-8)
    assert active.size == 1
    assert quad_form(pen, full.G[:, active]) <= 1e-8


def test_reduced_rank(rng):
    B = rng.standard_normal((9, 6))
    st_ = twr_solve(B, second_diff_penalty(6), SolverOptions(mu1=0.1, mu2=0.1, q=3))
    assert st_.A.shape == (9, 3) and st_.G.shape == (6, 3)
    assert np.allclose(st_.G.T @ st_.G, np.eye(3), atol=1e-10)
