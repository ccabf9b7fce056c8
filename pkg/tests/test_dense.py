import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from h2slice.control import TruncationControl
from h2slice.dense import (NotPositiveDefinite, PivotBreakdown, cholesky, dense_gen_eig, dense_ldlt,
                           dense_sym_eig, qr_r, svd, thin_qr, truncation_rank)


def test_qr_identity():
    Q, R = thin_qr(np.eye(3))
    assert np.allclose(Q, np.eye(3)) and np.allclose(R, np.eye(3))


def test_qr_hand_column():
    Q, R = thin_qr(np.array([[3.0], [4.0]]))
    assert np.allclose(Q[:, 0], [0.6, 0.8])
    assert np.allclose(R, [[5.0]])


def test_qr_random_reconstruction():
    M = np.random.default_rng(0).standard_normal((20, 5))
    Q, R = thin_qr(M)
    assert np.linalg.norm(Q @ R - M) <= 1e-12 * np.linalg.norm(M)
    assert np.allclose(Q.T @ Q, np.eye(5), atol=1e-12)
    assert np.allclose(R, np.triu(R))


def test_qr_wide_and_rank_deficient():
    rng = np.random.default_rng(1)
    M = rng.standard_normal((3, 7))
    Q, R = thin_qr(M)
    assert Q.shape == (3, 3) and R.shape == (3, 7)
    assert np.allclose(Q @ R, M)
    D = np.outer(rng.standard_normal(6), rng.standard_normal(4))
    Q, R = thin_qr(D)
    assert np.allclose(Q @ R, D)
    Rq = qr_r(D)
    assert np.allclose(Rq.T @ Rq, D.T @ D)


def test_svd_diag():
    _, s, _ = svd(np.diag([3.0, 1.0]))
    assert np.allclose(s, [3.0, 1.0])


def test_svd_rank_one():
    u = np.array([2.0, 0.0, 0.0])
    v = np.array([0.0, 3.0])
    _, s, _ = svd(np.outer(u, v))
    assert np.isclose(s[0], 6.0) and abs(s[1]) < 1e-14


def test_svd_against_gram_eigenvalues():
    M = np.random.default_rng(2).standard_normal((8, 6))
    U, s, V = svd(M)
    gram = np.sqrt(np.sort(np.linalg.eigvalsh(M.T @ M))[::-1].clip(0))
    assert np.allclose(s, gram, atol=1e-10)
    assert np.allclose(U.T @ U, np.eye(6), atol=1e-12)
    assert np.allclose(V.T @ V, np.eye(6), atol=1e-12)
    assert np.linalg.norm(U * s @ V.T - M) <= 1e-12 * np.linalg.norm(M)


def test_truncation_rank_examples():
    assert truncation_rank([3.0, 1.5, 0.9], TruncationControl(mode="weighted")) == 2
    assert truncation_rank([4, 2, 1e-12], TruncationControl(eps=1e-8, mode="relative")) == 2
    assert truncation_rank([5, 4, 3, 2, 1], TruncationControl(mode="weighted", max_rank=3)) == 3
    assert truncation_rank([], TruncationControl(mode="relative")) == 0


def test_control_validation():
    with pytest.raises(ValueError):
        TruncationControl(eps=0.0)
    with pytest.raises(ValueError):
        TruncationControl(mode="fixed")
    with pytest.raises(ValueError):
        TruncationControl(max_rank=0)


def test_ldlt_hand():
    L, D = dense_ldlt(np.array([[4.0, 2.0], [2.0, 5.0]]))
    assert np.allclose(L, [[1, 0], [0.5, 1]])
    assert np.allclose(D, [4, 4])
    L, D = dense_ldlt(np.diag([-1.0, 2.0]))
    assert np.allclose(L, np.eye(2)) and np.allclose(D, [-1, 2])


def test_ldlt_breakdown():
    with pytest.raises(PivotBreakdown) as info:
        dense_ldlt(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert info.value.position == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_ldlt_reconstructs_or_breaks(n, seed):
    G = np.random.default_rng(seed).standard_normal((n, n))
    A = G + G.T
    try:
        L, D = dense_ldlt(A)
    except PivotBreakdown:
        return
    # unpivoted LDL^T may grow, so measure against the factor sizes as well
    err = np.linalg.norm(L * D @ L.T - A)
    assert err <= 1e-12 * max(np.linalg.norm(A), np.linalg.norm(np.abs(L) * np.abs(D) @ np.abs(L).T))


def test_ldlt_reads_lower_triangle_only():
    A = np.array([[4.0, 99.0], [2.0, 5.0]])
    _, D = dense_ldlt(A)
    assert np.allclose(D, [4, 4])


def test_sym_eig_trace_and_residual():
    G = np.random.default_rng(3).standard_normal((15, 15))
    A = G + G.T
    w, V = dense_sym_eig(A, vectors=True)
    assert np.all(np.diff(w) >= 0)
    assert np.isclose(w.sum(), np.trace(A), rtol=1e-10, atol=1e-10)
    assert np.linalg.norm(A @ V - V * w) <= 1e-10 * np.linalg.norm(A)


def test_gen_eig_against_reduction():
    rng = np.random.default_rng(4)
    G = rng.standard_normal((10, 10))
    A = G + G.T
    H = rng.standard_normal((10, 10))
    B = H @ H.T + 10 * np.eye(10)
    w, V = dense_gen_eig(A, B, vectors=True)
    assert np.linalg.norm(A @ V - B @ V * w) <= 1e-10 * np.linalg.norm(A)
    # second route: eigenvalues of B^{-1} A
    assert np.allclose(w, np.sort(np.linalg.eigvals(np.linalg.solve(B, A)).real), atol=1e-9)
    assert np.allclose(dense_gen_eig(A, np.eye(10)), dense_sym_eig(A))


def test_cholesky_rejects_indefinite():
    L = cholesky(np.array([[4.0, 2.0], [2.0, 5.0]]))
    assert np.allclose(L @ L.T, [[4, 2], [2, 5]])
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.diag([1.0, -1.0]))
