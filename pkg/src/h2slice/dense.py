"""Small dense kernels used at the leaves of the hierarchy and as test oracles."""

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .control import RELATIVE, TruncationControl

PIVOT_TOL = 1e-13


class PivotBreakdown(ArithmeticError):
    """Raised by an unpivoted LDL^T when a pivot is (numerically) zero."""

    def __init__(self, position, value=0.0):
        super().__init__(f"pivot breakdown at position {position} (d={value:.3e})")
        self.position = position
        self.value = value


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


def _as_matrix(M):
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError("expected a 2D array")
    return M


_MASKS = {}


def _upper_mask(p, n):
    mask = _MASKS.get((p, n))
    if mask is None:
        mask = _MASKS[(p, n)] = np.triu(np.ones((p, n)))
    return mask


def thin_qr(M):
    """Reduced QR with a nonnegative diagonal in R.

    Returns ``Q`` (m x min(m,n)) with orthonormal columns and upper triangular
    ``R`` (min(m,n) x n).  Rank-deficient input is fine; R then has zero rows.
    """
    M = _as_matrix(M)
    m, n = M.shape
    p = min(m, n)
    if p == 0:
        return np.zeros((m, 0)), np.zeros((0, n))
    # LAPACK directly: this sits in the innermost loops of the arithmetic
    qr, tau, _, _ = lapack.dgeqrf(M)
    R = qr[:p] * _upper_mask(p, n)
    Q, _, _ = lapack.dorgqr(qr[:, :p], tau)
    neg = np.diagonal(R) < 0.0
    if neg.any():
        signs = np.where(neg, -1.0, 1.0)
        Q *= signs
        R *= signs[:, None]
    return Q, R


def qr_r(M):
    """Triangular factor of a reduced QR (rows ``min(m, n)``), without forming Q."""
    M = _as_matrix(M)
    p = min(M.shape)
    if p == 0:
        return np.zeros((0, M.shape[1]))
    qr, _, _, _ = lapack.dgeqrf(M)
    return qr[:p] * _upper_mask(p, M.shape[1])


def svd(M):
    """Thin SVD ``M = U diag(s) V^T`` with ``s`` descending."""
    M = _as_matrix(M)
    m, n = M.shape
    if m == 0 or n == 0:
        p = min(m, n)
        return np.zeros((m, p)), np.zeros(p), np.zeros((n, p))
    U, s, Vt, info = lapack.dgesdd(M, compute_uv=1, full_matrices=0)
    if info != 0:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
    return U, s, Vt.T


def truncation_rank(values, control: TruncationControl):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 0
    if control.mode == RELATIVE:
        cut = control.eps * values[0]
        r = int(np.count_nonzero(values > cut))
    else:
        # ties at exactly 1 are dropped
        r = int(np.count_nonzero(values > 1.0))
    return min(r, control.max_rank)


def dense_ldlt(A, pivot_tol=PIVOT_TOL, scale=None):
    """Unpivoted ``A = L diag(D) L^T`` reading only the lower triangle of ``A``.

    ``scale`` is the reference norm for the breakdown test and defaults to
    the Frobenius norm of the symmetrized input.
    """
    A = _as_matrix(A)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("dense_ldlt needs a square matrix")
    W = np.tril(A)
    W = W + np.tril(W, -1).T
    if scale is None:
        scale = np.linalg.norm(W)
    tol = pivot_tol * scale
    L = np.eye(n)
    D = np.empty(n)
    for j in range(n):
        d = W[j, j]
        if not abs(d) > tol:
            raise PivotBreakdown(j, d)
        D[j] = d
        col = W[j + 1:, j] / d
        L[j + 1:, j] = col
        W[j + 1:, j + 1:] -= np.outer(col, W[j + 1:, j])
    return L, D


def cholesky(B):
    B = _as_matrix(B)
    try:
        return np.linalg.cholesky(B)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def dense_sym_eig(A, vectors=False):
    """Eigenvalues of a symmetric matrix in ascending order."""
    A = _as_matrix(A)
    A = 0.5 * (A + A.T)
    if vectors:
        return np.linalg.eigh(A)
    return np.linalg.eigvalsh(A)


def dense_gen_eig(A, B, vectors=False):
    """Eigenvalues of the pencil (A, B) with B symmetric positive definite.

    Reduces to ``C^{-1} A C^{-T}`` with ``B = C C^T``.
    """
    A = _as_matrix(A)
    C = cholesky(0.5 * (B + np.asarray(B).T))
    T = scipy.linalg.solve_triangular(C, A, lower=True)
    T = scipy.linalg.solve_triangular(C, T.T, lower=True)
    if not vectors:
        return dense_sym_eig(T)
    lam, U = dense_sym_eig(T, vectors=True)
    X = scipy.linalg.solve_triangular(C, U, lower=True, trans="T")
    return lam, X
