"""H^2 arithmetic driven by low-rank updates: products, triangular solves and LDL^T.

Every change to an admissible block goes through ``update_block``, which
keeps the cluster bases orthogonal and adaptive.  Products are evaluated
on block views that may be transposed, so ``L^T`` never has to be stored.
"""

from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.linalg

from .compression import init_weights, update_block
from .control import TruncationControl
from .dense import PIVOT_TOL, PivotBreakdown, dense_ldlt, thin_qr

log = logging.getLogger(__name__)

# relative cut used to squeeze concatenated update factors before they are applied
SQUEEZE = 1e-2


class InvalidBlock(ValueError):
    pass


class _Op:
    """Block b of M, optionally transposed."""

    __slots__ = ("M", "b", "trans")

    def __init__(self, M, b, trans=False):
        self.M = M
        self.b = b
        self.trans = trans

    @property
    def rows(self):
        return self.b.col if self.trans else self.b.row

    @property
    def cols(self):
        return self.b.row if self.trans else self.b.col

    @property
    def is_leaf(self):
        return self.b.sons is None

    def son(self, i, j):
        sons = self.b.sons
        return _Op(self.M, sons[j][i] if self.trans else sons[i][j], self.trans)

    def present(self):
        key = self.b.id
        return key in self.M.S or key in self.M.N

    def factors(self):
        """``(Vl, S, Vr)`` with block = ``Vl S Vr^T``."""
        M, b = self.M, self.b
        S = M.S[b.id]
        if self.trans:
            return M.cb.expand(b.col), S.T, M.rb.expand(b.row)
        return M.rb.expand(b.row), S, M.cb.expand(b.col)

    def dense(self):
        N = self.M.N[self.b.id]
        return N.T if self.trans else N

    def set_dense(self, value):
        self.M.N[self.b.id] = value.T.copy() if self.trans else value

    def matmat(self, Z):
        return self.M.block_matmat(self.b, Z, self.trans)

    def rmatmat(self, Z):
        return self.M.block_matmat(self.b, Z, not self.trans)


def _squeeze(X, Y, rtol):
    """Re-factor ``X Y^T`` with fewer columns, dropping directions below ``rtol`` times the largest."""
    p = X.shape[1]
    if p <= 1:
        return X, Y
    Qx, Rx = thin_qr(X)
    Qy, Ry = thin_qr(Y)
    U, s, Vt = np.linalg.svd(Rx @ Ry.T, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return X[:, :0], Y[:, :0]
    r = int(np.count_nonzero(s > rtol * s[0]))
    return Qx @ (U[:, :r] * s[:r]), Qy @ Vt[:r].T


class _Context:
    """Target matrix with its stored weights; applies updates to block views."""

    def __init__(self, M, control, weights=None):
        if not (M.rb.orthogonal and M.cb.orthogonal):
            M.orthogonalize()
        self.M = M
        self.control = control
        self.weights = weights if weights is not None else init_weights(M, control)
        self.rtol = SQUEEZE * control.eps
        self.updates = 0

    def add(self, op, X, Y):
        if op.trans:
            X, Y = Y, X
        b = op.b
        M = self.M
        if b.is_leaf and not b.admissible:
            if b.id in M.N:
                M.N[b.id] += X @ Y.T
            return
        if M.lower_only and b.row.end <= b.col.start:
            return
        X, Y = _squeeze(X, Y, self.rtol)
        if X.shape[1] == 0:
            return
        self.updates += 1
        update_block(M, b, X, Y, self.control, self.weights)


def _lowrank_product(alpha, A, B, D):
    """Factors X, Y with ``alpha A diag(D|_r) B = X Y^T`` when A or B is a leaf, or None if zero."""
    r = A.cols
    d = None if D is None else D[r.start:r.end]
    if A.is_leaf:
        if not A.present():
            return None
        if A.b.admissible:
            Vl, S, Vr = A.factors()
            if S.size == 0:
                return None
            Z = Vr if d is None else Vr * d[:, None]
            return alpha * (Vl @ S), B.rmatmat(Z)
        N = A.dense()
        if d is not None:
            N = N * d[None, :]
        return alpha * N, B.rmatmat(np.eye(r.size))
    if not B.present():
        return None
    if B.b.admissible:
        Vl, S, Vr = B.factors()
        if S.size == 0:
            return None
        Z = Vl if d is None else Vl * d[:, None]
        return alpha * (A.matmat(Z) @ S), Vr
    N = B.dense()
    if d is not None:
        N = N * d[:, None]
    return alpha * A.matmat(N), np.eye(B.cols.size)


def _collect(item, C, Xs, Ys):
    alpha, A, B, D = item
    if A.is_leaf or B.is_leaf:
        f = _lowrank_product(alpha, A, B, D)
        if f is None:
            return
        X, Y = f
        Xp = np.zeros((C.rows.size, X.shape[1]))
        Yp = np.zeros((C.cols.size, Y.shape[1]))
        r0 = A.rows.start - C.rows.start
        c0 = B.cols.start - C.cols.start
        Xp[r0:r0 + X.shape[0]] = X
        Yp[c0:c0 + Y.shape[0]] = Y
        Xs.append(Xp)
        Ys.append(Yp)
        return
    nk = len(A.cols.parts())
    for i in range(len(A.rows.parts())):
        for j in range(len(B.cols.parts())):
            for k in range(nk):
                _collect((alpha, A.son(i, k), B.son(k, j), D), C, Xs, Ys)


def _addmul(ctx, C, items):
    """``C += sum alpha A diag(D) B`` over the items, grouping all leaf products per target block."""
    Xs, Ys, deeper = [], [], []
    for item in items:
        alpha, A, B, D = item
        if alpha == 0.0:
            continue
        if A.is_leaf or B.is_leaf:
            f = _lowrank_product(alpha, A, B, D)
            if f is not None:
                Xs.append(f[0])
                Ys.append(f[1])
        else:
            deeper.append(item)
    if C.is_leaf:
        for item in deeper:
            _collect(item, C, Xs, Ys)
        deeper = []
    if Xs:
        ctx.add(C, np.hstack(Xs), np.hstack(Ys))
    if not deeper:
        return
    lower = ctx.M.lower_only
    for i in range(len(C.rows.parts())):
        for j in range(len(C.cols.parts())):
            Cij = C.son(i, j)
            if lower and Cij.b.row.end <= Cij.b.col.start:
                continue
            sub = []
            for alpha, A, B, D in deeper:
                for k in range(len(A.cols.parts())):
                    sub.append((alpha, A.son(i, k), B.son(k, j), D))
            _addmul(ctx, Cij, sub)


def _solve_dense(L, t, R, D=None):
    """``(L_tt diag(D_t))^{-1} R`` for a dense right-hand side (rows of t)."""
    bl = L.blocks
    if t.is_leaf:
        Y = scipy.linalg.solve_triangular(L.N[bl.block(t, t).id], R, lower=True,
                                          unit_diagonal=True, check_finite=False)
        if D is not None:
            Y = Y / D[t.start:t.end, None]
        return Y
    t1, t2 = t.sons
    n1 = t1.size
    Y1 = _solve_dense(L, t1, R[:n1], D)
    Z = Y1 if D is None else Y1 * D[t1.start:t1.end, None]
    R2 = R[n1:] - L.block_matmat(bl.block(t2, t1), Z)
    return np.concatenate([Y1, _solve_dense(L, t2, R2, D)])


def _ldlt(ctx, t, D, pivot_tol):
    L = ctx.M
    bl = L.blocks
    b = bl.block(t, t)
    if b.is_leaf:
        try:
            Lt, Dt = dense_ldlt(L.N[b.id], pivot_tol)
        except PivotBreakdown as exc:
            raise PivotBreakdown(t.start + exc.position, exc.value) from None
        L.N[b.id] = Lt
        D[t.start:t.end] = Dt
        return
    t1, t2 = t.sons
    _ldlt(ctx, t1, D, pivot_tol)
    b21 = bl.block(t2, t1)
    # L21^T = D1^{-1} L11^{-1} A12, stored through the transposed view of (t2, t1)
    _solve_left(ctx, L, t1, _Op(L, b21, trans=True), D)
    _addmul(ctx, _Op(L, bl.block(t2, t2)), [(-1.0, _Op(L, b21), _Op(L, b21, trans=True), D)])
    _ldlt(ctx, t2, D, pivot_tol)


@dataclass
class LdltFactors:
    L: object
    D: np.ndarray
    shift: float = 0.0
    residual_estimate: float = None
    max_rank: int = 0
    updates: int = field(default=0, repr=False)

    @property
    def n(self):
        return self.D.size

    def apply(self, x):
        """``L diag(D) L^T x`` in the permuted ordering."""
        x = np.asarray(x, dtype=float)
        y = self.L.block_matmat(self.L.blocks.root, x, trans=True)
        y = (self.D * y.T).T
        return self.L.block_matmat(self.L.blocks.root, y)

    def to_dense(self):
        Ld = self.L.to_dense()
        return Ld @ (self.D[:, None] * Ld.T)


def inertia(F):
    D = F.D if isinstance(F, LdltFactors) else np.asarray(F)
    return int(np.count_nonzero(D < 0.0)), int(np.count_nonzero(D > 0.0))


def _estimate_residual(A, F, samples, seed=0):
    rng = np.random.default_rng(seed)
    Om = rng.standard_normal((A.n, samples))
    Aom = A.block_matmat(A.blocks.root, Om)
    den = np.linalg.norm(Aom)
    return float(np.linalg.norm(F.apply(Om) - Aom) / den) if den else 0.0


def ldlt(A, control=None, pivot_tol=PIVOT_TOL, estimate_residual=False, samples=8):
    """Unpivoted block LDL^T of a symmetric H^2-matrix.

    Only the lower block triangle is copied and overwritten.  Raises
    PivotBreakdown with the global (permuted) position of a vanishing pivot.
    """
    control = control or TruncationControl()
    L = A.lower_part()
    ctx = _Context(L, control)
    D = np.zeros(A.n)
    _ldlt(ctx, L.blocks.rows.root, D, pivot_tol)
    F = LdltFactors(L, D, max_rank=L.max_rank(), updates=ctx.updates)
    if estimate_residual:
        F.residual_estimate = _estimate_residual(A, F, samples)
    log.debug("ldlt n=%d max_rank=%d updates=%d", A.n, F.max_rank, ctx.updates)
    return F


def add_lowrank_global(C, X, Y, control=None):
    control = control or TruncationControl()
    if not (C.rb.orthogonal and C.cb.orthogonal):
        C.orthogonalize()
    update_block(C, C.blocks.root, X, Y, control)


def add_lowrank_local(C, b0, X, Y, control=None, lists=None, weights=None):
    """``C|_b0 += X Y^T`` touching only the subtrees of b0's clusters.

    ``weights`` must be current for C; they are created on demand and kept
    up to date.  ``lists`` defaults to the lists held by C.
    """
    control = control or TruncationControl()
    if b0 is None or b0.id >= len(C.blocks.blocks) or C.blocks.blocks[b0.id] is not b0:
        raise InvalidBlock(f"{b0!r} is not a block of this matrix")
    if lists is not None:
        C._lists = lists
    if not (C.rb.orthogonal and C.cb.orthogonal):
        C.orthogonalize()
        weights = None
    if weights is None:
        weights = init_weights(C, control)
    update_block(C, b0, X, Y, control, weights)
    return weights


def multiply_accum(C, alpha, A, B, control=None, weights=None):
    """``C += alpha A B`` for H^2-matrices over one cluster tree (C must not alias A or B)."""
    control = control or TruncationControl()
    if alpha == 0.0:
        return
    ctx = _Context(C, control, weights)
    root = C.blocks.root
    _addmul(ctx, _Op(C, root), [(float(alpha), _Op(A, A.blocks.root), _Op(B, B.blocks.root), None)])


def solve_lower_unit(L, rhs):
    """``L^{-1} rhs`` for a unit lower triangular H^2-matrix and a dense right-hand side."""
    rhs = np.asarray(rhs, dtype=float)
    vec = rhs.ndim == 1
    R = rhs[:, None] if vec else rhs
    Y = _solve_dense(L, L.blocks.rows.root, R)
    return Y[:, 0] if vec else Y


def solve_lower_unit_block(L, C, b, control=None, D=None):
    """Overwrite block b of the H^2-matrix C by ``(L_tt diag(D))^{-1} C|_b`` (t = row cluster of b)."""
    control = control or TruncationControl()
    ctx = _Context(C, control)
    _solve_left(ctx, L, b.row, _Op(C, b), D)


def _solve_left(ctx, L, t, C, D):
    """Overwrite the block view C (rows of t) by ``(L_tt diag(D_t))^{-1} C``."""
    if C.is_leaf:
        if not C.present():
            return
        if C.b.admissible:
            Vl, S, Vr = C.factors()
            if S.size == 0:
                return
            VS = Vl @ S
            ctx.add(C, _solve_dense(L, t, VS, D) - VS, Vr)
        else:
            C.set_dense(_solve_dense(L, t, C.dense(), D))
        return
    ncols = len(C.cols.parts())
    if t.is_leaf:
        for j in range(ncols):
            _solve_left(ctx, L, t, C.son(0, j), D)
        return
    t1, t2 = t.sons
    L21 = _Op(L, L.blocks.block(t2, t1))
    for j in range(ncols):
        C1 = C.son(0, j)
        C2 = C.son(1, j)
        _solve_left(ctx, L, t1, C1, D)
        _addmul(ctx, C2, [(-1.0, L21, C1, D)])
        _solve_left(ctx, L, t2, C2, D)


def solve_diag(D, Y):
    """``diag(D)^{-1} Y``, exact per entry."""
    D = np.asarray(D, dtype=float)
    Y = np.asarray(Y, dtype=float)
    return Y / D if Y.ndim == 1 else Y / D[:, None]
