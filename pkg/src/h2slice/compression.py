"""Weight matrices, adaptive cluster bases and recompression with blockwise error control.

The row-side routines take a ``row`` flag; with ``row=False`` they act on
the transposed matrix (column basis, column lists, transposed couplings).
"""

import math

import numpy as np

from .control import RELATIVE, WEIGHTED, TruncationControl
from .dense import qr_r, svd, thin_qr, truncation_rank
from .h2 import ClusterBasis, H2Matrix, NotOrthogonal, _subtree

SQRT3 = math.sqrt(3.0)
# each level of ancestry multiplies the inherited weight by this factor
LEVEL_FACTOR = 3.0
# Gram deviation below which a father basis is treated as still orthogonal
ORTHO_SLACK = 1e-14


class WeightSet:
    """Per-cluster weight matrices for both sides; ``row[t.id]`` is ``p_t x k_t``."""

    def __init__(self, row, col, weighted, eps):
        self.row = row
        self.col = col
        self.weighted = weighted
        self.eps = eps

    def side(self, row):
        return self.row if row else self.col

    def copy(self):
        return WeightSet([None if z is None else z.copy() for z in self.row],
                         [None if z is None else z.copy() for z in self.col],
                         self.weighted, self.eps)


def _side(M, row):
    if row:
        return M.rb, M.lists.row
    return M.cb, M.lists.col


def _coupling(M, b, row):
    S = M.S[b.id]
    return S if row else S.T


def weight_matrix(M, t, father_weight, row, weighted, eps):
    """Thin-QR factor of the stacked (scaled) couplings of t and the inherited father weight."""
    basis, lists = _side(M, row)
    parts = []
    for b in lists[t.id]:
        S = _coupling(M, b, row)
        if S.size == 0:
            continue
        if weighted:
            nrm = np.linalg.norm(S)
            if nrm == 0.0:
                continue
            S = S * (SQRT3 / (eps * nrm))
        parts.append(S)
    if father_weight is not None and father_weight.shape[0] and basis.k[t.id]:
        inherited = basis.E[t.id] @ father_weight.T
        parts.append(LEVEL_FACTOR * inherited if weighted else inherited)
    k = basis.k[t.id]
    if not parts or k == 0:
        return np.zeros((0, k))
    return qr_r(np.concatenate(parts, axis=1).T)


def weights_below(M, t0, father_weight, row, weighted, eps, out):
    """Top-down weights for the subtree of t0, written into ``out`` (list by cluster id)."""
    for t in _subtree(M.blocks.rows if row else M.blocks.cols, t0):
        fw = father_weight if t is t0 else out[t.father.id]
        out[t.id] = weight_matrix(M, t, fw, row, weighted, eps)


def _check_orthogonal(M):
    if not M.cb.orthogonal:
        raise NotOrthogonal("column basis must be orthogonal before computing row weights")
    if not M.rb.orthogonal:
        raise NotOrthogonal("row basis must be orthogonal before computing column weights")


def init_weights(M, control=None):
    control = control or TruncationControl()
    _check_orthogonal(M)
    weighted = control.mode == WEIGHTED
    ws = WeightSet([None] * len(M.blocks.rows.clusters), [None] * len(M.blocks.cols.clusters),
                   weighted, control.eps)
    weights_below(M, M.blocks.rows.root, None, True, weighted, control.eps, ws.row)
    weights_below(M, M.blocks.cols.root, None, False, weighted, control.eps, ws.col)
    return ws


def adaptive_below(basis, t0, Z, control):
    """Truncated bases for the subtree of t0.

    Returns ``(V, E, k, R)`` dictionaries keyed by cluster id; E holds the new
    transfer matrices of clusters strictly below t0, R the basis changes
    ``Q_t^T V_t``.
    """
    newV, newE, newk, R = {}, {}, {}, {}
    for t in reversed(_subtree(basis.tree, t0)):
        if t.is_leaf:
            Vhat = basis.V[t.id]
        else:
            Vhat = np.concatenate([R[s.id] @ basis.E[s.id] for s in t.sons])
        Zt = Z[t.id]
        if Zt.shape[0] == 0 or Vhat.shape[1] == 0:
            Q = np.zeros((Vhat.shape[0], 0))
        else:
            U, sv, _ = svd(Vhat @ Zt.T)
            r = min(truncation_rank(sv, control), Vhat.shape[1])
            Q = U[:, :r]
        R[t.id] = Q.T @ Vhat
        newk[t.id] = Q.shape[1]
        if t.is_leaf:
            newV[t.id] = Q
        else:
            off = 0
            for s in t.sons:
                newE[s.id] = Q[off:off + newk[s.id]]
                off += newk[s.id]
    return newV, newE, newk, R


def build_adaptive_row_basis(M, W, control=None):
    """Adaptive orthogonal row basis for the whole matrix; returns ``(Q, R)``."""
    control = control or TruncationControl()
    Q = M.rb.copy()
    root = M.blocks.rows.root
    newV, newE, newk, R = adaptive_below(M.rb, root, W.row, control)
    for key, v in newV.items():
        Q.V[key] = v
    for key, e in newE.items():
        Q.E[key] = e
    for key, k in newk.items():
        Q.k[key] = k
    Q.orthogonal = True
    return Q, R


def _contains(outer, inner):
    return outer.start <= inner.start and inner.end <= outer.end


def _extend_orthogonalize(basis, t0, X):
    """Widen the subtree bases of t0 by the rows of X and orthogonalize them.

    Returns the basis changes C with ``V_new C_t = [V_t, X|_t]``.  The
    transfer of t0 to its father becomes ``C_t0 [E; 0]``.
    """
    m = X.shape[1]
    C = {}
    off = t0.start
    V, E, k = basis.V, basis.E, basis.k
    for t in reversed(_subtree(basis.tree, t0)):
        if t.is_leaf:
            Q, Rt = thin_qr(np.concatenate([V[t.id], X[t.start - off:t.end - off]], axis=1))
            V[t.id] = Q
        else:
            rows = []
            for s in t.sons:
                Cs = C[s.id]
                ks = k[s.id]
                rows.append(np.concatenate([Cs[:, :ks] @ E[s.id], Cs[:, ks:]], axis=1))
            Q, Rt = thin_qr(np.concatenate(rows))
            pos = 0
            for s in t.sons:
                kn = C[s.id].shape[0]
                E[s.id] = Q[pos:pos + kn]
                pos += kn
        C[t.id] = Rt
    for t in _subtree(basis.tree, t0):
        k[t.id] = C[t.id].shape[0]
    if t0.father is not None:
        old = E[t0.id]
        E[t0.id] = C[t0.id] @ np.concatenate([old, np.zeros((m, old.shape[1]))])
    return C


def _apply_adaptive(M, t0, row, result):
    newV, newE, newk, R = result
    basis, lists = _side(M, row)
    for key, v in newV.items():
        basis.V[key] = v
    for key, e in newE.items():
        basis.E[key] = e
    for t in _subtree(basis.tree, t0):
        for b in lists[t.id]:
            if row:
                M.S[b.id] = R[t.id] @ M.S[b.id]
            else:
                M.S[b.id] = M.S[b.id] @ R[t.id].T
    if t0.father is not None:
        basis.E[t0.id] = R[t0.id] @ basis.E[t0.id]
    for key, k in newk.items():
        basis.k[key] = k


def _reorthogonalize_ancestors(M, t0, row, weights):
    """Restore orthogonality above t0 after its basis changed."""
    basis, lists = _side(M, row)
    a = t0.father
    while a is not None:
        stacked = np.concatenate([basis.E[s.id] for s in a.sons])
        gram = stacked.T @ stacked
        if np.abs(gram - np.eye(gram.shape[0])).max(initial=0.0) <= ORTHO_SLACK:
            # still orthogonal here, so nothing above can have changed
            return
        Q, R = thin_qr(stacked)
        pos = 0
        for s in a.sons:
            ks = basis.k[s.id]
            basis.E[s.id] = Q[pos:pos + ks]
            pos += ks
        for b in lists[a.id]:
            if row:
                M.S[b.id] = R @ M.S[b.id]
            else:
                M.S[b.id] = M.S[b.id] @ R.T
        if a.father is not None:
            basis.E[a.id] = R @ basis.E[a.id]
        if weights is not None:
            Z = weights.side(row)[a.id]
            if Z is not None:
                weights.side(row)[a.id] = Z @ R.T
        basis.k[a.id] = R.shape[0]
        a = a.father


def update_block(M, b0, X, Y, control, weights=None):
    """``M|_b0 += X Y^T`` followed by recompression of the affected bases.

    With ``weights`` the stored weights of ancestors are used for the
    subtree roots and kept current afterwards; without them b0 must be the
    root block.
    """
    t0, s0 = b0.row, b0.col
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    m = X.shape[1]
    if X.shape[0] != t0.size or Y.shape[0] != s0.size or Y.shape[1] != m:
        raise ValueError(f"factor shapes {X.shape}, {Y.shape} do not fit block {b0!r}")
    if b0.is_leaf and not b0.admissible:
        if m and b0.id in M.N:
            M.N[b0.id] += X @ Y.T
        return
    if weights is None and (t0.father is not None or s0.father is not None):
        raise ValueError("stored weights are needed for a block below the root")
    weighted = control.mode == WEIGHTED
    eps = control.eps

    # widen both bases exactly and orthogonalize them
    Cr = _extend_orthogonalize(M.rb, t0, X)
    Cc = _extend_orthogonalize(M.cb, s0, Y)
    rows_lists, cols_lists = M.lists.row, M.lists.col
    touched = {}
    for t in _subtree(M.blocks.rows, t0):
        for b in rows_lists[t.id]:
            touched[b.id] = b
    for s in _subtree(M.blocks.cols, s0):
        for b in cols_lists[s.id]:
            touched[b.id] = b
    for b in touched.values():
        S = M.S[b.id]
        r_ext = _contains(t0, b.row)
        c_ext = _contains(s0, b.col)
        kr, kc = S.shape
        if r_ext and c_ext:
            St = np.zeros((kr + m, kc + m))
            St[:kr, :kc] = S
            St[kr:, kc:] = np.eye(m)
        elif r_ext:
            St = np.concatenate([S, np.zeros((m, kc))])
        else:
            St = np.concatenate([S, np.zeros((kr, m))], axis=1)
        if r_ext:
            St = Cr[b.row.id] @ St
        if c_ext:
            St = St @ Cc[b.col.id].T
        M.S[b.id] = St
    if m:
        for x in M.blocks.subtree(b0):
            if x.is_leaf and not x.admissible and x.id in M.N:
                M.N[x.id] += (X[x.row.start - t0.start:x.row.end - t0.start]
                              @ Y[x.col.start - s0.start:x.col.end - s0.start].T)
    M.rb.orthogonal = True
    M.cb.orthogonal = True

    nr = len(M.blocks.rows.clusters)
    nc = len(M.blocks.cols.clusters)

    # row side, then the column side on the transposed view; the new weights
    # follow from the old ones through the basis change, Z_t R_t^T
    for row, t, size in ((True, t0, nr), (False, s0, nc)):
        Z = [None] * size
        store = None if weights is None else weights.side(row)
        fw = store[t.father.id] if t.father is not None else None
        weights_below(M, t, fw, row, weighted, eps, Z)
        result = adaptive_below(M.rb if row else M.cb, t, Z, control)
        _apply_adaptive(M, t, row, result)
        if store is not None:
            R = result[3]
            for c in _subtree(M.blocks.rows if row else M.blocks.cols, t):
                store[c.id] = Z[c.id] @ R[c.id].T
        _reorthogonalize_ancestors(M, t, row, weights)


def recompress(M, control=None):
    """Recompressed copy of M; bases are orthogonalized internally."""
    control = control or TruncationControl()
    out = M.copy()
    root = out.blocks.root
    update_block(out, root, np.zeros((root.row.size, 0)), np.zeros((root.col.size, 0)), control)
    return out


def from_dense(K, blocks, control=None, symmetric=False):
    """H^2 approximation of a dense matrix given in the permuted ordering.

    Each admissible block enters through a local update with its SVD
    truncated relative to the block (at ``control.eps``); the adaptive
    bases then absorb one block after the other.
    """
    control = control or TruncationControl()
    K = np.asarray(K, dtype=float)
    N = {b.id: K[b.row.start:b.row.end, b.col.start:b.col.end].copy()
         for b in blocks.inadmissible_leaves}
    S = {b.id: np.zeros((0, 0)) for b in blocks.admissible_leaves}
    M = H2Matrix(blocks, ClusterBasis.zero(blocks.rows), ClusterBasis.zero(blocks.cols), S, N,
                 symmetric=symmetric)
    W = init_weights(M, control)
    for b in blocks.admissible_leaves:
        U, sv, V = svd(K[b.row.start:b.row.end, b.col.start:b.col.end])
        if sv.size == 0 or sv[0] == 0.0:
            continue
        r = int(np.count_nonzero(sv > control.eps * sv[0]))
        update_block(M, b, U[:, :r] * sv[:r], V[:, :r], control, W)
    return M


__all__ = [
    "WeightSet", "init_weights", "build_adaptive_row_basis", "recompress", "update_block",
    "weight_matrix", "from_dense", "RELATIVE", "WEIGHTED",
]
