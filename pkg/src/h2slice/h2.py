"""H^2-matrices: nested cluster bases, coupling matrices and dense nearfield blocks.

All index sets are contiguous ranges in the permuted order fixed by the
cluster tree, so restricting a vector to a cluster is a slice.
"""

import io
import struct

import numpy as np
import scipy.sparse as sp

from .cluster import Block, BlockTree, Cluster, ClusterTree
from .dense import thin_qr

DENSE_LIMIT = 5000


class StructureMismatch(ValueError):
    def __init__(self, block, message=None):
        super().__init__(message or f"nonzero entries inside admissible block {block!r}")
        self.block = block


class TooLarge(ValueError):
    pass


class NotOrthogonal(ValueError):
    pass


def _subtree(tree, t):
    cache = tree.__dict__.setdefault("_subtree_cache", {})
    out = cache.get(t.id)
    if out is None:
        out = cache[t.id] = tree.subtree(t)
    return out


class ClusterBasis:
    """Nested cluster basis.

    ``V[t.id]`` holds the leaf matrix for leaves, ``E[t.id]`` the transfer
    matrix from cluster t to its father (``k_t x k_father``), so that the
    father's basis restricted to t equals ``V_t E_t``.
    """

    def __init__(self, tree, k, V, E, orthogonal=False):
        self.tree = tree
        self.k = k
        self.V = V
        self.E = E
        self.orthogonal = orthogonal

    @classmethod
    def zero(cls, tree):
        nc = len(tree.clusters)
        k = [0] * nc
        V = [np.zeros((c.size, 0)) if c.is_leaf else None for c in tree.clusters]
        E = [np.zeros((0, 0)) if c.father is not None else None for c in tree.clusters]
        return cls(tree, k, V, E, orthogonal=True)

    def copy(self):
        return ClusterBasis(
            self.tree, list(self.k),
            [None if v is None else v.copy() for v in self.V],
            [None if e is None else e.copy() for e in self.E],
            self.orthogonal,
        )

    def subtree(self, t):
        return _subtree(self.tree, t)

    def expand(self, t):
        """Materialize ``V_t`` (|t| x k_t)."""
        if t.is_leaf:
            return self.V[t.id]
        return np.concatenate([self.expand(s) @ self.E[s.id] for s in t.sons])

    def forward(self, t0, X):
        """``V_t^T X|_t`` for every t below t0; rows of X are indexed relative to t0."""
        out = {}
        V, E, k = self.V, self.E, self.k
        off = t0.start
        m = X.shape[1]
        for t in reversed(self.subtree(t0)):
            if t.is_leaf:
                out[t.id] = V[t.id].T @ X[t.start - off:t.end - off]
            else:
                acc = np.zeros((k[t.id], m))
                for s in t.sons:
                    if k[s.id]:
                        acc += E[s.id].T @ out[s.id]
                out[t.id] = acc
        return out

    def backward(self, t0, yh, Y):
        """Add ``V_t yh[t]`` into Y for all entries of yh below t0 (yh is consumed)."""
        V, E = self.V, self.E
        off = t0.start
        for t in self.subtree(t0):
            cur = yh.pop(t.id, None)
            if cur is None:
                continue
            if t.is_leaf:
                if cur.shape[0]:
                    Y[t.start - off:t.end - off] += V[t.id] @ cur
            else:
                for s in t.sons:
                    push = E[s.id] @ cur
                    prev = yh.get(s.id)
                    yh[s.id] = push if prev is None else prev + push

    def max_rank(self):
        return max(self.k) if self.k else 0

    def storage(self):
        total = 0
        for v in self.V:
            if v is not None:
                total += v.size
        for e in self.E:
            if e is not None:
                total += e.size
        return total

    def orthogonality_error(self):
        err = 0.0
        for t in self.tree.clusters:
            Vt = self.expand(t)
            if Vt.shape[1]:
                err = max(err, float(np.abs(Vt.T @ Vt - np.eye(Vt.shape[1])).max()))
        return err


def orthogonalize_basis(basis):
    """Recursive QR: returns an orthogonal basis Q and per-cluster C with ``Q_t C_t = V_t``."""
    out = basis.copy()
    C = {}
    tree = basis.tree
    for t in reversed(tree.subtree(tree.root)):
        if t.is_leaf:
            Q, R = thin_qr(basis.V[t.id])
            out.V[t.id] = Q
        else:
            stacked = np.concatenate([C[s.id] @ basis.E[s.id] for s in t.sons])
            Q, R = thin_qr(stacked)
            off = 0
            for s in t.sons:
                out.E[s.id] = Q[off:off + out.k[s.id]]
                off += out.k[s.id]
        out.k[t.id] = R.shape[0]
        C[t.id] = R
    out.orthogonal = True
    return out, C


class BlockLists:
    """Admissible blocks attached to each row and each column cluster."""

    def __init__(self, blocks, present):
        nr = len(blocks.rows.clusters)
        nc = len(blocks.cols.clusters)
        self.row = [[] for _ in range(nr)]
        self.col = [[] for _ in range(nc)]
        for b in blocks.admissible_leaves:
            if b.id in present:
                self.row[b.row.id].append(b)
                self.col[b.col.id].append(b)


def _leaves_under(blocks, b):
    cache = blocks.__dict__.setdefault("_leaf_cache", {})
    out = cache.get(b.id)
    if out is None:
        adm, inadm = [], []
        for x in blocks.subtree(b):
            if x.is_leaf:
                (adm if x.admissible else inadm).append(x)
        out = cache[b.id] = (adm, inadm)
    return out


class H2Matrix:
    def __init__(self, blocks, rb, cb, S, N, symmetric=False, lower_only=False):
        self.blocks = blocks
        self.rb = rb
        self.cb = cb
        self.S = S
        self.N = N
        self.symmetric = symmetric
        self.lower_only = lower_only
        self._lists = None

    @property
    def n(self):
        return self.blocks.rows.n

    @property
    def shape(self):
        return (self.blocks.rows.n, self.blocks.cols.n)

    @property
    def lists(self):
        if self._lists is None:
            self._lists = BlockLists(self.blocks, self.S)
        return self._lists

    def copy(self):
        return H2Matrix(
            self.blocks, self.rb.copy(), self.cb.copy(),
            {key: val.copy() for key, val in self.S.items()},
            {key: val.copy() for key, val in self.N.items()},
            self.symmetric, self.lower_only,
        )

    def lower_part(self):
        """Copy keeping only blocks on or below the diagonal."""
        def lower(b):
            return b.row.start >= b.col.start

        bl = self.blocks.blocks
        return H2Matrix(
            self.blocks, self.rb.copy(), self.cb.copy(),
            {key: val.copy() for key, val in self.S.items() if lower(bl[key])},
            {key: val.copy() for key, val in self.N.items() if lower(bl[key])},
            False, True,
        )

    def max_rank(self):
        return max(self.rb.max_rank(), self.cb.max_rank())

    # products -----------------------------------------------------------

    def block_matmat(self, b, X, trans=False):
        """``M|_b X`` (or ``(M|_b)^T X``) with X indexed relative to the block's column (row) range."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return self.block_matmat(b, X[:, None], trans)[:, 0]
        if trans:
            tin, tout, bin_, bout = b.row, b.col, self.rb, self.cb
        else:
            tin, tout, bin_, bout = b.col, b.row, self.cb, self.rb
        m = X.shape[1]
        Y = np.zeros((tout.size, m))
        adm, inadm = _leaves_under(self.blocks, b)
        S, N = self.S, self.N
        oin, oout = tin.start, tout.start
        for x in inadm:
            blk = N.get(x.id)
            if blk is None:
                continue
            if trans:
                Y[x.col.start - oout:x.col.end - oout] += blk.T @ X[x.row.start - oin:x.row.end - oin]
            else:
                Y[x.row.start - oout:x.row.end - oout] += blk @ X[x.col.start - oin:x.col.end - oin]
        live = [x for x in adm if x.id in S and S[x.id].size]
        if live:
            xh = bin_.forward(tin, X)
            yh = {}
            for x in live:
                if trans:
                    contrib = S[x.id].T @ xh[x.row.id]
                    key = x.col.id
                else:
                    contrib = S[x.id] @ xh[x.col.id]
                    key = x.row.id
                prev = yh.get(key)
                yh[key] = contrib if prev is None else prev + contrib
            bout.backward(tout, yh, Y)
        return Y

    def matvec(self, x):
        return self.block_matmat(self.blocks.root, x)

    def rmatvec(self, x):
        return self.block_matmat(self.blocks.root, x, trans=True)

    def __matmul__(self, x):
        return self.matvec(x)

    def block_dense(self, b, trans=False):
        """Dense copy of the block b (transposed if requested)."""
        size = b.row.size if trans else b.col.size
        return self.block_matmat(b, np.eye(size), trans)

    def to_dense(self, limit=DENSE_LIMIT):
        if max(self.shape) > limit:
            raise TooLarge(f"dimension {max(self.shape)} exceeds dense limit {limit}")
        out = np.zeros(self.shape)
        for b in self.blocks.inadmissible_leaves:
            blk = self.N.get(b.id)
            if blk is not None:
                out[b.row.start:b.row.end, b.col.start:b.col.end] = blk
        for b in self.blocks.admissible_leaves:
            S = self.S.get(b.id)
            if S is not None and S.size:
                out[b.row.start:b.row.end, b.col.start:b.col.end] = (
                    self.rb.expand(b.row) @ S @ self.cb.expand(b.col).T)
        return out

    def frobenius_norm(self):
        total = sum(float(np.sum(v * v)) for v in self.N.values())
        for b in self.blocks.admissible_leaves:
            S = self.S.get(b.id)
            if S is not None and S.size:
                blk = self.rb.expand(b.row) @ S @ self.cb.expand(b.col).T
                total += float(np.sum(blk * blk))
        return total ** 0.5

    # structure ----------------------------------------------------------

    def orthogonalize(self):
        """Replace both bases by orthogonal ones, adjusting couplings (in place)."""
        rb, Cr = orthogonalize_basis(self.rb)
        cb, Cc = orthogonalize_basis(self.cb)
        for b in self.blocks.admissible_leaves:
            S = self.S.get(b.id)
            if S is not None:
                self.S[b.id] = Cr[b.row.id] @ S @ Cc[b.col.id].T
        self.rb, self.cb = rb, cb
        return self

    def check_symmetry(self, tol=0.0):
        """Mirror consistency of couplings and nearfield for symmetric storage."""
        lookup = self.blocks.block
        for b in self.blocks.inadmissible_leaves:
            m = lookup(b.col, b.row)
            if np.abs(self.N[b.id] - self.N[m.id].T).max(initial=0.0) > tol:
                return False
        for b in self.blocks.admissible_leaves:
            m = lookup(b.col, b.row)
            if np.abs(self.S[b.id] - self.S[m.id].T).max(initial=0.0) > tol:
                return False
        return True


def permuted(matrix, tree):
    P = sp.csr_matrix(matrix)[tree.perm][:, tree.perm]
    P.sort_indices()
    return P.tocsr()


def _leaf_lookup(tree):
    owner = np.empty(tree.n, dtype=np.int64)
    for c in tree.leaves():
        owner[c.start:c.end] = c.id
    return owner


def nearfield_blocks(matrix, blocks, perm=True, check=True):
    """Dense inadmissible leaves of a sparse matrix; raises if nonzeros fall elsewhere."""
    P = sp.coo_matrix(permuted(matrix, blocks.rows) if perm else matrix)
    rown = _leaf_lookup(blocks.rows)
    coln = _leaf_lookup(blocks.cols)
    nc = len(blocks.cols.clusters)
    keys = rown[P.row] * nc + coln[P.col]
    near = {b.row.id * nc + b.col.id: b for b in blocks.inadmissible_leaves}
    out = {b.id: np.zeros((b.row.size, b.col.size)) for b in blocks.inadmissible_leaves}
    for key, i, j, v in zip(keys.tolist(), P.row.tolist(), P.col.tolist(), P.data.tolist()):
        b = near.get(key)
        if b is None:
            if check and v != 0.0:
                bad = _containing_leaf(blocks, i, j)
                raise StructureMismatch(bad)
            continue
        out[b.id][i - b.row.start, j - b.col.start] += v
    return out


def _containing_leaf(blocks, i, j):
    b = blocks.root
    while not b.is_leaf:
        for row in b.sons:
            for x in row:
                if x.row.start <= i < x.row.end and x.col.start <= j < x.col.end:
                    b = x
                    break
            else:
                continue
            break
    return b


def from_sparse(matrix, blocks, symmetric=None):
    """Exact H^2 representation of a sparse matrix whose far field vanishes.

    ``matrix`` is given in the original ordering; the result lives in the
    permuted ordering of ``blocks.rows``.
    """
    N = nearfield_blocks(matrix, blocks)
    S = {b.id: np.zeros((0, 0)) for b in blocks.admissible_leaves}
    if symmetric is None:
        diff = abs(sp.csr_matrix(matrix) - sp.csr_matrix(matrix).T)
        symmetric = diff.nnz == 0 or diff.max() == 0.0
    return H2Matrix(blocks, ClusterBasis.zero(blocks.rows), ClusterBasis.zero(blocks.cols),
                    S, N, symmetric=symmetric)


def storage_report(M):
    coupling = sum(s.size for s in M.S.values())
    near = sum(v.size for v in M.N.values())
    basis = M.rb.storage() + (0 if M.cb is M.rb else M.cb.storage())
    return {"coupling": coupling, "nearfield": near, "basis": basis,
            "total": coupling + near + basis}


# binary format ----------------------------------------------------------

MAGIC = b"H2SLICE\x00"
VERSION = 1


class FormatError(ValueError):
    pass


def _write_ints(fh, values):
    arr = np.asarray(values, dtype="<i8").ravel()
    fh.write(struct.pack("<q", arr.size))
    fh.write(arr.tobytes())


def _read_ints(fh):
    (count,) = struct.unpack("<q", _read_exact(fh, 8))
    if count < 0:
        raise FormatError("negative section length")
    return np.frombuffer(_read_exact(fh, 8 * count), dtype="<i8").astype(np.int64)


def _read_exact(fh, size):
    data = fh.read(size)
    if len(data) != size:
        raise FormatError("unexpected end of file")
    return data


def _write_tree(fh, tree):
    _write_ints(fh, [tree.n, len(tree.clusters), tree.leaf_size, tree.points.shape[1]])
    _write_ints(fh, tree.perm)
    rows = []
    for c in tree.clusters:
        sons = [s.id for s in c.sons] + [-1] * (2 - len(c.sons))
        rows.append([c.start, c.end, c.level, -1 if c.father is None else c.father.id] + sons)
    _write_ints(fh, rows)
    fh.write(np.ascontiguousarray(tree.points, dtype="<f8").tobytes())
    fh.write(np.array([np.r_[c.bmin, c.bmax] for c in tree.clusters], dtype="<f8").tobytes())


def _read_tree(fh):
    n, nc, leaf_size, dim = _read_ints(fh).tolist()
    perm = _read_ints(fh)
    info = _read_ints(fh).reshape(nc, 6)
    points = np.frombuffer(_read_exact(fh, 8 * n * dim), dtype="<f8").reshape(n, dim).copy()
    boxes = np.frombuffer(_read_exact(fh, 16 * nc * dim), dtype="<f8").reshape(nc, 2 * dim)
    clusters = [Cluster(i, int(r[0]), int(r[1]), int(r[2]), boxes[i, :dim].copy(), boxes[i, dim:].copy())
                for i, r in enumerate(info)]
    for c, r in zip(clusters, info):
        c.father = None if r[3] < 0 else clusters[r[3]]
        c.sons = tuple(clusters[s] for s in r[4:] if s >= 0)
    return ClusterTree(clusters[0], clusters, perm, leaf_size, points)


def _write_blocks(fh, blocks):
    rows = []
    for b in blocks.blocks:
        kind = 1 if b.admissible else (0 if b.is_leaf else 2)
        rows.append([b.row.id, b.col.id, kind])
    _write_ints(fh, [len(rows)])
    _write_ints(fh, rows)
    fh.write(struct.pack("<d", blocks.eta))


def _rebuild_blocks(rows, cols, info, eta):
    bt = BlockTree.__new__(BlockTree)
    bt.rows, bt.cols, bt.eta = rows, cols, eta
    bt.blocks, bt.lookup = [], {}
    it = iter(info.tolist())

    def build(t, s):
        r, c, kind = next(it)
        if r != t.id or c != s.id:
            raise FormatError("block tree does not match cluster trees")
        b = Block(len(bt.blocks), t, s)
        bt.blocks.append(b)
        bt.lookup[(t.id, s.id)] = b
        if kind == 1:
            b.admissible = True
        elif kind == 2:
            b.sons = [[build(ti, si) for si in s.parts()] for ti in t.parts()]
        return b

    bt.root = build(rows.root, cols.root)
    bt.admissible_leaves = [b for b in bt.blocks if b.admissible]
    bt.inadmissible_leaves = [b for b in bt.blocks if b.is_leaf and not b.admissible]
    return bt


def dumps(M):
    fh = io.BytesIO()
    fh.write(MAGIC)
    flags = int(M.symmetric) | int(M.lower_only) << 1 | int(M.rb.orthogonal) << 2 | int(M.cb.orthogonal) << 3
    fh.write(struct.pack("<II", VERSION, flags))
    same = M.blocks.cols is M.blocks.rows
    _write_ints(fh, [int(same)])
    _write_tree(fh, M.blocks.rows)
    if not same:
        _write_tree(fh, M.blocks.cols)
    _write_blocks(fh, M.blocks)
    # ranks, then presence flags, then all float payloads in declared order
    for basis in (M.rb, M.cb):
        _write_ints(fh, basis.k)
    _write_ints(fh, sorted(M.S))
    _write_ints(fh, sorted(M.N))
    payload = []
    for basis in (M.rb, M.cb):
        for t in basis.tree.clusters:
            if t.is_leaf:
                payload.append(basis.V[t.id])
            if t.father is not None:
                payload.append(basis.E[t.id])
    payload.extend(M.S[key] for key in sorted(M.S))
    payload.extend(M.N[key] for key in sorted(M.N))
    for arr in payload:
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return fh.getvalue()


def loads(data):
    fh = io.BytesIO(data)
    if fh.read(len(MAGIC)) != MAGIC:
        raise FormatError("not an H2 dump (bad magic)")
    version, flags = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} (expected {VERSION})")
    (same,) = _read_ints(fh).tolist()
    rows = _read_tree(fh)
    cols = rows if same else _read_tree(fh)
    (nblocks,) = _read_ints(fh).tolist()
    info = _read_ints(fh).reshape(nblocks, 3)
    (eta,) = struct.unpack("<d", _read_exact(fh, 8))
    blocks = _rebuild_blocks(rows, cols, info, eta)
    kr = _read_ints(fh).tolist()
    kc = _read_ints(fh).tolist()
    skeys = _read_ints(fh).tolist()
    nkeys = _read_ints(fh).tolist()

    def take(shape):
        count = int(np.prod(shape))
        return np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape).copy()

    bases = []
    for tree, k, bit in ((rows, kr, 4), (cols, kc, 8)):
        V = [None] * len(tree.clusters)
        E = [None] * len(tree.clusters)
        for t in tree.clusters:
            if t.is_leaf:
                V[t.id] = take((t.size, k[t.id]))
            if t.father is not None:
                E[t.id] = take((k[t.id], k[t.father.id]))
        bases.append(ClusterBasis(tree, list(k), V, E, orthogonal=bool(flags & bit)))
    bl = blocks.blocks
    S = {key: take((kr[bl[key].row.id], kc[bl[key].col.id])) for key in skeys}
    N = {key: take((bl[key].row.size, bl[key].col.size)) for key in nkeys}
    if fh.read(1):
        raise FormatError("trailing bytes after payload")
    return H2Matrix(blocks, bases[0], bases[1], S, N,
                    symmetric=bool(flags & 1), lower_only=bool(flags & 2))


def dump(M, path):
    with open(path, "wb") as fh:
        fh.write(dumps(M))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
