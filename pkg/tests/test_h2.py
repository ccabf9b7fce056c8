import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_basis, random_h2
from h2slice.cluster import build_block_tree, build_cluster_tree
from h2slice.h2 import (ClusterBasis, FormatError, H2Matrix, StructureMismatch, TooLarge, dump, dumps, from_sparse,
                        load, loads, nearfield_blocks, orthogonalize_basis, permuted, storage_report)


def test_identity_conversion():
    tree = build_cluster_tree(np.random.default_rng(0).random((100, 2)), 16)
    blocks = build_block_tree(tree)
    H = from_sparse(sp.identity(100, format="csr"), blocks)
    for b in blocks.inadmissible_leaves:
        expect = np.eye(b.row.size) if b.row is b.col else np.zeros((b.row.size, b.col.size))
        assert np.array_equal(H.N[b.id], expect)
    assert all(S.size == 0 for S in H.S.values())
    x = np.random.default_rng(1).random(100)
    assert np.array_equal(H.matvec(x), x)
    report = storage_report(H)
    assert report["nearfield"] == sum(b.row.size * b.col.size for b in blocks.inadmissible_leaves)
    assert report["coupling"] == 0
    assert report["total"] == report["coupling"] + report["nearfield"] + report["basis"]


def test_fem_matvec_and_round_trip(fem225):
    x = np.random.default_rng(2).standard_normal(fem225.n)
    p = fem225.tree.perm
    y = fem225.H.matvec(x)
    ref = (fem225.A @ x[np.argsort(p)])[p]
    assert np.linalg.norm(y - ref) <= 1e-14 * np.linalg.norm(ref)
    dense = fem225.dense_permuted()
    assert np.array_equal(fem225.H.to_dense(), dense)
    assert np.allclose(fem225.H.rmatvec(x), dense.T @ x, rtol=0, atol=1e-13)
    assert np.isclose(fem225.H.frobenius_norm(), np.linalg.norm(dense))
    assert fem225.H.check_symmetry()


def test_permuted_matches_dense(fem225):
    P = permuted(fem225.A, fem225.tree)
    assert np.array_equal(P.toarray(), fem225.dense_permuted())


def test_zero_matrix():
    tree = build_cluster_tree(np.random.default_rng(0).random((50, 2)), 8)
    H = from_sparse(sp.csr_matrix((50, 50)), build_block_tree(tree))
    assert not H.matvec(np.ones(50)).any()


def test_far_field_violation():
    tree = build_cluster_tree(np.random.default_rng(0).random((100, 2)), 8)
    with pytest.raises(StructureMismatch):
        from_sparse(sp.csr_matrix(np.ones((100, 100))), build_block_tree(tree))


def test_nearfield_blocks_dense_equal(fem225):
    N = nearfield_blocks(fem225.A, fem225.blocks)
    dense = fem225.dense_permuted()
    for b in fem225.blocks.inadmissible_leaves:
        assert np.array_equal(N[b.id], dense[b.row.start:b.row.end, b.col.start:b.col.end])


def test_diagonal_to_dense():
    tree = build_cluster_tree(np.arange(40.0)[:, None], 8)
    d = np.arange(1.0, 41.0)
    H = from_sparse(sp.diags(d).tocsr(), build_block_tree(tree))
    assert np.array_equal(H.to_dense(), np.diag(d[tree.perm]))


def test_single_admissible_root_block():
    rows = build_cluster_tree(np.linspace(0, 0.1, 5)[:, None], 8)
    cols = build_cluster_tree(np.linspace(10, 10.1, 4)[:, None], 8)
    blocks = build_block_tree(rows, cols)
    assert blocks.root.admissible
    v = np.arange(1.0, 6.0)[:, None]
    w = np.arange(1.0, 5.0)[:, None]
    H = H2Matrix(blocks, ClusterBasis(rows, [1], [v], [None]), ClusterBasis(cols, [1], [w], [None]),
                 {0: np.array([[2.0]])}, {})
    assert np.allclose(H.to_dense(), 2.0 * v @ w.T)
    assert np.allclose(H.matvec(np.ones(4)), 2.0 * v[:, 0] * w.sum())


def test_orthogonalize_hand_example():
    tree = build_cluster_tree(np.array([[0.0], [1.0]]), 4)
    basis = ClusterBasis(tree, [1], [np.array([[3.0], [4.0]])], [None])
    Q, C = orthogonalize_basis(basis)
    assert np.allclose(Q.V[0][:, 0], [0.6, 0.8])
    assert np.allclose(C[0], [[5.0]])


def test_orthogonalize_already_orthogonal():
    tree = build_cluster_tree(np.random.default_rng(0).random((60, 2)), 16)
    Q, _ = orthogonalize_basis(random_basis(tree, 2))
    Q2, C = orthogonalize_basis(Q)
    for t in tree.clusters:
        assert np.allclose(np.abs(C[t.id]), np.eye(2), atol=1e-12)
    assert Q2.orthogonality_error() < 1e-12


def test_orthogonalize_preserves_matrix():
    H = random_h2()
    before = H.to_dense()
    H.orthogonalize()
    assert H.rb.orthogonal and H.rb.orthogonality_error() < 1e-12
    assert np.linalg.norm(H.to_dense() - before) <= 1e-12 * np.linalg.norm(before)


def test_nestedness_two_routes():
    H = random_h2(seed=3)
    tree = H.rb.tree
    for t in tree.clusters:
        if t.is_leaf:
            continue
        top = H.rb.expand(t)
        for s in t.sons:
            part = top[s.start - t.start:s.end - t.start]
            assert np.allclose(part, H.rb.expand(s) @ H.rb.E[s.id], atol=1e-14 * np.abs(top).max())
        # forward transform agrees with the materialized basis
        X = np.random.default_rng(t.id).standard_normal((t.size, 2))
        fw = H.rb.forward(t, X)[t.id]
        assert np.allclose(fw, top.T @ X)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_matvec_linear(seed):
    H = random_h2(n=120, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 120))
    lhs = H.matvec(x + y)
    rhs = H.matvec(x) + H.matvec(y)
    assert np.linalg.norm(lhs - rhs) <= 1e-13 * np.linalg.norm(lhs)
    assert np.allclose(H.matvec(x), H.to_dense() @ x)
    assert np.allclose(H.rmatvec(x), H.to_dense().T @ x)


def test_to_dense_limit():
    H = random_h2(n=100)
    with pytest.raises(TooLarge):
        H.to_dense(limit=50)


def test_lower_part(fem225):
    L = fem225.H.lower_part()
    assert L.lower_only
    assert np.array_equal(L.to_dense(), np.tril(fem225.dense_permuted(), 0) + np.triu(
        _diag_block_upper(fem225), 1))


def _diag_block_upper(prob):
    # diagonal leaf blocks are kept whole, so their strict upper part stays
    out = np.zeros((prob.n, prob.n))
    dense = prob.dense_permuted()
    for b in prob.blocks.inadmissible_leaves:
        if b.row is b.col:
            sl = slice(b.row.start, b.row.end)
            out[sl, sl] = dense[sl, sl]
    return out


def test_binary_round_trip(tmp_path):
    H = random_h2(seed=5)
    H.orthogonalize()
    dump(H, tmp_path / "m.h2")
    back = load(tmp_path / "m.h2")
    x = np.random.default_rng(0).standard_normal(H.n)
    assert np.linalg.norm(back.matvec(x) - H.matvec(x)) <= 1e-15 * np.linalg.norm(H.matvec(x))
    assert back.rb.orthogonal == H.rb.orthogonal


def test_binary_rejections():
    data = dumps(random_h2(n=60))
    with pytest.raises(FormatError):
        loads(b"XXXXXXXX" + data[8:])
    bumped = bytearray(data)
    bumped[8] += 1
    with pytest.raises(FormatError):
        loads(bytes(bumped))
    with pytest.raises(FormatError):
        loads(data[:-5])
    with pytest.raises(FormatError):
        loads(data + b"\x00")
