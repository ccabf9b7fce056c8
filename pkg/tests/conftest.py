import numpy as np
import pytest
import scipy.sparse as sp

from h2slice.cluster import build_block_tree, build_cluster_tree
from h2slice.compression import from_dense
from h2slice.control import TruncationControl
from h2slice.h2 import ClusterBasis, H2Matrix, from_sparse
from h2slice.mesh import assemble_mass, assemble_stiffness, build_mesh


class FemProblem:
    def __init__(self, refinements, leaf_size=32, eta=1.0):
        self.mesh = build_mesh("unit_square", refinements)
        self.A = assemble_stiffness(self.mesh)
        self.B = assemble_mass(self.mesh)
        self.tree = build_cluster_tree(self.mesh.dof_coordinates(), leaf_size)
        self.blocks = build_block_tree(self.tree, eta=eta)
        self.H = from_sparse(self.A, self.blocks, symmetric=True)

    @property
    def n(self):
        return self.A.shape[0]

    def dense_permuted(self, M=None):
        M = self.A if M is None else M
        p = self.tree.perm
        return M.toarray()[np.ix_(p, p)]


@pytest.fixture(scope="session")
def fem225():
    return FemProblem(0)


@pytest.fixture(scope="session")
def fem961():
    return FemProblem(1)


def kernel_matrix(points, kind="inverse"):
    d = np.linalg.norm(points[:, None] - points[None], axis=2)
    if kind == "log":
        return np.log(d + 0.05)
    return 1.0 / (d + 0.1)


def kernel_h2(n=300, seed=0, leaf_size=16, eps=1e-13, kind="inverse", dim=2):
    """Dense kernel on random points plus its H^2 approximation (permuted ordering)."""
    rng = np.random.default_rng(seed)
    pts = rng.random((n, dim))
    tree = build_cluster_tree(pts, leaf_size)
    blocks = build_block_tree(tree)
    K = kernel_matrix(tree.points, kind)
    return K, from_dense(K, blocks, TruncationControl(eps=eps, mode="relative"))


def diag_pencil_matrix(values):
    return sp.diags(np.asarray(values, dtype=float)).tocsr()


def random_basis(tree, rank, seed=0):
    rng = np.random.default_rng(seed)
    k = [rank] * len(tree.clusters)
    V = [rng.standard_normal((c.size, rank)) if c.is_leaf else None for c in tree.clusters]
    E = [rng.standard_normal((rank, rank)) if c.father is not None else None for c in tree.clusters]
    return ClusterBasis(tree, k, V, E, orthogonal=False)


def random_h2(n=200, rank=3, seed=0):
    rng = np.random.default_rng(seed)
    tree = build_cluster_tree(rng.random((n, 2)), 16)
    blocks = build_block_tree(tree)
    S = {b.id: rng.standard_normal((rank, rank)) for b in blocks.admissible_leaves}
    N = {b.id: rng.standard_normal((b.row.size, b.col.size)) for b in blocks.inadmissible_leaves}
    return H2Matrix(blocks, random_basis(tree, rank, seed + 1), random_basis(tree, rank, seed + 2), S, N)
