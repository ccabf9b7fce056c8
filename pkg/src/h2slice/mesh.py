"""Triangular meshes of the model geometries and P1 finite element matrices.

Dirichlet boundary conditions are imposed by elimination, so the matrices
are indexed by interior vertices only.
"""

from dataclasses import dataclass
import heapq
import math

import numpy as np
import scipy.io
import scipy.sparse as sp

GEOMETRIES = ("unit_square", "unit_circle", "l_shape", "u_shape")

# red refinements applied to each coarse mesh to reach the r=0 level
_BASE_REFINEMENTS = {"unit_square": 4, "unit_circle": 4, "l_shape": 3, "u_shape": 2}


class DegenerateTriangle(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray      # (nv, 2)
    triangles: np.ndarray     # (nt, 3), counter-clockwise
    boundary: np.ndarray      # (nv,) bool
    interior_index: np.ndarray  # (nv,) dof index, -1 on the boundary

    @property
    def n(self):
        return int(np.count_nonzero(~self.boundary))

    def dof_coordinates(self):
        coords = np.empty((self.n, 2))
        mask = ~self.boundary
        coords[self.interior_index[mask]] = self.vertices[mask]
        return coords

    def signed_areas(self):
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def area(self):
        return float(self.signed_areas().sum())


def _cells_mesh(cells, h):
    """Split axis-aligned squares of width h into two triangles each.

    All squares are cut along the same diagonal, which keeps the stiffness
    matrix on uniform grids equal to the five-point stencil.
    """
    index = {}
    verts = []

    def vid(i, j):
        key = (i, j)
        if key not in index:
            index[key] = len(verts)
            verts.append((i * h, j * h))
        return index[key]

    tris = []
    for i, j in cells:
        v00, v10, v11, v01 = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
        tris.append((v00, v10, v11))
        tris.append((v00, v11, v01))
    return np.array(verts, dtype=float), np.array(tris, dtype=np.int64)


def _coarse(geometry):
    if geometry == "unit_square":
        return _cells_mesh([(0, 0)], 1.0)
    if geometry == "l_shape":
        return _cells_mesh([(0, 0), (1, 0), (0, 1)], 0.5)
    if geometry == "u_shape":
        # [0,1]^2 without the slot [0.25,0.75] x [0.5,1]
        cells = [(i, j) for i in range(4) for j in range(4) if not (i in (1, 2) and j >= 2)]
        return _cells_mesh(cells, 0.25)
    if geometry == "unit_circle":
        verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        tris = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]], dtype=np.int64)
        return verts, tris
    raise ValueError(f"unknown geometry {geometry!r}; expected one of {GEOMETRIES}")


def _edges(triangles):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    uniq, inverse, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    return uniq, inverse.reshape(-1), counts


def _boundary_flags(nv, triangles):
    uniq, _, counts = _edges(triangles)
    flags = np.zeros(nv, dtype=bool)
    flags[uniq[counts == 1].ravel()] = True
    return flags


def refine(vertices, triangles, on_circle=False):
    """One step of red refinement; every triangle is split into four."""
    nv = len(vertices)
    nt = len(triangles)
    uniq, inverse, counts = _edges(triangles)
    mids = 0.5 * (vertices[uniq[:, 0]] + vertices[uniq[:, 1]])
    if on_circle:
        bnd = counts == 1
        mids[bnd] /= np.linalg.norm(mids[bnd], axis=1)[:, None]
    new_vertices = np.vstack([vertices, mids])
    m = nv + inverse.reshape(3, nt).T  # midpoints of edges (01, 12, 20)
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    m01, m12, m20 = m[:, 0], m[:, 1], m[:, 2]
    children = np.concatenate([
        np.stack([a, m01, m20], axis=1),
        np.stack([m01, b, m12], axis=1),
        np.stack([m20, m12, c], axis=1),
        np.stack([m01, m12, m20], axis=1),
    ])
    return new_vertices, children


def build_mesh(geometry, refinements=0):
    if refinements < 0:
        raise ValueError("refinements must be nonnegative")
    vertices, triangles = _coarse(geometry)
    for _ in range(_BASE_REFINEMENTS[geometry] + refinements):
        vertices, triangles = refine(vertices, triangles, on_circle=geometry == "unit_circle")
    boundary = _boundary_flags(len(vertices), triangles)
    interior_index = np.full(len(vertices), -1, dtype=np.int64)
    interior_index[~boundary] = np.arange(np.count_nonzero(~boundary))
    return Mesh(vertices, triangles, boundary, interior_index)


def _element_geometry(mesh):
    p = mesh.vertices[mesh.triangles]
    area = mesh.signed_areas()
    bad = np.flatnonzero(area < 1e-14)
    if bad.size:
        raise DegenerateTriangle(f"triangle {bad[0]} has area {area[bad[0]]:.3e}")
    return p, area


def element_stiffness(p, area):
    """P1 stiffness matrices for triangles with corner coordinates p (nt, 3, 2)."""
    # gradients of the barycentric coordinates: rows are grad phi_i
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = 2.0 * area
    g1 = np.stack([e2[:, 1], -e2[:, 0]], axis=1) / det[:, None]
    g2 = np.stack([-e1[:, 1], e1[:, 0]], axis=1) / det[:, None]
    g0 = -g1 - g2
    G = np.stack([g0, g1, g2], axis=1)
    return area[:, None, None] * np.einsum("tik,tjk->tij", G, G)


def element_mass(area):
    ref = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    return area[:, None, None] * ref


def _assemble(mesh, local, eliminate=True):
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    vals = local.ravel()
    if eliminate:
        ri = mesh.interior_index[rows]
        ci = mesh.interior_index[cols]
        keep = (ri >= 0) & (ci >= 0)
        rows, cols, vals, size = ri[keep], ci[keep], vals[keep], mesh.n
    else:
        size = len(mesh.vertices)
    # explicit zeros are kept so stiffness and mass share one pattern
    M = sp.coo_matrix((vals, (rows, cols)), shape=(size, size)).tocsr()
    M.sum_duplicates()
    M.sort_indices()
    return M


def assemble_stiffness(mesh, eliminate=True):
    p, area = _element_geometry(mesh)
    return _assemble(mesh, element_stiffness(p, area), eliminate)


def assemble_mass(mesh, eliminate=True):
    _, area = _element_geometry(mesh)
    return _assemble(mesh, element_mass(area), eliminate)


def reference_eigenvalues_unit_square(count):
    """Smallest eigenvalues pi^2 (j^2 + k^2) of the Dirichlet Laplacian on the unit square."""
    if count < 1:
        raise ValueError("count must be positive")
    # walk the (j, k) lattice in increasing order of j^2 + k^2
    heap = [(2, 1, 1)]
    seen = {(1, 1)}
    out = []
    while len(out) < count:
        q, j, k = heapq.heappop(heap)
        out.append(math.pi ** 2 * q)
        for jj, kk in ((j + 1, k), (j, k + 1)):
            if (jj, kk) not in seen:
                seen.add((jj, kk))
                heapq.heappush(heap, (jj * jj + kk * kk, jj, kk))
    return out


def write_mesh(mesh, path):
    with open(path, "w") as fh:
        fh.write(f"{len(mesh.vertices)} {len(mesh.triangles)}\n")
        for (x, y), flag in zip(mesh.vertices, mesh.boundary):
            fh.write("%.17g %.17g %d\n" % (x, y, flag))
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def read_mesh(path):
    with open(path) as fh:
        nv, nt = (int(v) for v in fh.readline().split())
        data = [fh.readline().split() for _ in range(nv)]
        tris = [fh.readline().split() for _ in range(nt)]
    vertices = np.array([[float(x), float(y)] for x, y, _ in data])
    boundary = np.array([bool(int(f)) for _, _, f in data])
    triangles = np.array(tris, dtype=np.int64).reshape(nt, 3)
    interior_index = np.full(nv, -1, dtype=np.int64)
    interior_index[~boundary] = np.arange(np.count_nonzero(~boundary))
    return Mesh(vertices, triangles, boundary, interior_index)


def write_matrix_market(matrix, path):
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), symmetry="symmetric", precision=17)


def read_matrix_market(path):
    M = sp.csr_matrix(scipy.io.mmread(str(path)))
    M.sort_indices()
    return M
