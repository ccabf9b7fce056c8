import math

import numpy as np
import pytest

from h2slice.dense import cholesky, dense_gen_eig
from h2slice.mesh import (DegenerateTriangle, Mesh, assemble_mass, assemble_stiffness, build_mesh, element_mass,
                          element_stiffness, read_matrix_market, read_mesh, reference_eigenvalues_unit_square,
                          write_matrix_market, write_mesh)

REF = np.array([[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]])


@pytest.mark.parametrize("geometry, refine, n", [
    ("unit_square", 0, 225), ("unit_square", 1, 961), ("unit_square", 2, 3969),
    ("l_shape", 0, 161), ("l_shape", 1, 705),
    ("unit_circle", 0, 481), ("u_shape", 0, 153),
])
def test_dof_counts(geometry, refine, n):
    assert build_mesh(geometry, refine).n == n


def test_unknown_geometry():
    with pytest.raises(ValueError):
        build_mesh("torus")
    with pytest.raises(ValueError):
        build_mesh("unit_square", -1)


def test_reference_element_stiffness():
    K = element_stiffness(REF, np.array([0.5]))[0]
    assert np.allclose(K, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]))


def test_reference_element_mass():
    M = element_mass(np.array([0.5]))[0]
    assert np.allclose(M, np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24)


def test_five_point_stencil():
    mesh = build_mesh("unit_square", 0)
    A = assemble_stiffness(mesh).tocsr()
    coords = mesh.dof_coordinates()
    i = int(np.argmin(np.linalg.norm(coords - 0.5, axis=1)))
    row = A[i].toarray().ravel()
    nz = row[np.abs(row) > 1e-14]
    assert math.isclose(row[i], 4.0)
    assert sorted(np.round(nz, 12)) == [-1, -1, -1, -1, 4]


@pytest.mark.parametrize("geometry", ["unit_square", "unit_circle", "l_shape", "u_shape"])
def test_symmetry_and_area(geometry):
    mesh = build_mesh(geometry, 0)
    A = assemble_stiffness(mesh)
    assert abs(A - A.T).max() == 0.0
    B = assemble_mass(mesh, eliminate=False)
    assert math.isclose(B.sum(), mesh.area(), rel_tol=1e-12)
    assert np.all(mesh.signed_areas() > 0)


def test_circle_area_converges():
    assert abs(build_mesh("unit_circle", 0).area() - math.pi) < 2e-2


def test_mass_cholesky():
    B = assemble_mass(build_mesh("l_shape", 0)).toarray()
    L = cholesky(B)
    assert np.allclose(L @ L.T, B)


def test_shared_pattern():
    mesh = build_mesh("u_shape", 0)
    A, B = assemble_stiffness(mesh), assemble_mass(mesh)
    assert np.array_equal(A.indptr, B.indptr) and np.array_equal(A.indices, B.indices)


def test_degenerate_triangle():
    mesh = Mesh(np.array([[0.0, 0], [1, 0], [2, 0]]), np.array([[0, 1, 2]]),
                np.ones(3, dtype=bool), -np.ones(3, dtype=np.int64))
    with pytest.raises(DegenerateTriangle):
        assemble_stiffness(mesh)


def test_reference_eigenvalues():
    pi2 = math.pi ** 2
    assert math.isclose(reference_eigenvalues_unit_square(1)[0], 2 * pi2)
    assert np.allclose(reference_eigenvalues_unit_square(3), [2 * pi2, 5 * pi2, 5 * pi2])
    brute = sorted(pi2 * (j * j + k * k) for j in range(1, 5) for k in range(1, 5))[:8]
    assert np.allclose(reference_eigenvalues_unit_square(8), brute)
    with pytest.raises(ValueError):
        reference_eigenvalues_unit_square(0)


def test_discrete_eigenvalue_near_continuous():
    mesh = build_mesh("unit_square", 0)
    lam = dense_gen_eig(assemble_stiffness(mesh).toarray(), assemble_mass(mesh).toarray())[0]
    assert abs(lam - 2 * math.pi ** 2) / (2 * math.pi ** 2) < 0.02


def test_io_round_trip(tmp_path):
    mesh = build_mesh("l_shape", 0)
    write_mesh(mesh, tmp_path / "m.txt")
    back = read_mesh(tmp_path / "m.txt")
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.array_equal(back.interior_index, mesh.interior_index)
    A = assemble_stiffness(mesh)
    write_matrix_market(A, tmp_path / "a.mtx")
    assert abs(read_matrix_market(tmp_path / "a.mtx") - A).max() == 0.0
