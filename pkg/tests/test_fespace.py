import numpy as np
import pytest
import scipy.sparse as sparse

from rtlod.coeff import checkerboard, constant_field
from rtlod.fespace import (
    PressureSpace,
    RTSpace,
    TwoGrid,
    UnsupportedDegreeError,
    assemble_div_matrix,
    assemble_load,
    assemble_weighted_mass,
    evaluate_field,
    prolongation_matrix,
    triangle_mass_blocks,
)
from rtlod.mesh import build_structured_mesh, refine_uniform


def two_grid(nc, levels, nx=None):
    coarse = build_structured_mesh(nc, nx or nc)
    fine, nm = refine_uniform(coarse, levels)
    return TwoGrid(coarse, fine, nm)


def test_degree_one_not_built():
    mesh = build_structured_mesh(2, 2)
    with pytest.raises(UnsupportedDegreeError):
        RTSpace(mesh, degree=1)
    with pytest.raises(UnsupportedDegreeError):
        PressureSpace(mesh, degree=1)


def test_dof_counts():
    mesh = build_structured_mesh(4, 4)
    V = RTSpace(mesh)
    Q = PressureSpace(mesh)
    assert V.num_dofs == (~mesh.boundary_edge).sum()
    assert Q.num_dofs == mesh.num_triangles
    assert Q.measures.sum() == pytest.approx(1.0)


def test_local_mass_against_symbolic_oracle():
    sympy = pytest.importorskip("sympy")
    x, y = sympy.symbols("x y")
    mesh = build_structured_mesh(1, 1)
    blocks = triangle_mass_blocks(mesh)
    for t in range(2):
        verts = mesh.triangles[t]
        p = [sympy.Matrix(mesh.vertices[v]) for v in verts]
        area = sympy.Rational(1, 2)
        pos = sympy.Matrix([x, y])
        basis = [
            sympy.nsimplify(mesh.tri_edge_signs[t, i]) * (pos - p[i]) / (2 * area)
            for i in range(3)
        ]
        # integrate over the triangle by mapping to barycentric coordinates
        u, v = sympy.symbols("u v")
        chart = p[0] + u * (p[1] - p[0]) + v * (p[2] - p[0])
        jac = 2 * area
        for i in range(3):
            for j in range(3):
                integrand = (basis[i].T @ basis[j])[0, 0]
                integrand = integrand.subs({x: chart[0], y: chart[1]})
                val = sympy.integrate(
                    sympy.integrate(integrand * jac, (v, 0, 1 - u)), (u, 0, 1)
                )
                assert abs(float(val) - blocks[t, i, j]) < 1e-14


def test_weighted_mass_scaling_and_symmetry():
    mesh = build_structured_mesh(4, 4)
    V = RTSpace(mesh)
    A1 = assemble_weighted_mass(V, constant_field(mesh, 1.0))
    A2 = assemble_weighted_mass(V, constant_field(mesh, 2.0))
    assert np.allclose(2.0 * A2.toarray(), A1.toarray(), rtol=1e-14)
    asym = (A1 - A1.T).toarray()
    assert np.abs(asym).max() <= 1e-14


def test_weighted_mass_spd_small_meshes():
    for n in (2, 4, 8):
        mesh = build_structured_mesh(n, n)
        V = RTSpace(mesh)
        kappa = checkerboard(mesh, 1.0 / n, 1.0, 0.001)
        A = assemble_weighted_mass(V, kappa).toarray()
        eigs = np.linalg.eigvalsh(A)
        assert eigs.min() > 0


def test_weighted_mass_mesh_mismatch():
    mesh1 = build_structured_mesh(2, 2)
    mesh2 = build_structured_mesh(4, 4)
    with pytest.raises(ValueError):
        assemble_weighted_mass(RTSpace(mesh1), constant_field(mesh2))


def test_div_matrix_column_sums_vanish():
    mesh = build_structured_mesh(5, 3)
    B = assemble_div_matrix(RTSpace(mesh), PressureSpace(mesh))
    col_sums = np.asarray(B.sum(axis=0)).ravel()
    assert np.abs(col_sums).max() == 0.0  # signs cancel exactly


def test_div_matrix_nesting_consistency():
    tg = two_grid(3, 2)
    rng = np.random.default_rng(1)
    u = rng.normal(size=tg.V_H.num_dofs)
    fine_div = tg.B_h @ (tg.E @ u)
    per_coarse = np.array(
        [fine_div[ch].sum() for ch in tg.nesting.fine_cells_of_coarse]
    )
    assert np.allclose(per_coarse, tg.B_H @ u, atol=1e-12)


def test_load_cosine_compatible():
    mesh = build_structured_mesh(32, 32)
    f = lambda x, y: 2 * np.pi**2 * np.cos(np.pi * x) * np.cos(np.pi * y)
    loads = assemble_load(PressureSpace(mesh), f)
    assert abs(loads.sum()) < 1e-10
    assert np.abs(loads).sum() > 1.0


def test_load_zero_and_single_cell():
    mesh = build_structured_mesh(2, 2)
    Q = PressureSpace(mesh)
    assert np.all(assemble_load(Q, lambda x, y: 0.0 * x) == 0.0)
    vals = np.zeros(mesh.num_triangles)
    vals[3] = 1.0
    loads = assemble_load(Q, vals)
    assert loads[3] == pytest.approx(mesh.areas[3])
    assert loads.sum() == pytest.approx(mesh.areas[3])


def test_prolongation_identity_at_level_zero():
    coarse = build_structured_mesh(3, 3)
    fine, nm = refine_uniform(coarse, 0)
    E = prolongation_matrix(RTSpace(coarse), RTSpace(fine), nm)
    assert np.abs(E.toarray() - np.eye(E.shape[0])).max() <= 1e-13


def test_prolongation_pointwise_oracle():
    tg = two_grid(3, 2)
    rng = np.random.default_rng(5)
    u = rng.normal(size=tg.V_H.num_dofs)
    uf = tg.E @ u
    pts = rng.uniform(0.05, 0.95, size=(50, 2))
    vc = evaluate_field(tg.V_H, u, pts)
    vf = evaluate_field(tg.V_h, uf, pts)
    assert np.abs(vc - vf).max() <= 1e-12


def test_prolongation_preserves_divergence_values():
    tg = two_grid(2, 3)
    rng = np.random.default_rng(2)
    u = rng.normal(size=tg.V_H.num_dofs)
    div_f = (tg.B_h @ (tg.E @ u)) / tg.fine.areas
    div_c = (tg.B_H @ u) / tg.coarse.areas
    assert np.abs(div_f - div_c[tg.nesting.coarse_of_fine]).max() <= 1e-11


def test_fine_coarse_assembly_consistency():
    tg = two_grid(4, 2)
    # coarse-cellwise constant coefficient
    rng = np.random.default_rng(9)
    kc = np.exp(rng.normal(size=tg.coarse.num_triangles))
    from rtlod.coeff import CoefficientField

    kf = CoefficientField(tg.fine, kc[tg.nesting.coarse_of_fine])
    A_h = assemble_weighted_mass(tg.V_h, kf)
    A_H = assemble_weighted_mass(tg.V_H, CoefficientField(tg.coarse, kc))
    diff = (tg.E.T @ A_h @ tg.E - A_H).toarray()
    assert np.abs(diff).max() <= 1e-12 * np.abs(A_H.toarray()).max()


def test_coarse_weighted_mass_with_fine_coefficient():
    tg = two_grid(2, 2)
    kappa = checkerboard(tg.fine, 0.125, 1.0, 0.01)
    A_h = assemble_weighted_mass(tg.V_h, kappa)
    A_H = assemble_weighted_mass(tg.V_H, kappa, two_grid=tg)
    diff = (tg.E.T @ A_h @ tg.E - A_H).toarray()
    assert np.abs(diff).max() <= 1e-12 * np.abs(A_H.toarray()).max()


def test_evaluate_zero_and_linearity():
    mesh = build_structured_mesh(4, 4)
    V = RTSpace(mesh)
    rng = np.random.default_rng(11)
    pts = rng.uniform(0.1, 0.9, size=(20, 2))
    assert np.all(evaluate_field(V, np.zeros(V.num_dofs), pts) == 0.0)
    u = rng.normal(size=V.num_dofs)
    v = rng.normal(size=V.num_dofs)
    lhs = evaluate_field(V, u + v, pts)
    rhs = evaluate_field(V, u, pts) + evaluate_field(V, v, pts)
    assert np.abs(lhs - rhs).max() <= 1e-14 * max(1.0, np.abs(lhs).max())


def test_evaluate_single_basis_normal_component():
    mesh = build_structured_mesh(2, 2)
    V = RTSpace(mesh)
    for dof, edge in enumerate(V.dof_edges):
        u = np.zeros(V.num_dofs)
        u[dof] = 1.0
        mid = mesh.edge_midpoints[edge]
        # evaluate one-sidedly from an adjacent triangle
        t = mesh.edge_tris[edge, 0]
        inside = mid + 1e-9 * (mesh.centroids[t] - mid)
        val = evaluate_field(V, u, inside[None, :])[0]
        normal_comp = val @ mesh.edge_normals[edge]
        assert normal_comp == pytest.approx(1.0 / mesh.edge_lengths[edge], rel=1e-6)


def test_evaluate_outside_domain_reports_indices():
    mesh = build_structured_mesh(2, 2)
    V = RTSpace(mesh)
    with pytest.raises(ValueError, match=r"\[1\]"):
        evaluate_field(V, np.zeros(V.num_dofs), [[0.5, 0.5], [1.5, 0.5]])
