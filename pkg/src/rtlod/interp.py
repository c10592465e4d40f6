"""Stable commuting quasi-interpolation from the fine to the coarse RT0 space.

The operator is built in two local stages and assembled into a sparse
matrix mapping fine interior-edge dofs to coarse interior-edge dofs:

 1. cell fit: on every coarse cell, the L2-best RT0 field whose divergence
    equals the cell average of the fine divergence (a 4x4 saddle system
    per cell, free normal traces);
 2. vertex smoothing: the broken cell fits are localized with the P1 hat
    of each coarse vertex, re-interpolated through edge flux moments, and
    projected onto the conforming zero-trace RT0 space of the vertex patch
    (a small saddle system per patch with a zero-mean pressure row).

Summing the vertex contributions yields a projection onto the coarse
space whose divergence commutes with the cell-average projection of the
divergence.  Both properties hold as sparse-matrix identities up to
solver roundoff and are enforced by the test suite.
"""

from __future__ import annotations

import numpy as np
import numpy.linalg as la
import scipy.sparse as sparse

from .fespace import TwoGrid, _scatter_symmetric
from .mesh import element_patch

_GAUSS2 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def cell_average_matrix(Q_h, Q_H, nesting):
    """Sparse fine-cell -> coarse-cell averaging (the L2 projection for
    piecewise constants); row K holds area fractions of K's children."""
    if nesting.fine_cells_of_coarse.shape[0] != Q_H.num_dofs or len(
        nesting.coarse_of_fine
    ) != Q_h.num_dofs:
        raise ValueError("nesting map does not connect these pressure spaces")
    children = nesting.fine_cells_of_coarse
    rows = np.repeat(np.arange(Q_H.num_dofs), children.shape[1])
    cols = children.ravel()
    vals = Q_h.measures[cols] / Q_H.measures[rows]
    return sparse.coo_matrix(
        (vals, (rows, cols)), shape=(Q_H.num_dofs, Q_h.num_dofs)
    ).tocsr()


def _cell_fit_block(tg: TwoGrid, T):
    """Matrix taking local fine-edge coefficients on coarse cell T to the
    three coefficients of the divergence-matched L2-best coarse fit."""
    M3 = tg.coarse_blocks[T]
    bT = tg.coarse.tri_edge_signs[T]
    kkt = np.zeros((4, 4))
    kkt[:3, :3] = M3
    kkt[:3, 3] = bT
    kkt[3, :3] = bT
    P = tg.cell_prolongation(T)
    Mloc = tg.cell_local_mass(T)
    rhs = np.vstack([np.asarray(P.T @ Mloc.T).reshape(3, -1), tg.cell_div_functional(T)])
    return la.solve(kkt, rhs)[:3]


def cell_fit(tg: TwoGrid, T, v):
    """Apply the cell-local constrained fit to a fine dof vector.

    Returns the three local coarse RT0 coefficients on cell T (global edge
    sign convention).
    """
    local = tg.V_h.extend(v)[tg.cell_edges[T]]
    return _cell_fit_block(tg, T) @ local


def edge_flux_interpolant(mesh, T, w):
    """Edge normal-flux moments of a vector field on the edges of triangle T.

    w maps an (n, 2) array of points to (n, 2) values; the moments use a
    2-point Gauss rule per edge (exact for quadratic normal traces) and
    the global edge sign convention.
    """
    edges = mesh.tri_edges[T]
    a = mesh.vertices[mesh.edges[edges, 0]]
    b = mesh.vertices[mesh.edges[edges, 1]]
    pts = a[:, None, :] + _GAUSS2[None, :, None] * (b - a)[:, None, :]
    vals = w(pts.reshape(-1, 2)).reshape(3, 2, 2)
    flux = 0.5 * np.einsum("ekd,ed->e", vals, mesh.edge_normals[edges])
    return mesh.edge_lengths[edges] * flux


def _hat_affine(coarse, T, z):
    """Coefficients (c0, cx, cy) of the P1 hat of vertex z restricted to T."""
    tri = coarse.triangles[T]
    A = np.column_stack([np.ones(3), coarse.vertices[tri]])
    rhs = (tri == z).astype(float)
    return la.solve(A, rhs)


def _vertex_system(tg: TwoGrid, z, coarse_mass):
    """Active dofs, patch cells and the dense bordered patch matrix for z."""
    coarse = tg.coarse
    cells = np.sort(coarse.vertex_triangles(z))
    cand = np.unique(coarse.tri_edges[cells].ravel())
    incident = cand[np.any(coarse.edges[cand] == z, axis=1)]
    active_edges = incident[~coarse.boundary_edge[incident]]
    adofs = tg.V_H.edge_dof[active_edges]
    ne, nt = len(adofs), len(cells)
    S = np.zeros((ne + nt + 1, ne + nt + 1))
    if ne:
        S[:ne, :ne] = coarse_mass[np.ix_(adofs, adofs)].toarray()
        Bz = tg.B_H[np.ix_(cells, adofs)].toarray()
        S[ne : ne + nt, :ne] = Bz
        S[:ne, ne : ne + nt] = Bz.T
    S[ne : ne + nt, -1] = coarse.areas[cells]
    S[-1, ne : ne + nt] = coarse.areas[cells]
    return active_edges, adofs, cells, S


def vertex_smooth(tg: TwoGrid, z, v, fits=None):
    """Conforming patch contribution of vertex z for a fine dof vector v.

    Returns (coarse dof indices, coefficient values).  `fits` may carry
    precomputed cell-fit blocks keyed by coarse cell.
    """
    rows, vals = _vertex_contribution(tg, z, fits or {}, vector=v)
    return rows, vals


def _vertex_contribution(tg: TwoGrid, z, fit_blocks, vector=None, coarse_mass=None):
    coarse, fine = tg.coarse, tg.fine
    if coarse_mass is None:
        coarse_mass = _scatter_symmetric(coarse, tg.coarse_blocks, tg.V_H.edge_dof)
    active_edges, adofs, cells, S = _vertex_system(tg, z, coarse_mass)
    ne, nt = len(adofs), len(cells)
    if ne == 0:
        empty = np.empty(0, dtype=np.int64)
        if vector is None:
            return empty, np.empty((0, 0)), empty
        return empty, np.empty(0)

    pfe = np.unique(np.concatenate([tg.cell_edges[T] for T in cells]))
    if vector is None:
        ncols = len(pfe)

        def local_cols(T):
            return np.searchsorted(pfe, tg.cell_edges[T])

    else:
        ncols = 1
        full = tg.V_h.extend(vector)

    rhs = np.zeros((ne + nt + 1, ncols))
    edge_pos = {int(e): k for k, e in enumerate(active_edges)}
    for t, T in enumerate(cells):
        tau = fit_blocks.get(T)
        if tau is None:
            tau = fit_blocks[T] = _cell_fit_block(tg, T)
        if vector is None:
            cols = local_cols(T)
            tau_T = tau
        else:
            cols = np.array([0])
            tau_T = (tau @ full[tg.cell_edges[T]])[:, None]

        tedges = coarse.tri_edges[T]
        at_z = np.flatnonzero(np.any(coarse.edges[tedges] == z, axis=1))
        M3 = tg.coarse_blocks[T]
        smooth = 0.5 * tau_T[at_z]
        for k, e in enumerate(tedges):
            row = edge_pos.get(int(e))
            if row is None:
                continue
            rhs[row, cols] += M3[k, at_z] @ smooth

        c = _hat_affine(coarse, T, z)
        grad = c[1:]
        children = tg.nesting.fine_cells_of_coarse[T]
        hat_at_centroids = c[0] + fine.centroids[children] @ grad
        signs = fine.tri_edge_signs[children]
        contrib = signs * hat_at_centroids[:, None]
        if vector is None:
            div_row = np.zeros(len(tg.cell_edges[T]))
            np.add.at(div_row, tg.cell_slots[T].ravel(), contrib.ravel())
            rhs[ne + t, cols] += div_row
        else:
            loc = full[tg.cell_edges[T]][tg.cell_slots[T]]
            rhs[ne + t, 0] += float((contrib * loc).sum())

        p = coarse.vertices[coarse.triangles[T]]
        int_phi = coarse.tri_edge_signs[T][:, None] * (coarse.centroids[T] - p) / 2.0
        rhs[ne + t, cols] += (grad @ int_phi.T) @ tau_T

    sol = la.solve(S, rhs)[:ne]
    if vector is None:
        return adofs, sol, tg.V_h.edge_dof[pfe]
    return adofs, sol[:, 0]


class QuasiInterpolation:
    """Sparse realization of the stable commuting quasi-interpolation."""

    def __init__(self, two_grid: TwoGrid, matrix, cell_average):
        self.two_grid = two_grid
        self.matrix = matrix  # (coarse dofs) x (fine dofs)
        self.cell_average = cell_average  # (coarse cells) x (fine cells)

    def __call__(self, v):
        return self.matrix @ v

    def commuting_residual(self):
        """Max abs entry of div(Pi .) - (coarse projection of div); the
        B matrices hold cell integrals, so the projection aggregates child
        rows by plain summation."""
        tg = self.two_grid
        nm = tg.nesting
        rows = np.repeat(np.arange(tg.coarse.num_triangles), nm.children_per_cell)
        agg = sparse.coo_matrix(
            (
                np.ones(tg.fine.num_triangles),
                (rows, nm.fine_cells_of_coarse.ravel()),
            ),
            shape=(tg.coarse.num_triangles, tg.fine.num_triangles),
        ).tocsr()
        res = tg.B_H @ self.matrix - agg @ tg.B_h
        return float(np.abs(res.toarray()).max()) if res.nnz else 0.0

    def locality_violations(self):
        """Columns whose coarse support leaves the 1-layer patch of the
        fine dof's host cell(s); empty for a correct assembly."""
        tg = self.two_grid
        coarse = tg.coarse
        csc = self.matrix.tocsc()
        bad = []
        for j, edge in enumerate(tg.V_h.dof_edges):
            hosts = np.unique(
                tg.nesting.coarse_of_fine[
                    tg.fine.edge_tris[edge][tg.fine.edge_tris[edge] >= 0]
                ]
            )
            allowed_cells = np.unique(
                np.concatenate([element_patch(coarse, int(K), 1).indices for K in hosts])
            )
            allowed_dofs = tg.V_H.edge_dof[
                np.unique(coarse.tri_edges[allowed_cells].ravel())
            ]
            allowed = set(int(d) for d in allowed_dofs if d >= 0)
            touched = csc.indices[csc.indptr[j] : csc.indptr[j + 1]]
            if not set(int(r) for r in touched) <= allowed:
                bad.append(j)
        return bad


def export_coordinate_text(matrix, path):
    """Write a sparse matrix as `row col value` lines for cross-checking."""
    coo = sparse.coo_matrix(matrix)
    with open(path, "w") as fh:
        fh.write("# %d %d %d\n" % (coo.shape[0], coo.shape[1], coo.nnz))
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write("%d %d %r\n" % (r, c, float(v)))


def build_quasi_interpolation(tg: TwoGrid):
    """Assemble the quasi-interpolation matrix for a nested space pair."""
    coarse_mass = _scatter_symmetric(tg.coarse, tg.coarse_blocks, tg.V_H.edge_dof)
    fit_blocks = {}
    rows, cols, vals = [], [], []
    for z in range(tg.coarse.num_vertices):
        adofs, block, col_dofs = _vertex_contribution(
            tg, z, fit_blocks, coarse_mass=coarse_mass
        )
        if len(adofs) == 0:
            continue
        keep = col_dofs >= 0
        block = block[:, keep]
        cdofs = col_dofs[keep]
        rows.append(np.repeat(adofs, len(cdofs)))
        cols.append(np.tile(cdofs, len(adofs)))
        vals.append(block.ravel())
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(tg.V_H.num_dofs, tg.V_h.num_dofs),
    ).tocsr()
    mat.sum_duplicates()
    avg = cell_average_matrix(tg.Q_h, tg.Q_H, tg.nesting)
    return QuasiInterpolation(tg, mat, avg)
