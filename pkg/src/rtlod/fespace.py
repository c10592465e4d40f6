"""Lowest-order Raviart-Thomas / piecewise-constant spaces and assembly.

Velocity dofs are edge normal-flux moments int_E v.n ds with the global
edge sign of the mesh; boundary edges are eliminated (zero normal trace),
so the dof set is exactly the interior edges.  On a triangle with vertices
p0, p1, p2 the local basis function of the edge opposite p_i is

    phi_i(x) = s_i (x - p_i) / (2|T|),      div phi_i = s_i / |T|,

where s_i = +-1 matches the global edge normal to the outward one.  With
this normalization every divergence-matrix entry is exactly +-1.
"""

from __future__ import annotations


import numpy as np
import scipy.sparse as sparse

from .mesh import Mesh, NestingMap

# quadrature on the reference triangle: barycentric coordinates + weights
# normalized so that int_T f = |T| * sum w_i f(x_i)
_QUAD_DEG2 = (
    np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
    np.array([1.0 / 3.0] * 3),
)
_a1, _b1 = 0.108103018168070, 0.445948490915965
_a2, _b2 = 0.816847572980459, 0.091576213509771
_QUAD_DEG4 = (
    np.array(
        [
            [_a1, _b1, _b1], [_b1, _a1, _b1], [_b1, _b1, _a1],
            [_a2, _b2, _b2], [_b2, _a2, _b2], [_b2, _b2, _a2],
        ]
    ),
    np.array([0.223381589678011] * 3 + [0.109951743655322] * 3),
)


class UnsupportedDegreeError(NotImplementedError):
    """Requested polynomial degree is accepted by the interface but not built."""


def _check_degree(k):
    if k != 0:
        raise UnsupportedDegreeError(
            "only lowest-order spaces (degree 0) are implemented, got k=%s" % k
        )


class RTSpace:
    """H(div)-conforming RT space with vanishing boundary normal trace."""

    def __init__(self, mesh: Mesh, degree: int = 0):
        _check_degree(degree)
        self.mesh = mesh
        self.degree = degree
        self.dof_edges = mesh.interior_edges
        self.edge_dof = -np.ones(mesh.num_edges, dtype=np.int64)
        self.edge_dof[self.dof_edges] = np.arange(len(self.dof_edges))

    @property
    def num_dofs(self):
        return len(self.dof_edges)

    def extend(self, dofs):
        """Interior-dof vector -> per-edge coefficients (zeros on the boundary)."""
        full = np.zeros(self.mesh.num_edges)
        full[self.dof_edges] = dofs
        return full


class PressureSpace:
    """Piecewise constants; one dof per triangle, measures are the cell areas."""

    def __init__(self, mesh: Mesh, degree: int = 0):
        _check_degree(degree)
        self.mesh = mesh
        self.degree = degree
        self.measures = mesh.areas

    @property
    def num_dofs(self):
        return self.mesh.num_triangles


def triangle_mass_blocks(mesh):
    """Unweighted local RT0 mass matrices, shape (nt, 3, 3).

    Exact: the integrand is quadratic, integrated with the edge-midpoint rule.
    """
    p = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
    mids = mesh.edge_midpoints[mesh.tri_edges]  # (nt, 3, 2)
    diff = mids[:, :, None, :] - p[:, None, :, :]  # (nt, q, i, 2)
    s = np.einsum("tqid,tqjd->tij", diff, diff)
    signs = mesh.tri_edge_signs
    return signs[:, :, None] * signs[:, None, :] * s / (12.0 * mesh.areas)[:, None, None]


def _scatter_symmetric(mesh, blocks, edge_dof):
    rows = edge_dof[mesh.tri_edges][:, :, None].repeat(3, axis=2)
    cols = edge_dof[mesh.tri_edges][:, None, :].repeat(3, axis=1)
    mask = (rows >= 0) & (cols >= 0)
    n = int(edge_dof.max()) + 1
    mat = sparse.coo_matrix(
        (blocks[mask].ravel(), (rows[mask].ravel(), cols[mask].ravel())),
        shape=(n, n),
    ).tocsr()
    mat.sum_duplicates()
    return mat


def assemble_weighted_mass(V: RTSpace, coeff, two_grid=None):
    """Sparse SPD matrix of (kappa^{-1} u, v) over the dofs of V.

    The coefficient normally lives on V's mesh.  A coefficient on a nested
    finer mesh is integrated exactly cell by cell when the matching TwoGrid
    is supplied.
    """
    if coeff.mesh is V.mesh:
        blocks = triangle_mass_blocks(V.mesh) * coeff.inverse[:, None, None]
        return _scatter_symmetric(V.mesh, blocks, V.edge_dof)
    if two_grid is not None and coeff.mesh is two_grid.fine and V.mesh is two_grid.coarse:
        return two_grid.coarse_weighted_mass(coeff)
    raise ValueError("coefficient mesh does not match the space")


def assemble_div_matrix(V: RTSpace, Q: PressureSpace):
    """Sparse matrix of (div u, q): entry (cell, dof) = int_T div phi_dof."""
    if V.mesh is not Q.mesh:
        raise ValueError("velocity and pressure spaces live on different meshes")
    mesh = V.mesh
    dofs = V.edge_dof[mesh.tri_edges]
    cells = np.repeat(np.arange(mesh.num_triangles), 3)
    mask = dofs.ravel() >= 0
    mat = sparse.coo_matrix(
        (mesh.tri_edge_signs.ravel()[mask], (cells[mask], dofs.ravel()[mask])),
        shape=(mesh.num_triangles, V.num_dofs),
    ).tocsr()
    mat.sum_duplicates()
    return mat


def assemble_load(Q: PressureSpace, f, degree=4):
    """Per-cell integrals int_T f dx for a callable f(x, y).

    f may also be a per-cell array of constant values, in which case the
    integrals are exact products with the cell areas.
    """
    mesh = Q.mesh
    if isinstance(f, np.ndarray):
        if f.shape != (mesh.num_triangles,):
            raise ValueError("per-cell load has wrong length")
        return f * mesh.areas
    bary, w = _QUAD_DEG4 if degree >= 3 else _QUAD_DEG2
    pts = np.einsum("qk,tkd->tqd", bary, mesh.vertices[mesh.triangles])
    vals = f(pts[:, :, 0], pts[:, :, 1])
    return mesh.areas * np.einsum("q,tq->t", w, vals)


def _cells_fine_edges(fine: Mesh, nesting: NestingMap):
    """Per coarse cell: sorted fine-edge ids of its closure and, per child
    triangle, the local index of each of its 3 edges in that list."""
    edge_lists, local_slots = [], []
    for children in nesting.fine_cells_of_coarse:
        ed = fine.tri_edges[children]
        uniq, inv = np.unique(ed.ravel(), return_inverse=True)
        edge_lists.append(uniq)
        local_slots.append(inv.reshape(-1, 3))
    return edge_lists, local_slots


def _local_coarse_basis(coarse, T, points):
    """Values of T's three local RT0 basis functions (global signs) at points."""
    p = coarse.vertices[coarse.triangles[T]]  # (3, 2)
    signs = coarse.tri_edge_signs[T]
    area = coarse.areas[T]
    return signs[None, :, None] * (points[:, None, :] - p[None, :, :]) / (2.0 * area)


def prolongation_matrix(V_H: RTSpace, V_h: RTSpace, nesting: NestingMap):
    """Exact coarse-to-fine dof embedding for nested RT0 spaces.

    Column j holds the fine flux moments of the coarse basis function j:
    on every fine edge e the normal component of the (piecewise linear)
    coarse field is evaluated at the edge midpoint, which integrates it
    exactly.  Fine edges shared by both support triangles get identical
    one-sided values and are averaged.
    """
    coarse, fine = V_H.mesh, V_h.mesh
    if nesting.fine_cells_of_coarse.shape[0] != coarse.num_triangles or len(
        nesting.coarse_of_fine
    ) != fine.num_triangles:
        raise ValueError("nesting map does not connect these meshes")
    edge_lists, _ = _cells_fine_edges(fine, nesting)

    rows, cols, vals = [], [], []
    for j, E in enumerate(V_H.dof_edges):
        for T in coarse.edge_tris[E]:
            if T < 0:
                continue
            fedges = edge_lists[T]
            basis = _local_coarse_basis(coarse, T, fine.edge_midpoints[fedges])
            loc = int(np.flatnonzero(coarse.tri_edges[T] == E)[0])
            flux = fine.edge_lengths[fedges] * np.einsum(
                "ed,ed->e", basis[:, loc, :], fine.edge_normals[fedges]
            )
            rows.append(V_h.edge_dof[fedges])
            cols.append(np.full(len(fedges), j))
            vals.append(flux)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    keep = rows >= 0
    mat = sparse.coo_matrix(
        (vals[keep], (rows[keep], cols[keep])), shape=(V_h.num_dofs, V_H.num_dofs)
    ).tocsr()
    counts = sparse.coo_matrix(
        (np.ones(keep.sum()), (rows[keep], cols[keep])),
        shape=(V_h.num_dofs, V_H.num_dofs),
    ).tocsr()
    mat.sum_duplicates()
    counts.sum_duplicates()
    mat.data /= counts.data
    scale = np.abs(mat.data).max() if mat.nnz else 1.0
    mat.data[np.abs(mat.data) < 1e-13 * scale] = 0.0
    mat.eliminate_zeros()
    return mat


def _locate_points(mesh, points):
    pts = np.asarray(points, dtype=float)
    if mesh.structured_shape is None or mesh.domain is None:
        raise ValueError("point location needs a structured mesh")
    nx, ny = mesh.structured_shape
    dom = mesh.domain
    dx = (dom.x1 - dom.x0) / nx
    dy = (dom.y1 - dom.y0) / ny
    tol = 1e-12 * max(dom.lengths)
    outside = (
        (pts[:, 0] < dom.x0 - tol)
        | (pts[:, 0] > dom.x1 + tol)
        | (pts[:, 1] < dom.y0 - tol)
        | (pts[:, 1] > dom.y1 + tol)
    )
    if np.any(outside):
        raise ValueError(
            "points outside the domain at indices %s"
            % np.flatnonzero(outside).tolist()
        )
    xr = (pts[:, 0] - dom.x0) / dx
    yr = (pts[:, 1] - dom.y0) / dy
    ix = np.clip(np.floor(xr).astype(np.int64), 0, nx - 1)
    iy = np.clip(np.floor(yr).astype(np.int64), 0, ny - 1)
    upper = (yr - iy) > (xr - ix)
    return mesh.structured_index()[2 * (iy * nx + ix) + upper.astype(np.int64)]


def evaluate_at_centroids(V: RTSpace, dofs):
    """RT0 values at every cell centroid, shape (ncells, 2)."""
    mesh = V.mesh
    coeffs = V.extend(dofs)[mesh.tri_edges]
    p = mesh.vertices[mesh.triangles]
    basis = (
        mesh.tri_edge_signs[:, :, None]
        * (mesh.centroids[:, None, :] - p)
        / (2.0 * mesh.areas)[:, None, None]
    )
    return np.einsum("tk,tkd->td", coeffs, basis)


def evaluate_field(V: RTSpace, dofs, points):
    """Pointwise RT0 values, shape (npoints, 2)."""
    mesh = V.mesh
    pts = np.asarray(points, dtype=float)
    tris = _locate_points(mesh, pts)
    coeffs = V.extend(dofs)[mesh.tri_edges[tris]]  # (n, 3)
    p = mesh.vertices[mesh.triangles[tris]]  # (n, 3, 2)
    signs = mesh.tri_edge_signs[tris]
    basis = signs[:, :, None] * (pts[:, None, :] - p) / (2.0 * mesh.areas[tris])[:, None, None]
    return np.einsum("nk,nkd->nd", coeffs, basis)


class TwoGrid:
    """A nested coarse/fine mesh pair with both RT0/P0 space levels.

    Bundles the matrices every downstream stage needs (prolongation,
    divergence on both levels) and per-coarse-cell local blocks used by
    the quasi-interpolation and the patch correctors.
    """

    def __init__(self, coarse: Mesh, fine: Mesh, nesting: NestingMap):
        self.coarse = coarse
        self.fine = fine
        self.nesting = nesting
        self.V_H = RTSpace(coarse)
        self.Q_H = PressureSpace(coarse)
        self.V_h = RTSpace(fine)
        self.Q_h = PressureSpace(fine)
        self.fine_blocks = triangle_mass_blocks(fine)
        self.coarse_blocks = triangle_mass_blocks(coarse)
        self.cell_edges, self.cell_slots = _cells_fine_edges(fine, nesting)
        self.E = prolongation_matrix(self.V_H, self.V_h, nesting)
        self.B_h = assemble_div_matrix(self.V_h, self.Q_h)
        self.B_H = assemble_div_matrix(self.V_H, self.Q_H)

    # -- per-coarse-cell blocks (local numbering = self.cell_edges[T]) --

    def cell_local_mass(self, T, weights=None):
        """Fine RT0 mass integrated over coarse cell T, optionally weighted
        by a per-fine-cell factor (e.g. kappa^{-1})."""
        children = self.nesting.fine_cells_of_coarse[T]
        blocks = self.fine_blocks[children]
        if weights is not None:
            blocks = blocks * weights[children][:, None, None]
        slots = self.cell_slots[T]
        n = len(self.cell_edges[T])
        rows = slots[:, :, None].repeat(3, axis=2).ravel()
        cols = slots[:, None, :].repeat(3, axis=1).ravel()
        return sparse.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    def cell_prolongation(self, T):
        """Fine flux moments of the three local coarse basis functions on T,
        dense (n_local_fine_edges, 3), global sign convention."""
        fedges = self.cell_edges[T]
        basis = _local_coarse_basis(self.coarse, T, self.fine.edge_midpoints[fedges])
        flux = self.fine.edge_lengths[fedges][:, None] * np.einsum(
            "eid,ed->ei", basis, self.fine.edge_normals[fedges]
        )
        flux[np.abs(flux) < 1e-13 * max(np.abs(flux).max(), 1.0)] = 0.0
        return flux

    def cell_div_functional(self, T):
        """Row of int_T div(.) over the local fine edges of coarse cell T."""
        children = self.nesting.fine_cells_of_coarse[T]
        out = np.zeros(len(self.cell_edges[T]))
        np.add.at(out, self.cell_slots[T].ravel(), self.fine.tri_edge_signs[children].ravel())
        return out

    def coarse_weighted_mass(self, coeff):
        """Coarse weighted mass with a fine-mesh coefficient, integrated
        exactly per fine cell."""
        if coeff.mesh is not self.fine:
            raise ValueError("coefficient must live on the fine mesh")
        nH = self.V_H.num_dofs
        rows, cols, vals = [], [], []
        for T in range(self.coarse.num_triangles):
            P = self.cell_prolongation(T)
            local = np.asarray((P.T @ self.cell_local_mass(T, coeff.inverse) @ P))
            dofs = self.V_H.edge_dof[self.coarse.tri_edges[T]]
            keep = dofs >= 0
            rows.append(np.repeat(dofs[keep], keep.sum()))
            cols.append(np.tile(dofs[keep], keep.sum()))
            vals.append(local[np.ix_(keep, keep)].ravel())
        mat = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nH, nH),
        ).tocsr()
        mat.sum_duplicates()
        return mat

    def coarse_loads(self, fine_loads):
        """Aggregate per-fine-cell integrals to per-coarse-cell integrals."""
        return np.asarray(
            [fine_loads[ch].sum() for ch in self.nesting.fine_cells_of_coarse]
        )

    def pressure_prolongation(self, coarse_values):
        """Inject coarse cell values onto the fine cells."""
        return np.asarray(coarse_values)[self.nesting.coarse_of_fine]
