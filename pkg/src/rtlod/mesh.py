"""Structured nested triangulations of rectangles.

Meshes are built by splitting each cell of a uniform rectangular grid into
two triangles along the lower-left to upper-right diagonal.  Uniform
refinement (midpoint/red refinement of every triangle) reproduces the same
structured pattern on the halved grid, so coarse/fine pairs are nested and
the nesting map is exact.

Conventions baked in here and relied upon everywhere else:
  * edges are stored as vertex pairs (a, b) with a < b,
  * the fixed global edge normal is the tangent (b - a) rotated clockwise,
  * all triangles are positively oriented.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned rectangle (x0, x1) x (y0, y1)."""

    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("degenerate rectangle: %r" % (self,))

    @property
    def lengths(self):
        return self.x1 - self.x0, self.y1 - self.y0


UNIT_SQUARE = Rectangle(0.0, 1.0, 0.0, 1.0)


@dataclass
class Mesh:
    """Conforming triangulation with oriented edges.

    Attributes
    ----------
    vertices : (nv, 2) float array
        Vertex coordinates.
    triangles : (nt, 3) int array
        Vertex indices per triangle, positively oriented.
    edges : (ne, 2) int array
        Vertex pairs, lower index first.  The global unit normal of edge
        (a, b) is the unit tangent from a to b rotated by -90 degrees.
    tri_edges : (nt, 3) int array
        Edge index opposite each local vertex.
    tri_edge_signs : (nt, 3) float array
        +1 where the global edge normal coincides with the outward normal
        of the triangle, -1 otherwise.
    edge_tris : (ne, 2) int array
        Adjacent triangles, -1 in the second slot for boundary edges.
    boundary_edge : (ne,) bool array
    """

    vertices: np.ndarray
    triangles: np.ndarray
    structured_shape: tuple | None = None
    domain: Rectangle | None = None

    edges: np.ndarray = field(init=False)
    tri_edges: np.ndarray = field(init=False)
    tri_edge_signs: np.ndarray = field(init=False)
    edge_tris: np.ndarray = field(init=False)
    boundary_edge: np.ndarray = field(init=False)
    areas: np.ndarray = field(init=False)
    centroids: np.ndarray = field(init=False)
    edge_lengths: np.ndarray = field(init=False)
    edge_midpoints: np.ndarray = field(init=False)
    edge_normals: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self._build_topology()
        self._build_geometry()
        self._vertex_tri_csr = None

    def _build_topology(self):
        tris = self.triangles
        # local edge k is opposite local vertex k
        raw = np.stack(
            [tris[:, [1, 2]], tris[:, [2, 0]], tris[:, [0, 1]]], axis=1
        ).reshape(-1, 2)
        canon = np.sort(raw, axis=1)
        self.edges, inverse = np.unique(canon, axis=0, return_inverse=True)
        self.tri_edges = inverse.reshape(-1, 3)

        ne = len(self.edges)
        edge_tris = -np.ones((ne, 2), dtype=np.int64)
        counts = np.zeros(ne, dtype=np.int64)
        order = np.argsort(self.tri_edges.ravel(), kind="stable")
        tri_of_slot = np.repeat(np.arange(len(tris)), 3)
        for slot in order:
            e = self.tri_edges.ravel()[slot]
            edge_tris[e, counts[e]] = tri_of_slot[slot]
            counts[e] += 1
        if counts.max() > 2:
            raise ValueError("non-manifold mesh: an edge touches > 2 triangles")
        self.edge_tris = edge_tris
        self.boundary_edge = counts == 1

    def _build_geometry(self):
        p = self.vertices[self.triangles]  # (nt, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        if np.any(cross <= 0):
            raise ValueError("mesh contains non-positively oriented triangles")
        self.areas = 0.5 * cross
        self.centroids = p.mean(axis=1)

        va, vb = self.vertices[self.edges[:, 0]], self.vertices[self.edges[:, 1]]
        tang = vb - va
        self.edge_lengths = np.hypot(tang[:, 0], tang[:, 1])
        self.edge_midpoints = 0.5 * (va + vb)
        unit = tang / self.edge_lengths[:, None]
        self.edge_normals = np.stack([unit[:, 1], -unit[:, 0]], axis=1)

        # sign: +1 iff global normal points out of the triangle across that edge
        mids = self.edge_midpoints[self.tri_edges]  # (nt, 3, 2)
        opp = p  # local vertex k is opposite local edge k
        dots = np.einsum("tkd,tkd->tk", self.edge_normals[self.tri_edges], mids - opp)
        self.tri_edge_signs = np.sign(dots)

        diams = np.maximum.reduce(
            [
                np.hypot(*(p[:, 1] - p[:, 0]).T),
                np.hypot(*(p[:, 2] - p[:, 1]).T),
                np.hypot(*(p[:, 0] - p[:, 2]).T),
            ]
        )
        self.tri_diameters = diams
        self.H = float(diams.max())
        self.quasi_uniformity = float(diams.min() / self.H)

    # -- entity counts -------------------------------------------------

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def interior_edges(self):
        return np.flatnonzero(~self.boundary_edge)

    # -- incidence and patches -----------------------------------------

    def vertex_triangles(self, z):
        """Indices of all triangles having vertex z as a corner."""
        indptr, data = self._vertex_incidence()
        return data[indptr[z] : indptr[z + 1]]

    def _vertex_incidence(self):
        if self._vertex_tri_csr is None:
            verts = self.triangles.ravel()
            tris = np.repeat(np.arange(self.num_triangles), 3)
            order = np.argsort(verts, kind="stable")
            counts = np.bincount(verts, minlength=self.num_vertices)
            indptr = np.concatenate([[0], np.cumsum(counts)])
            self._vertex_tri_csr = (indptr, tris[order])
        return self._vertex_tri_csr

    def structured_index(self):
        """Map (grid cell, half) positions to triangle ids.

        Entry 2*(iy*nx + ix) + upper holds the triangle occupying that
        half of grid cell (ix, iy); derived from centroids, so it works
        for refined meshes whose triangle order differs from the builder's.
        """
        if getattr(self, "_structured_order", None) is None:
            if self.structured_shape is None or self.domain is None:
                raise ValueError("mesh is not structured")
            nx, ny = self.structured_shape
            dom = self.domain
            dx = (dom.x1 - dom.x0) / nx
            dy = (dom.y1 - dom.y0) / ny
            xr = (self.centroids[:, 0] - dom.x0) / dx
            yr = (self.centroids[:, 1] - dom.y0) / dy
            ix = np.clip(np.floor(xr).astype(np.int64), 0, nx - 1)
            iy = np.clip(np.floor(yr).astype(np.int64), 0, ny - 1)
            upper = (yr - iy) > (xr - ix)
            slot = 2 * (iy * nx + ix) + upper.astype(np.int64)
            order = np.empty(self.num_triangles, dtype=np.int64)
            order[slot] = np.arange(self.num_triangles)
            self._structured_order = order
        return self._structured_order

    def export_text(self, path):
        """Write a plain node/element listing (0-based indices)."""
        with open(path, "w") as fh:
            fh.write("# nodes %d\n" % self.num_vertices)
            for x, y in self.vertices:
                fh.write("%r %r\n" % (float(x), float(y)))
            fh.write("# triangles %d\n" % self.num_triangles)
            for a, b, c in self.triangles:
                fh.write("%d %d %d\n" % (a, b, c))


@dataclass
class NestingMap:
    """Parent/child relation between a mesh and a nested refinement.

    ratio is the 1D subdivision factor: each coarse triangle holds
    ratio**2 fine triangles (ratio = 2**levels for red refinement).
    """

    fine_cells_of_coarse: np.ndarray  # (nc, ratio**2) int
    coarse_of_fine: np.ndarray  # (nf,) int
    ratio: int

    @property
    def children_per_cell(self):
        return self.fine_cells_of_coarse.shape[1]

    @property
    def refinement_levels(self):
        levels = int(round(np.log2(self.ratio)))
        if 2**levels != self.ratio:
            raise ValueError("nesting ratio %d is not dyadic" % self.ratio)
        return levels


class ElementSet:
    """Ordered set of coarse triangle indices forming an m-layer patch."""

    def __init__(self, indices, layers):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.layers = int(layers)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, t):
        return bool(np.isin(t, self.indices))


def build_structured_mesh(nx, ny, domain=UNIT_SQUARE):
    """Uniform triangular mesh of a rectangle, 2*nx*ny triangles.

    Every grid cell is split along its lower-left to upper-right diagonal;
    triangle 2*(iy*nx+ix) is the lower-right half, +1 the upper-left half.
    """
    if nx < 1 or ny < 1:
        raise ValueError("cell counts must be >= 1, got nx=%s ny=%s" % (nx, ny))
    if not isinstance(domain, Rectangle):
        domain = Rectangle(*domain)
    xs = np.linspace(domain.x0, domain.x1, nx + 1)
    ys = np.linspace(domain.y0, domain.y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)

    iy, ix = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    ll = (iy * (nx + 1) + ix).ravel()
    lr = ll + 1
    ul = ll + (nx + 1)
    ur = ul + 1
    lower = np.stack([ll, lr, ur], axis=1)
    upper = np.stack([ll, ur, ul], axis=1)
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper
    return Mesh(vertices, triangles, structured_shape=(nx, ny), domain=domain)


def refine_uniform(mesh, levels):
    """Refine every triangle into 4 congruent children, `levels` times.

    Returns the fine mesh together with the NestingMap from `mesh` to it.
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    nc = mesh.num_triangles
    children = np.arange(nc, dtype=np.int64)[:, None]
    current = mesh
    for _ in range(levels):
        current, step = _refine_once(current)
        children = step[children].reshape(nc, -1)
    coarse_of_fine = np.empty(current.num_triangles, dtype=np.int64)
    for T in range(nc):
        coarse_of_fine[children[T]] = T
    return current, NestingMap(children, coarse_of_fine, 2**levels)


def _refine_once(mesh):
    nv = mesh.num_vertices
    midpoint_id = nv + np.arange(mesh.num_edges)
    vertices = np.vstack([mesh.vertices, mesh.edge_midpoints])

    t = mesh.triangles
    # midpoint of the edge opposite local vertex k
    m = midpoint_id[mesh.tri_edges]
    m01 = m[:, 2]
    m12 = m[:, 0]
    m20 = m[:, 1]
    child = np.empty((mesh.num_triangles, 4, 3), dtype=np.int64)
    child[:, 0] = np.stack([t[:, 0], m01, m20], axis=1)
    child[:, 1] = np.stack([m01, t[:, 1], m12], axis=1)
    child[:, 2] = np.stack([m20, m12, t[:, 2]], axis=1)
    child[:, 3] = np.stack([m01, m12, m20], axis=1)

    shape = mesh.structured_shape
    if shape is not None:
        shape = (2 * shape[0], 2 * shape[1])
    fine = Mesh(vertices, child.reshape(-1, 3), structured_shape=shape,
                domain=mesh.domain)
    step = np.arange(mesh.num_triangles * 4, dtype=np.int64).reshape(-1, 4)
    return fine, step


def nest_structured(coarse, fine):
    """Nesting map between two structured meshes of the same rectangle.

    The fine grid must subdivide every coarse grid cell by the same
    integer factor in both directions (any factor, not only powers of
    two); the shared diagonal direction keeps every fine triangle inside
    a single coarse triangle.
    """
    if coarse.structured_shape is None or fine.structured_shape is None:
        raise ValueError("both meshes must be structured")
    if coarse.domain != fine.domain:
        raise ValueError("meshes cover different domains")
    cnx, cny = coarse.structured_shape
    fnx, fny = fine.structured_shape
    if fnx % cnx or fny % cny or fnx // cnx != fny // cny:
        raise ValueError(
            "fine grid %s does not uniformly subdivide coarse grid %s"
            % ((fnx, fny), (cnx, cny))
        )
    r = fnx // cnx
    dom = coarse.domain
    dx, dy = (dom.x1 - dom.x0) / cnx, (dom.y1 - dom.y0) / cny
    cx = (fine.centroids[:, 0] - dom.x0) / dx
    cy = (fine.centroids[:, 1] - dom.y0) / dy
    ix = np.clip(np.floor(cx).astype(np.int64), 0, cnx - 1)
    iy = np.clip(np.floor(cy).astype(np.int64), 0, cny - 1)
    upper = (cy - iy) > (cx - ix)
    coarse_of_fine = 2 * (iy * cnx + ix) + upper.astype(np.int64)
    order = np.argsort(coarse_of_fine, kind="stable")
    children = order.reshape(coarse.num_triangles, r * r)
    return NestingMap(children, coarse_of_fine, r)


def element_patch(mesh, T, m):
    """m-layer patch around triangle T via shared-vertex adjacency.

    Layer 0 is {T}; each further layer adds every triangle touching the
    previous layer in at least a vertex.
    """
    if not (0 <= T < mesh.num_triangles):
        raise ValueError("invalid triangle index %s" % T)
    if m < 0:
        raise ValueError("layer count must be >= 0")
    in_patch = np.zeros(mesh.num_triangles, dtype=bool)
    in_patch[T] = True
    indptr, data = mesh._vertex_incidence()
    frontier = np.array([T])
    for _ in range(m):
        verts = np.unique(mesh.triangles[frontier].ravel())
        cand = np.unique(
            np.concatenate([data[indptr[z] : indptr[z + 1]] for z in verts])
        )
        frontier = cand[~in_patch[cand]]
        if len(frontier) == 0:
            break
        in_patch[frontier] = True
    return ElementSet(np.flatnonzero(in_patch), m)


def vertex_patch(mesh, z):
    """All triangles having vertex z as a corner."""
    if not (0 <= z < mesh.num_vertices):
        raise ValueError("invalid vertex index %s" % z)
    tris = np.sort(mesh.vertex_triangles(z))
    return ElementSet(tris, 1)
