"""Scalar permeability fields, piecewise constant on the fine cells.

All fields are isotropic, A = kappa * I2.  The assembly routines only ever
see the per-cell values, so anisotropy could be added later by widening
the storage to per-cell 2x2 SPD blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh


class RasterFormatError(ValueError):
    """Raised when a permeability raster file does not match its declared shape."""


@dataclass
class CoefficientField:
    """Per-cell permeability kappa > 0 on a fixed mesh.

    alpha and beta are the spectral bounds of A^{-1} = kappa^{-1} I2,
    i.e. alpha = 1/max(kappa), beta = 1/min(kappa).
    """

    mesh: Mesh
    values: np.ndarray
    alpha: float = field(init=False)
    beta: float = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.num_triangles,):
            raise ValueError(
                "need one value per cell: got %s for %d cells"
                % (self.values.shape, self.mesh.num_triangles)
            )
        if not np.all(self.values > 0):
            bad = int(np.flatnonzero(self.values <= 0)[0])
            raise ValueError("nonpositive permeability at cell %d" % bad)
        self.alpha = float(1.0 / self.values.max())
        self.beta = float(1.0 / self.values.min())

    @property
    def contrast(self):
        return float(self.values.max() / self.values.min())

    @property
    def inverse(self):
        """Per-cell values of kappa^{-1} (the weight of the velocity form)."""
        return 1.0 / self.values


def constant_field(mesh, value=1.0):
    return CoefficientField(mesh, np.full(mesh.num_triangles, float(value)))


def checkerboard(mesh, block_size, v_black, v_white, domain=None):
    """Checkerboard field with square blocks of side `block_size`.

    Block (i, j) counted from the lower-left corner carries v_black when
    i + j is even.  The block grid must divide the domain and every fine
    cell must lie inside a single block.
    """
    if v_black <= 0 or v_white <= 0:
        raise ValueError("checkerboard values must be positive")
    domain = domain or mesh.domain
    lx, ly = domain.lengths
    nbx, nby = lx / block_size, ly / block_size
    if abs(nbx - round(nbx)) > 1e-9 or abs(nby - round(nby)) > 1e-9:
        raise ValueError(
            "block size %g does not divide the domain sides (%g, %g)"
            % (block_size, lx, ly)
        )

    def block_of(points):
        i = np.floor((points[:, 0] - domain.x0) / block_size).astype(np.int64)
        j = np.floor((points[:, 1] - domain.y0) / block_size).astype(np.int64)
        i = np.clip(i, 0, int(round(nbx)) - 1)
        j = np.clip(j, 0, int(round(nby)) - 1)
        return i, j

    ic, jc = block_of(mesh.centroids)
    # every cell must be resolved by the block grid: its corners may touch
    # block boundaries but not cross them
    shrunk = mesh.centroids[:, None, :] + 0.999 * (
        mesh.vertices[mesh.triangles] - mesh.centroids[:, None, :]
    )
    for k in range(3):
        iv, jv = block_of(shrunk[:, k, :])
        if np.any(iv != ic) or np.any(jv != jc):
            raise ValueError("fine mesh does not resolve the checkerboard blocks")

    values = np.where((ic + jc) % 2 == 0, float(v_black), float(v_white))
    return CoefficientField(mesh, values)


def load_raster(path, ncols, nrows, mesh, domain=None):
    """Read a row-major raster of positive values onto a structured mesh.

    The file holds ncols*nrows whitespace- or comma-separated decimals;
    row 0 is the bottom row of the domain.  Each raster cell value is
    assigned to every fine triangle nested in that cell.
    """
    with open(path) as fh:
        text = fh.read()
    tokens = text.replace(",", " ").split()
    if len(tokens) != ncols * nrows:
        raise RasterFormatError(
            "%s: expected %d values (%dx%d), found %d"
            % (path, ncols * nrows, ncols, nrows, len(tokens))
        )
    try:
        data = np.array([float(t) for t in tokens])
    except ValueError as exc:
        raise RasterFormatError("%s: %s" % (path, exc)) from exc
    bad = np.flatnonzero(~(data > 0))
    if len(bad):
        raise RasterFormatError(
            "%s: nonpositive value %r at index %d" % (path, data[bad[0]], int(bad[0]))
        )

    domain = domain or mesh.domain
    lx, ly = domain.lengths
    dx, dy = lx / ncols, ly / nrows
    i = np.floor((mesh.centroids[:, 0] - domain.x0) / dx).astype(np.int64)
    j = np.floor((mesh.centroids[:, 1] - domain.y0) / dy).astype(np.int64)
    i = np.clip(i, 0, ncols - 1)
    j = np.clip(j, 0, nrows - 1)
    return CoefficientField(mesh, data[j * ncols + i])


def export_raster(field, ncols, nrows, path, domain=None):
    """Write back the raster values of a field produced by load_raster."""
    mesh = field.mesh
    domain = domain or mesh.domain
    lx, ly = domain.lengths
    dx, dy = lx / ncols, ly / nrows
    i = np.floor((mesh.centroids[:, 0] - domain.x0) / dx).astype(np.int64)
    j = np.floor((mesh.centroids[:, 1] - domain.y0) / dy).astype(np.int64)
    grid = np.full((nrows, ncols), np.nan)
    grid[np.clip(j, 0, nrows - 1), np.clip(i, 0, ncols - 1)] = field.values
    if np.any(np.isnan(grid)):
        raise ValueError("mesh does not cover every raster cell")
    with open(path, "w") as fh:
        for row in grid:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
