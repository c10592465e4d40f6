"""Saddle-point solves: fine reference, localized and ideal multiscale.

The multiscale velocity space is spanned by the corrected coarse basis,
columns of R = E - Q with E the coarse-to-fine embedding and Q the
corrector matrix.  Corrector columns are divergence free, so the coarse
divergence matrix carries the constraint block of the multiscale system
and its solution conserves mass against every coarse pressure exactly.
The zero-mean pressure gauge is enforced by one bordered row of cell
areas in all solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .corrector import (
    CompatibilityError,
    CorrectorSet,
    compute_correctors,
    saturation_layers,
)
from .fespace import PressureSpace, RTSpace, TwoGrid, assemble_div_matrix, assemble_weighted_mass
from .interp import build_quasi_interpolation


@dataclass
class ReferenceSolution:
    velocity: np.ndarray  # fine interior-edge dofs
    pressure: np.ndarray  # fine cell values, zero weighted mean
    residual: float


@dataclass
class MultiscaleSolution:
    coarse_coefficients: np.ndarray  # over coarse interior-edge dofs
    pressure: np.ndarray  # coarse cell values, zero weighted mean
    velocity_fine: np.ndarray  # fine representation, source part included
    m: object
    ell: object = None
    H: float = 0.0
    h: float = 0.0
    meta: dict = field(default_factory=dict)


def _bordered_solve(A, B, weights, rhs_top, rhs_mid):
    """Solve [[A, B'],[B, 0]] with one extra zero-weighted-mean row."""
    w = sparse.csr_matrix(weights[:, None])
    K = sparse.bmat([[A, B.T, None], [B, None, w], [None, w.T, None]], format="csc")
    rhs = np.concatenate([rhs_top, rhs_mid, [0.0]])
    x = spla.splu(K).solve(rhs)
    n, m = A.shape[0], B.shape[0]
    residual = np.linalg.norm(K @ x - rhs) / max(np.linalg.norm(rhs), 1e-30)
    return x[:n], x[n : n + m], residual


def _check_compatibility(loads):
    total = float(np.sum(loads))
    scale = float(np.abs(loads).sum())
    if abs(total) > 1e-8 * max(scale, 1.0):
        raise CompatibilityError(
            "load is not compatible: integral %g (scale %g)" % (total, scale)
        )


def solve_reference(V_h: RTSpace, Q_h: PressureSpace, coeff, loads):
    """Fine mixed solve; `loads` holds the per-cell integrals of f."""
    _check_compatibility(loads)
    A = assemble_weighted_mass(V_h, coeff)
    B = assemble_div_matrix(V_h, Q_h)
    u, p, res = _bordered_solve(A, B, Q_h.measures, np.zeros(V_h.num_dofs), -loads)
    return ReferenceSolution(u, p, res)


def solve_lod(
    tg: TwoGrid,
    coeff,
    correctors: CorrectorSet,
    fine_loads,
    source_correction=None,
    A_h=None,
):
    """Localized multiscale solve from precomputed correctors.

    `source_correction` is the summed source-corrector dof vector; when
    given, it shifts the right side of the velocity block and is added to
    the returned fine velocity so that the fine divergence matches the
    load cell by cell.
    """
    _check_compatibility(fine_loads)
    if A_h is None:
        A_h = assemble_weighted_mass(tg.V_h, coeff)
    if correctors.covered_elements != tg.coarse.num_triangles:
        raise ValueError(
            "corrector set covers %d of %d elements"
            % (correctors.covered_elements, tg.coarse.num_triangles)
        )
    R = (tg.E - correctors.matrix).tocsr()
    A_ms = (R.T @ (A_h @ R)).tocsc()
    f_H = tg.coarse_loads(fine_loads)
    if source_correction is None:
        g = np.zeros(tg.V_H.num_dofs)
    else:
        g = -np.asarray(R.T @ (A_h @ source_correction)).ravel()
    c, p_H, res = _bordered_solve(A_ms, tg.B_H.tocsr(), tg.coarse.areas, g, -f_H)
    u_fine = np.asarray(R @ c).ravel()
    if source_correction is not None:
        u_fine = u_fine + source_correction
    return MultiscaleSolution(
        c,
        p_H,
        u_fine,
        m=correctors.layers,
        H=tg.coarse.H,
        h=tg.fine.H,
        meta={"residual": res, "ideal": correctors.ideal},
    )


def export_solution(prefix, tg: TwoGrid, sol: MultiscaleSolution):
    """Write the solution as CSV: fine velocity dofs, coarse pressure,
    and per-cell velocity magnitudes with centroid coordinates."""
    from .fespace import evaluate_at_centroids

    with open(prefix + "_velocity.csv", "w") as fh:
        fh.write("fine_dof,value\n")
        for k, v in enumerate(sol.velocity_fine):
            fh.write("%d,%.12e\n" % (k, v))
    with open(prefix + "_pressure.csv", "w") as fh:
        fh.write("coarse_cell,value\n")
        for k, v in enumerate(sol.pressure):
            fh.write("%d,%.12e\n" % (k, v))
    vals = evaluate_at_centroids(tg.V_h, sol.velocity_fine)
    mags = np.hypot(vals[:, 0], vals[:, 1])
    with open(prefix + "_magnitude.csv", "w") as fh:
        fh.write("x,y,magnitude\n")
        for (x, y), v in zip(tg.fine.centroids, mags):
            fh.write("%.12e,%.12e,%.12e\n" % (x, y, v))


def solve_ideal(tg: TwoGrid, coeff, fine_loads, pi=None, correctors=None, workers=1, A_h=None):
    """Ideal multiscale solve: correctors on domain-saturating patches."""
    if A_h is None:
        A_h = assemble_weighted_mass(tg.V_h, coeff)
    if pi is None:
        pi = build_quasi_interpolation(tg)
    if correctors is None:
        correctors = compute_correctors(tg, pi.matrix, coeff, None, workers=workers, A_h=A_h)
    elif correctors.layers < saturation_layers(tg.coarse):
        raise ValueError("supplied correctors are not domain-saturating")
    sol = solve_lod(tg, coeff, correctors, fine_loads, A_h=A_h)
    sol.meta["ideal"] = True
    return sol, correctors
