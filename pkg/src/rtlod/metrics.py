"""Error norms, convergence orders, decay profiles and inf-sup diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sparse

from .fespace import RTSpace, assemble_weighted_mass, triangle_mass_blocks
from .mesh import element_patch


@dataclass
class ErrorReport:
    experiment: str
    H: float
    h: float
    m: object
    ell: object
    err_u_energy: float
    err_p_l2: float
    err_div: float
    runtime_s: float

    CSV_COLUMNS = ("experiment", "H", "h", "m", "ell",
                   "err_u_energy", "err_p_l2", "err_div", "runtime_s")

    def csv_row(self):
        def fmt(v):
            if isinstance(v, float):
                return "%.12e" % v
            return "" if v is None else str(v)

        return ",".join(
            [self.experiment] + [fmt(getattr(self, c)) for c in self.CSV_COLUMNS[1:]]
        )


def energy_norm(u, coeff, mass=None):
    """Energy norm: L2 norm weighted by the inverse square root of kappa."""
    if mass is None:
        mass = assemble_weighted_mass(RTSpace(coeff.mesh), coeff)
    return float(np.sqrt(abs(u @ (mass @ u))))


def energy_error(u1, u2, coeff, mass=None, relative=False):
    """Energy distance of two fields on the same space; optionally divided
    by the energy norm of u2."""
    if mass is None:
        mass = assemble_weighted_mass(RTSpace(coeff.mesh), coeff)
    d = np.asarray(u1) - np.asarray(u2)
    err = float(np.sqrt(abs(d @ (mass @ d))))
    if relative:
        ref = float(np.sqrt(abs(u2 @ (mass @ u2))))
        if ref == 0.0:
            raise ZeroDivisionError("relative energy error against a zero field")
        return err / ref
    return err


def pressure_error(p1, p2, measures, relative=False):
    d = np.asarray(p1) - np.asarray(p2)
    err = float(np.sqrt(measures @ d**2))
    if relative:
        ref = float(np.sqrt(measures @ np.asarray(p2) ** 2))
        if ref == 0.0:
            raise ZeroDivisionError("relative pressure error against a zero field")
        return err / ref
    return err


def divergence_error(tg, fine_loads):
    """L2 norm of the coarse-mean-free part of the load values.

    `fine_loads` are per-fine-cell integrals of f; the result equals the
    divergence mismatch between the fine reference and any multiscale
    solution whose divergence is the coarse cell average of the load.
    """
    areas = tg.fine.areas
    values = np.asarray(fine_loads) / areas
    coarse_vals = tg.coarse_loads(fine_loads) / tg.coarse.areas
    res = values - tg.pressure_prolongation(coarse_vals)
    return float(np.sqrt(areas @ res**2))


def divergence_values(tg, u_fine):
    """Cellwise divergence of a fine velocity dof vector."""
    return np.asarray(tg.B_h @ u_fine).ravel() / tg.fine.areas


def eoc(errors, Hs):
    """Pairwise experimental orders log(e_i/e_{i+1}) / log(H_i/H_{i+1})."""
    errors = np.asarray(errors, dtype=float)
    Hs = np.asarray(Hs, dtype=float)
    if len(errors) != len(Hs) or len(errors) < 2:
        raise ValueError("need two same-length sequences of at least 2 entries")
    if np.any(errors <= 0) or np.any(Hs <= 0):
        raise ValueError("entries must be positive")
    return np.log(errors[:-1] / errors[1:]) / np.log(Hs[:-1] / Hs[1:])


def cell_energies(u, coeff):
    """Per-fine-cell contributions to the squared energy norm."""
    mesh = coeff.mesh
    V = RTSpace(mesh)
    coeffs = V.extend(u)[mesh.tri_edges]
    blocks = triangle_mass_blocks(mesh) * coeff.inverse[:, None, None]
    return np.einsum("ti,tij,tj->t", coeffs, blocks, coeffs)


def tail_energies(tg, w, coeff, T, layer_list):
    """Energy norms of a fine field restricted outside the m'-layer patches
    of coarse element T, one value per entry of layer_list."""
    energies = cell_energies(w, coeff)
    out = []
    for m in layer_list:
        patch = element_patch(tg.coarse, T, m).indices
        inside = np.zeros(tg.coarse.num_triangles, dtype=bool)
        inside[patch] = True
        mask = ~inside[tg.nesting.coarse_of_fine]
        out.append(float(np.sqrt(max(energies[mask].sum(), 0.0))))
    return np.array(out)


def loglinear_fit(xs, ys):
    """Least-squares fit of log(y) against x; returns (slope, intercept, r2)."""
    xs = np.asarray(xs, dtype=float)
    logy = np.log(np.asarray(ys, dtype=float))
    A = np.column_stack([xs, np.ones_like(xs)])
    sol, *_ = np.linalg.lstsq(A, logy, rcond=None)
    fitted = A @ sol
    ss_res = float(np.sum((logy - fitted) ** 2))
    ss_tot = float(np.sum((logy - logy.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(sol[0]), float(sol[1]), r2


def inf_sup_constant(mass, div, measures, hdiv_extra=None):
    """Smallest generalized singular value of the divergence form.

    Computes  inf_q sup_v (div v, q) / (|v|_Hdiv |q|)  over zero-mean q,
    with |v|^2 = v' mass v + |div v|^2; dense, for desk-scale instances.
    `hdiv_extra` overrides the divergence part of the velocity norm (used
    for multiscale bases whose div matrix lives on another level).
    """
    n = mass.shape[0]
    if n > 6000:
        raise ValueError("inf-sup diagnostic is dense-only (n=%d too large)" % n)
    Bd = div.toarray() if sparse.issparse(div) else np.asarray(div)
    Md = mass.toarray() if sparse.issparse(mass) else np.asarray(mass)
    W = np.asarray(measures)
    K = Md + (Bd.T / W) @ Bd if hdiv_extra is None else Md + hdiv_extra
    S = Bd @ np.linalg.solve(K, Bd.T)
    Z = scipy.linalg.null_space(W[None, :])
    lhs = Z.T @ S @ Z
    rhs = Z.T @ (W[:, None] * Z)
    eigs = scipy.linalg.eigvalsh(lhs, rhs)
    return float(np.sqrt(max(eigs.min(), 0.0)))
