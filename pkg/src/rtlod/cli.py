"""Configuration-driven experiment runner.

Reads a JSON config, builds the meshes and coefficient, runs the
requested reference/multiscale pipelines, and writes

    results.csv    one row per (coarse grid, m) case
    manifest.json  config echo + hash, library versions, wall times
    field_*.csv    per-cell velocity magnitudes (when requested)
    decay_*.csv    corrector tail and localization-error profiles

Numeric CSV columns are formatted with a fixed precision so reruns of
the same config are byte-identical regardless of the worker count
(runtime columns excluded).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import time

import numpy as np
import scipy

from . import __version__, metrics
from .coeff import checkerboard, constant_field, load_raster
from .corrector import (
    build_patch_problem,
    compute_correctors,
    compute_source_correctors,
    element_corrector,
    saturation_layers,
)
from .fespace import (
    PressureSpace,
    RTSpace,
    TwoGrid,
    assemble_load,
    assemble_weighted_mass,
    evaluate_at_centroids,
)
from .interp import build_quasi_interpolation
from .lod import solve_lod, solve_reference
from .mesh import Rectangle, build_structured_mesh, nest_structured
from .metrics import ErrorReport


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "domain": [0.0, 1.0, 0.0, 1.0],
    "fine_cells": [128, 128],
    "coarse_grids": [[4, 4], [8, 8], [16, 16], [32, 32]],
    "m_rule": {"kind": "level_offset", "offset": 1},
    "ell_rule": {"kind": "m_plus", "offset": 1},
    "coefficient": {"kind": "checkerboard", "block_cells": 2, "values": [1.0, 0.001]},
    "source": {"kind": "cosine"},
    "source_correction": False,
    "threads": 1,
    "out": "results",
    "write_fields": False,
    "tolerances": {"compatibility": 1e-8},
    "decay_layers": [1, 2, 3, 4, 5],
    "decay_elements": "center",
}


class ExperimentConfig:
    """Validated experiment description (see README for the schema)."""

    def __init__(self, data):
        merged = dict(_DEFAULTS)
        merged.update(data)
        self.raw = merged
        self.experiment = merged.get("experiment")
        if self.experiment not in ("convergence", "spe10", "decay", "single"):
            raise ConfigError("unknown experiment kind %r" % (self.experiment,))
        self.domain = Rectangle(*merged["domain"])
        self.fine_cells = tuple(int(v) for v in merged["fine_cells"])
        self.coarse_grids = [tuple(int(v) for v in g) for g in merged["coarse_grids"]]
        self.m_rule = merged["m_rule"]
        self.ell_rule = merged["ell_rule"]
        self.coefficient = merged["coefficient"]
        self.source = merged["source"]
        self.source_correction = bool(merged["source_correction"])
        self.threads = int(merged["threads"])
        self.out = merged["out"]
        self.write_fields = bool(merged["write_fields"])
        self.tolerances = merged["tolerances"]
        self.decay_layers = [int(v) for v in merged["decay_layers"]]
        self.decay_elements = merged["decay_elements"]
        self._validate()

    def _validate(self):
        fx, fy = self.fine_cells
        for nx, ny in self.coarse_grids:
            if fx % nx or fy % ny or fx // nx != fy // ny:
                raise ConfigError(
                    "coarse grid %s does not divide the fine grid %s uniformly"
                    % ((nx, ny), (fx, fy))
                )
        for m in [self.m_for(g) for g in self.coarse_grids]:
            if m is not None and m < 1:
                raise ConfigError("patch layer counts must be >= 1")
        if any(v <= 0 for v in self.tolerances.values()):
            raise ConfigError("tolerances must be positive")
        if self.threads < 1:
            raise ConfigError("thread count must be >= 1")

    def m_for(self, grid):
        kind = self.m_rule.get("kind")
        if kind == "fixed":
            return int(self.m_rule["m"])
        if kind == "level_offset":
            level = int(round(math.log2(max(grid))))
            return level + int(self.m_rule.get("offset", 1))
        if kind == "level_scale":
            level = int(round(math.log2(max(grid))))
            return max(1, int(round(float(self.m_rule.get("factor", 2.0)) * level)))
        if kind == "log":
            H = math.sqrt(2.0) * max(self.domain.lengths) / max(grid)
            c = float(self.m_rule.get("factor", 1.0))
            return max(1, math.ceil(c * abs(math.log(H))))
        if kind == "saturate":
            return None
        raise ConfigError("unknown m rule %r" % (kind,))

    def ell_for(self, m):
        if self.ell_rule.get("kind") == "m_plus":
            return (m or 0) + int(self.ell_rule.get("offset", 1))
        if self.ell_rule.get("kind") == "fixed":
            return int(self.ell_rule["ell"])
        raise ConfigError("unknown ell rule %r" % (self.ell_rule,))

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls(json.load(fh))

    def hash(self):
        canon = json.dumps(self.raw, sort_keys=True).encode()
        return hashlib.sha256(canon).hexdigest()[:16]


def _build_coefficient(cfg, fine_mesh):
    opts = cfg.coefficient
    kind = opts.get("kind")
    if kind == "constant":
        return constant_field(fine_mesh, opts.get("value", 1.0))
    if kind == "checkerboard":
        hx = cfg.domain.lengths[0] / cfg.fine_cells[0]
        block = opts.get("block_cells", 2) * hx
        v1, v2 = opts.get("values", [1.0, 0.001])
        return checkerboard(fine_mesh, block, v1, v2)
    if kind == "raster":
        path = opts["path"]
        if not os.path.exists(path):
            raise FileNotFoundError(
                "permeability raster %r not found; see README for how to "
                "obtain the benchmark dataset" % path
            )
        return load_raster(path, int(opts["ncols"]), int(opts["nrows"]), fine_mesh)
    raise ConfigError("unknown coefficient kind %r" % (kind,))


def _build_loads(cfg, fine_mesh):
    opts = cfg.source
    kind = opts.get("kind")
    if kind == "cosine":
        f = lambda x, y: 2.0 * np.pi**2 * np.cos(np.pi * x) * np.cos(np.pi * y)
        return assemble_load(PressureSpace(fine_mesh), f, degree=4)
    if kind == "corner_wells":
        # +1 in the lower-left and -1 in the upper-right cell of the fine
        # rectangle grid (both triangles of each rectangle)
        nx, ny = cfg.fine_cells
        dom = cfg.domain
        dx = dom.lengths[0] / nx
        dy = dom.lengths[1] / ny
        i = np.floor((fine_mesh.centroids[:, 0] - dom.x0) / dx).astype(int)
        j = np.floor((fine_mesh.centroids[:, 1] - dom.y0) / dy).astype(int)
        vals = np.zeros(fine_mesh.num_triangles)
        vals[(i == 0) & (j == 0)] = 1.0
        vals[(i == nx - 1) & (j == ny - 1)] = -1.0
        return vals * fine_mesh.areas
    if kind == "halves":
        # coarse-cellwise constant: +1 on the left half, -1 on the right
        mid = 0.5 * (cfg.domain.x0 + cfg.domain.x1)
        vals = np.where(fine_mesh.centroids[:, 0] < mid, 1.0, -1.0)
        return vals * fine_mesh.areas
    raise ConfigError("unknown source kind %r" % (kind,))


def _write_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(ErrorReport.CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(row.csv_row() + "\n")


def _write_field_csv(path, mesh, dofs, V):
    vals = evaluate_at_centroids(V, dofs)
    mag = np.hypot(vals[:, 0], vals[:, 1])
    with open(path, "w") as fh:
        fh.write("x,y,magnitude\n")
        for (cx, cy), v in zip(mesh.centroids, mag):
            fh.write("%.12e,%.12e,%.12e\n" % (cx, cy, v))


def _manifest(cfg, extra):
    return {
        "config": cfg.raw,
        "config_hash": cfg.hash(),
        "rtlod_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        **extra,
    }


def _run_cases(cfg, out_dir, grids_with_m):
    """Shared pipeline: one fine reference, one LOD row per (grid, m)."""
    os.makedirs(out_dir, exist_ok=True)
    fine = build_structured_mesh(*cfg.fine_cells, domain=cfg.domain)
    coeff = _build_coefficient(cfg, fine)
    loads = _build_loads(cfg, fine)

    t0 = time.time()
    V_h, Q_h = RTSpace(fine), PressureSpace(fine)
    A_h = assemble_weighted_mass(V_h, coeff)
    ref = solve_reference(V_h, Q_h, coeff, loads)
    t_ref = time.time() - t0

    if cfg.write_fields:
        _write_field_csv(
            os.path.join(out_dir, "field_reference.csv"), fine, ref.velocity, V_h
        )

    rows, failures, timings = [], [], {"reference_s": t_ref}
    for grid, m in grids_with_m:
        label = "%dx%d" % grid
        t1 = time.time()
        try:
            coarse = build_structured_mesh(*grid, domain=cfg.domain)
            tg = TwoGrid(coarse, fine, nest_structured(coarse, fine))
            pi = build_quasi_interpolation(tg)
            correctors = compute_correctors(
                tg, pi.matrix, coeff, m, workers=cfg.threads, A_h=A_h
            ).compact()
            source_sum = None
            ell = None
            if cfg.source_correction:
                ell = cfg.ell_for(m if m is not None else saturation_layers(coarse))
                source_sum, _ = compute_source_correctors(
                    tg, pi.matrix, coeff, ell, loads, workers=cfg.threads, A_h=A_h
                )
            sol = solve_lod(
                tg, coeff, correctors, loads, source_correction=source_sum, A_h=A_h
            )
            err_u = metrics.energy_error(
                sol.velocity_fine, ref.velocity, coeff, mass=A_h, relative=True
            )
            p_fine = tg.pressure_prolongation(sol.pressure)
            err_p = metrics.pressure_error(p_fine, ref.pressure, fine.areas, relative=True)
            err_div = metrics.divergence_error(tg, loads)
            rows.append(
                ErrorReport(
                    cfg.experiment, coarse.H, fine.H,
                    m if m is not None else "ideal", ell,
                    err_u, err_p, err_div, time.time() - t1,
                )
            )
            if cfg.write_fields:
                _write_field_csv(
                    os.path.join(out_dir, "field_%s_m%s.csv" % (label, m)),
                    fine, sol.velocity_fine, V_h,
                )
        except Exception as exc:  # keep the sweep alive, record the failure
            failures.append({"grid": label, "m": m, "error": repr(exc)})
        timings["%s_m%s_s" % (label, m)] = time.time() - t1

    _write_csv(os.path.join(out_dir, "results.csv"), rows)
    manifest = _manifest(
        cfg,
        {"timings": timings, "failures": failures,
         "load_integral": float(np.sum(loads)),
         "m_per_grid": {"%dx%d" % g: m for g, m in grids_with_m}},
    )
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return rows


def run_convergence(cfg, out_dir=None):
    out_dir = out_dir or cfg.out
    cases = [(g, cfg.m_for(g)) for g in cfg.coarse_grids]
    return _run_cases(cfg, out_dir, cases)


def run_single(cfg, out_dir=None):
    out_dir = out_dir or cfg.out
    grid = cfg.coarse_grids[0]
    return _run_cases(cfg, out_dir, [(grid, cfg.m_for(grid))])


def run_spe10(cfg, out_dir=None):
    out_dir = out_dir or cfg.out
    grid = cfg.coarse_grids[0]
    ms = cfg.raw.get("m_values", [2, 3, 4])
    return _run_cases(cfg, out_dir, [(grid, int(m)) for m in ms])


def run_decay(cfg, out_dir=None):
    """Ideal-corrector tails and localization errors for chosen elements."""
    out_dir = out_dir or cfg.out
    os.makedirs(out_dir, exist_ok=True)
    fine = build_structured_mesh(*cfg.fine_cells, domain=cfg.domain)
    coeff = _build_coefficient(cfg, fine)
    coarse = build_structured_mesh(*cfg.coarse_grids[0], domain=cfg.domain)
    tg = TwoGrid(coarse, fine, nest_structured(coarse, fine))
    pi = build_quasi_interpolation(tg)
    A_h = assemble_weighted_mass(tg.V_h, coeff)

    if cfg.decay_elements == "center":
        nx, ny = coarse.structured_shape
        elements = [2 * ((ny // 2) * nx + nx // 2)]
    else:
        elements = [int(t) for t in cfg.decay_elements]

    path = os.path.join(out_dir, "decay_correctors.csv")
    with open(path, "w") as fh:
        fh.write("element,quantity,m,value\n")
        for T in elements:
            dof = next(
                int(d) for d in tg.V_H.edge_dof[tg.coarse.tri_edges[T]] if d >= 0
            )
            ideal_patch = build_patch_problem(tg, pi.matrix, coeff, T, None, A_h=A_h)
            w_ideal = element_corrector(
                tg, pi.matrix, coeff, T, dof, None, patch=ideal_patch, A_h=A_h
            )
            tails = metrics.tail_energies(tg, w_ideal, coeff, T, cfg.decay_layers)
            for m, v in zip(cfg.decay_layers, tails):
                fh.write("%d,tail,%d,%.12e\n" % (T, m, v))
            for m in cfg.decay_layers:
                w_m = element_corrector(tg, pi.matrix, coeff, T, dof, m, A_h=A_h)
                err = metrics.energy_error(w_ideal, w_m, coeff, mass=A_h)
                fh.write("%d,localization,%d,%.12e\n" % (T, m, err))

    manifest = _manifest(cfg, {"elements": elements})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


_RUNNERS = {
    "convergence": run_convergence,
    "spe10": run_spe10,
    "decay": run_decay,
    "single": run_single,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="rtlod", description="multiscale mixed Darcy experiment runner"
    )
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument(
        "--experiment", default=None, choices=sorted(_RUNNERS),
        help="override the config's experiment kind",
    )
    args = parser.parse_args(argv)

    with open(args.config) as fh:
        data = json.load(fh)
    if args.experiment:
        data["experiment"] = args.experiment
    if args.threads:
        data["threads"] = args.threads
    if args.out:
        data["out"] = args.out
    cfg = ExperimentConfig(data)
    result = _RUNNERS[cfg.experiment](cfg)
    if isinstance(result, list):
        print("wrote %d result rows to %s" % (len(result), cfg.out))
    else:
        print("wrote %s" % result)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
