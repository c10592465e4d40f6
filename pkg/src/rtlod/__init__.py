"""Mixed RT0 multiscale solver for heterogeneous Darcy problems."""

from .mesh import (
    Rectangle,
    UNIT_SQUARE,
    Mesh,
    NestingMap,
    ElementSet,
    build_structured_mesh,
    refine_uniform,
    nest_structured,
    element_patch,
    vertex_patch,
)
from .coeff import CoefficientField, checkerboard, constant_field, load_raster
from .fespace import (
    RTSpace,
    PressureSpace,
    TwoGrid,
    UnsupportedDegreeError,
    assemble_weighted_mass,
    assemble_div_matrix,
    assemble_load,
    prolongation_matrix,
    evaluate_field,
)
from .interp import (
    QuasiInterpolation,
    cell_average_matrix,
    cell_fit,
    vertex_smooth,
    edge_flux_interpolant,
    build_quasi_interpolation,
)
from .corrector import (
    CorrectorSet,
    PatchProblem,
    element_corrector,
    compute_correctors,
    source_corrector,
    compute_source_correctors,
)
from .lod import (
    ReferenceSolution,
    MultiscaleSolution,
    solve_reference,
    solve_lod,
    solve_ideal,
)
from . import metrics

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
