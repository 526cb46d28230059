"""Fast direct solvers for 2D Stokes boundary integral equations with local updates.

The reference discretization is solved with a hierarchically block separable
(HBS) direct solver. Local refinements and added holes are handled by an
extended linear system whose update is low rank, so the reference inverse is
reused through the Woodbury formula, either as a direct solver or as a GMRES
preconditioner.
"""
from .els import (ConditioningReport, DenseSolver, ElsSolver, WoodburySingularityError, conditioning_report,
                  els_apply_forward, els_build, els_build_holes, els_solve)
from .geometry import (PRESETS, Discretization, GeometryError, ParametricCurve, RefinementPlan, add_holes,
                       coarsen, panelize, panels_near, refine)
from .hbs import HbsOperator, HbsSingularityError, build_solver, compress
from .krylov import GmresConfig, GmresNonConvergence, GmresResult, gmres
from .lowrank import (IdResult, LowRankUpdate, PartitionTree, ProxyGeometry, ProxyViolationError, compress_block_far,
                      compress_update,
                      row_id, svd_truncate)
from .nystrom import (BieSystem, StokesOperator, assemble, assemble_blocks, evaluate_solution, relative_error,
                      stokeslet_data)

__version__ = "0.1.0"

__all__ = [
    "PRESETS", "BieSystem", "ConditioningReport", "DenseSolver", "Discretization", "ElsSolver", "GeometryError",
    "GmresConfig", "GmresNonConvergence", "GmresResult", "HbsOperator", "HbsSingularityError", "IdResult",
    "LowRankUpdate", "ParametricCurve", "PartitionTree", "ProxyGeometry", "ProxyViolationError", "RefinementPlan",
    "StokesOperator", "WoodburySingularityError", "add_holes", "assemble", "assemble_blocks", "build_solver",
    "coarsen", "compress", "compress_block_far", "compress_update", "conditioning_report", "els_apply_forward", "els_build",
    "els_build_holes", "els_solve", "evaluate_solution", "gmres", "panelize", "panels_near", "refine",
    "relative_error", "row_id", "stokeslet_data", "svd_truncate",
]
