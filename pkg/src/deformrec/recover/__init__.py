"""Online canonical-model deformation recovery."""

from .fusion import fuse
from .linalg import GridGraph, SolverError, pcg
from .optimize import (
    ALPHA,
    DisplacementProblem,
    displacement_problem,
    optimize_displacement,
    optimize_local_deformation,
    solve_bounded,
)
from .outliers import STRAIN_GATE, detect_outliers, strain_gate_passes
from .pipeline import StepReport, deform_local_geometry, measure_frame, step
from .reparam import reparameterize
from .state import (
    CanonicalState,
    InitializationError,
    InlierPartition,
    RecoveredDeformation,
    init_state,
)

__all__ = [
    "ALPHA",
    "STRAIN_GATE",
    "CanonicalState",
    "DisplacementProblem",
    "GridGraph",
    "InitializationError",
    "InlierPartition",
    "RecoveredDeformation",
    "SolverError",
    "StepReport",
    "deform_local_geometry",
    "detect_outliers",
    "displacement_problem",
    "fuse",
    "init_state",
    "measure_frame",
    "optimize_displacement",
    "optimize_local_deformation",
    "pcg",
    "reparameterize",
    "solve_bounded",
    "step",
    "strain_gate_passes",
]
