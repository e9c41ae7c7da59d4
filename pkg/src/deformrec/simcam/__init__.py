"""Synthetic deformable scenes with analytic ground truth."""

from .dataset import Dataset, DatasetError, downsample_map, load_dataset, write_dataset
from .metrics import eval_rmse_msd, nearest_surface_distance, point_triangle_distance
from .scene import (
    SCENARIOS,
    STRAIN_LIMIT,
    Bend,
    Bump,
    Frame,
    GroundTruth,
    Occluder,
    RigidMotion,
    SceneConfig,
    SheetConfig,
    StrainLimitError,
    UniaxialStretch,
    generate,
    scenario,
)

__all__ = [
    "SCENARIOS",
    "STRAIN_LIMIT",
    "Bend",
    "Bump",
    "Dataset",
    "DatasetError",
    "Frame",
    "GroundTruth",
    "Occluder",
    "RigidMotion",
    "SceneConfig",
    "SheetConfig",
    "StrainLimitError",
    "UniaxialStretch",
    "downsample_map",
    "eval_rmse_msd",
    "generate",
    "load_dataset",
    "nearest_surface_distance",
    "point_triangle_distance",
    "scenario",
    "write_dataset",
]
