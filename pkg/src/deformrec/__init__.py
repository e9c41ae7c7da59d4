"""Online recovery of deforming surfaces from depth and optical flow.

The canonical model is a set of grid maps (points, derivatives, texture)
that is deformed, re-projected and fused with each new frame; camera motion
is treated as scene motion throughout.
"""

from .estimator import DeformationRecovery
from .measure import CameraIntrinsics, FrameBundle, InstrumentPose
from .rastermap import GridDomain, ParamSet, RasterMap, read_rtf, write_rtf
from .surfgeom import LocalDeformation, SurfaceStrain

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "DeformationRecovery",
    "FrameBundle",
    "GridDomain",
    "InstrumentPose",
    "LocalDeformation",
    "ParamSet",
    "RasterMap",
    "SurfaceStrain",
    "read_rtf",
    "write_rtf",
]
