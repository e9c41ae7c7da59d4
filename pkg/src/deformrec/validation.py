"""Argument and input checks shared by the estimator and the command line."""

from __future__ import annotations

import numbers

import numpy as np

from .measure import CameraIntrinsics, FrameBundle
from .rastermap import RasterMap

__all__ = ["check_alpha", "check_strain_gate", "check_stride", "check_intrinsics", "check_bundle"]


def check_alpha(alpha) -> float:
    if not isinstance(alpha, numbers.Real) or not np.isfinite(alpha) or alpha <= 0:
        raise ValueError(f"alpha must be a positive finite number, got {alpha!r}")
    return float(alpha)


def check_strain_gate(gate) -> float:
    if not isinstance(gate, numbers.Real) or not 0 < gate < 1:
        raise ValueError(f"strain_gate must lie in (0, 1), got {gate!r}")
    return float(gate)


def check_stride(stride) -> int:
    if isinstance(stride, bool) or not isinstance(stride, numbers.Integral) or stride < 1:
        raise ValueError(f"downsample stride must be an integer >= 1, got {stride!r}")
    return int(stride)


def check_intrinsics(K) -> CameraIntrinsics:
    if isinstance(K, CameraIntrinsics):
        return K
    if isinstance(K, dict):
        return CameraIntrinsics(**K)
    arr = np.asarray(K, dtype=np.float64)
    if arr.shape == (4,):
        return CameraIntrinsics(*map(float, arr))
    if arr.shape == (3, 3):
        return CameraIntrinsics(arr[0, 0], arr[1, 1], arr[0, 2], arr[1, 2])
    raise ValueError(f"cannot interpret intrinsics of shape {arr.shape}; "
                     "pass CameraIntrinsics, a dict, (fx, fy, cx, cy) or a 3x3 matrix")


def _check_map(name: str, m, channels: int | tuple[int, ...]) -> None:
    if not isinstance(m, RasterMap):
        raise TypeError(f"{name} must be a RasterMap, got {type(m).__name__}")
    allowed = (channels,) if isinstance(channels, int) else channels
    if m.channels not in allowed:
        raise ValueError(f"{name} has {m.channels} channels, expected {' or '.join(map(str, allowed))}")


def check_bundle(bundle) -> FrameBundle:
    """Verify a frame bundle's maps agree in domain and channel count."""
    if not isinstance(bundle, FrameBundle):
        raise TypeError(f"expected a FrameBundle, got {type(bundle).__name__}")
    _check_map("points", bundle.points, 3)
    _check_map("flow", bundle.flow, 2)
    _check_map("texture", bundle.texture, (1, 3))
    dom = bundle.points.domain
    for name in ("flow", "texture"):
        if getattr(bundle, name).domain != dom:
            raise ValueError(f"{name} domain {getattr(bundle, name).domain} differs from points domain {dom}")
    if bundle.instrument_mask.domain != dom:
        raise ValueError("instrument mask domain differs from points domain")
    if bundle.pose is not None:
        _check_map("pose.z_bottom", bundle.pose.z_bottom, 1)
    return bundle
