"""Per-frame measurement maps from raw frame inputs."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .rastermap import GridDomain, ParamSet, RasterMap, reframe, sample_bilinear_many
from .surfgeom import derivative_map, extract_batch

__all__ = [
    "CameraIntrinsics",
    "InstrumentPose",
    "FrameBundle",
    "points_from_depth",
    "mask_out_instrument",
    "scene_flow",
    "measure_local_deformation",
    "MASK_DILATION",
]

# The instrument mask must cover the whole instrument; dilate to be safe.
MASK_DILATION = 2


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def project(self, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates of ``(..., 3)`` points and a validity flag (z > 0)."""
        xyz = np.asarray(xyz, dtype=np.float64)
        z = xyz[..., 2]
        ok = z > 0
        zs = np.where(ok, z, 1.0)
        u = self.fx * xyz[..., 0] / zs + self.cx
        v = self.fy * xyz[..., 1] / zs + self.cy
        return np.stack([u, v], axis=-1), ok

    def project_canonical(self, xyz: np.ndarray, image_domain: GridDomain):
        """Project into canonical coordinates of a camera-centred image grid."""
        uv, ok = self.project(xyz)
        return uv + np.asarray(image_domain.offset, dtype=np.float64), ok

    def scaled(self, stride: int) -> "CameraIntrinsics":
        """Intrinsics for an image subsampled by taking every ``stride``-th pixel."""
        s = float(stride)
        return CameraIntrinsics(self.fx / s, self.fy / s, self.cx / s, self.cy / s)

    def as_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True)
class InstrumentPose:
    """Depth of the instrument's bottom surface over its image mask (mm)."""

    z_bottom: RasterMap


@dataclass(frozen=True)
class FrameBundle:
    points: RasterMap
    flow: RasterMap
    instrument_mask: ParamSet
    texture: RasterMap
    pose: InstrumentPose | None = None
    masked: bool = False

    @property
    def domain(self) -> GridDomain:
        return self.points.domain

    @property
    def defined(self) -> ParamSet:
        return self.points.defined


def points_from_depth(depth: RasterMap, K: CameraIntrinsics) -> RasterMap:
    """Pinhole backprojection of a depth map on an image-space grid.

    Pixel coordinates are grid column/row indices; non-positive depth is
    marked undefined.
    """
    h, w = depth.domain.shape
    z = depth.values[0].astype(np.float64)
    ok = depth.mask & (z > 0)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    x = z * (u - K.cx) / K.fx
    y = z * (v - K.cy) / K.fy
    return RasterMap(depth.domain, np.stack([x, y, z]), ok)


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def mask_out_instrument(bundle: FrameBundle, dilation: int = MASK_DILATION) -> FrameBundle:
    """Remove instrument-covered points from every measurement map.

    The mask is dilated by ``dilation`` px first and the dilated mask replaces
    the bundle's instrument mask.  Already-masked bundles pass through.
    """
    if bundle.masked:
        return bundle
    mask = bundle.instrument_mask.on(bundle.domain).defined
    if dilation > 0 and mask.any():
        mask = ndimage.binary_dilation(mask, structure=_disk(dilation))
    keep = ~mask
    return replace(
        bundle,
        points=bundle.points.with_defined(keep),
        flow=bundle.flow.with_defined(keep),
        texture=bundle.texture.with_defined(keep),
        instrument_mask=ParamSet(bundle.domain, mask),
        masked=True,
    )


def scene_flow(P_t: RasterMap, P_t1: RasterMap, flow: RasterMap) -> RasterMap:
    """3D displacement of each point at ``t`` via its forward optical flow.

    Undefined where the flow is undefined or its target lands on an
    undefined (or out-of-domain) point of ``P_t1``.
    """
    flow = reframe(flow, P_t.domain)
    src = P_t.mask & flow.mask
    u, v = P_t.domain.coords()
    uv = np.stack([u[src], v[src]], axis=1).astype(np.float64)
    uv += flow.values[:, src].T
    target, ok = sample_bilinear_many(P_t1, uv)
    disp = np.zeros((3,) + P_t.domain.shape)
    mask = np.zeros(P_t.domain.shape, dtype=bool)
    rows, cols = np.nonzero(src)
    disp[:, rows, cols] = (target - P_t.values[:, src].T.astype(np.float64)).T
    mask[rows[ok], cols[ok]] = True
    return RasterMap(P_t.domain, disp, mask)


def measure_local_deformation(P_t: RasterMap, dP_t: RasterMap, F_I: RasterMap) -> RasterMap:
    """Local deformation of every point given its measured displacement.

    The deformed tangents are ``dP_t + d(F_I)``, which equals
    ``derivative_map(P_t + F_I)`` wherever both use the same stencil and keeps
    translation-only displacement exactly free of local deformation.
    """
    F_I = reframe(F_I, P_t.domain)
    dP_t = reframe(dP_t, P_t.domain)
    dF = derivative_map(F_I.with_defined(P_t.mask))
    ok = dP_t.mask & dF.mask
    before = dP_t.values[:, ok].T
    after = before + dF.values[:, ok].T
    D, good = extract_batch(before, after)
    out = np.zeros((6,) + P_t.domain.shape)
    out[3:5] = 1.0
    mask = np.zeros(P_t.domain.shape, dtype=bool)
    rows, cols = np.nonzero(ok)
    out[:, rows, cols] = D.T
    mask[rows[good], cols[good]] = True
    return RasterMap(P_t.domain, out, mask)
