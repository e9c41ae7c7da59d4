from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..measure import FrameBundle
from ..rastermap import GridDomain, ParamSet, RasterMap
from ..surfgeom import derivative_map

__all__ = [
    "CanonicalState",
    "InlierPartition",
    "RecoveredDeformation",
    "InitializationError",
    "init_state",
]


class InitializationError(ValueError):
    pass


@dataclass(frozen=True)
class CanonicalState:
    """Persistent canonical model: geometry, texture and parameter set.

    ``image_domain`` is the camera-centred image grid the canonical space is
    aligned with; every map shares ``params.domain``.
    """

    params: ParamSet
    points: RasterMap
    derivs: RasterMap
    texture: RasterMap
    frame_index: int
    image_domain: GridDomain

    @property
    def domain(self) -> GridDomain:
        return self.params.domain

    def __len__(self) -> int:
        return len(self.params)

    def check(self, atol: float = 1e-6) -> None:
        """Assert the structural invariants (used by tests and debug runs)."""
        for name in ("points", "derivs", "texture"):
            m = getattr(self, name)
            if m.domain != self.domain:
                raise AssertionError(f"{name} lives on {m.domain}, params on {self.domain}")
        if not np.array_equal(self.points.mask, self.params.defined):
            raise AssertionError("points not defined exactly on params")
        if not np.array_equal(self.texture.mask, self.params.defined):
            raise AssertionError("texture not defined exactly on params")
        fresh = derivative_map(self.points)
        if not np.array_equal(fresh.mask, self.derivs.mask):
            raise AssertionError("derivative support out of date")
        if fresh.mask.any():
            err = np.abs(fresh.values[:, fresh.mask] - self.derivs.values[:, fresh.mask]).max()
            if err > atol:
                raise AssertionError(f"derivatives stale by {err:g}")

    @classmethod
    def from_maps(cls, points: RasterMap, texture: RasterMap, frame_index: int,
                  image_domain: GridDomain) -> "CanonicalState":
        """Build a state from points and texture, deriving params and derivatives."""
        params = points.defined
        texture = texture.with_defined(params)
        if not np.array_equal(texture.mask, params.defined):
            # texture missing where geometry exists: fill with zeros
            texture = RasterMap(points.domain, texture.values, params.defined)
        return cls(params, points, derivative_map(points), texture, int(frame_index), image_domain)


@dataclass(frozen=True)
class InlierPartition:
    inliers: ParamSet
    outliers: ParamSet
    occluded: ParamSet
    out_of_fov: ParamSet


@dataclass(frozen=True)
class RecoveredDeformation:
    """Forward canonical deformation at frame ``t``.

    ``disp`` and ``local`` are defined on all of the canonical parameter set;
    ``deformed_derivs`` holds the deformed local geometry used as the
    displacement regularization target.
    """

    disp: RasterMap
    local: RasterMap
    deformed_derivs: RasterMap | None = None


def init_state(bundle: FrameBundle) -> CanonicalState:
    """Initial canonical model, identical to the (masked) first frame."""
    pts = bundle.points
    if len(pts) == 0:
        raise InitializationError("first frame has no defined points")
    return CanonicalState.from_maps(pts, bundle.texture, 0, pts.domain)
