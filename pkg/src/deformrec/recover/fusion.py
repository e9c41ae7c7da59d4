from __future__ import annotations

import numpy as np

from ..measure import FrameBundle
from ..rastermap import ParamSet, RasterMap, reframe
from ..surfgeom import derivative_map
from .state import CanonicalState

__all__ = ["fuse"]


def fuse(reparam: CanonicalState, bundle_t1: FrameBundle) -> CanonicalState:
    """Merge newly visible image data into the reparameterized canonical maps.

    The parameter set becomes the union of both.  Geometry keeps canonical
    values wherever they exist and takes image values elsewhere; texture
    prefers the latest image and falls back to the canonical texture.
    """
    dom = reparam.domain.union(bundle_t1.domain)
    if dom != reparam.domain:
        dom = reparam.domain.grow_to_cover(
            dom.u_range[0], dom.u_range[1] - 1, dom.v_range[0], dom.v_range[1] - 1
        )
    can_pts = reframe(reparam.points, dom)
    can_tex = reframe(reparam.texture, dom)
    img_pts = reframe(bundle_t1.points, dom)
    img_tex = reframe(bundle_t1.texture, dom)
    in_can = can_pts.mask
    in_img = img_pts.mask
    fused = in_can | in_img

    pts = np.where(in_can[None], can_pts.values, img_pts.values.astype(np.float64))
    img_tex_ok = in_img & img_tex.mask
    tex = np.where(img_tex_ok[None], img_tex.values.astype(np.float64), can_tex.values)
    points = RasterMap(dom, pts, fused)
    return CanonicalState(
        params=ParamSet(dom, fused),
        points=points,
        derivs=derivative_map(points),
        texture=RasterMap(dom, tex, fused),
        frame_index=reparam.frame_index + 1,
        image_domain=reparam.image_domain,
    )
