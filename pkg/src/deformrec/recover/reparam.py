"""Re-projection of the deformed canonical geometry onto the canonical grid."""

from __future__ import annotations

import logging

import numpy as np

from ..measure import CameraIntrinsics
from ..rastermap import GridDomain, ParamSet, RasterMap, expand_to
from ..surfgeom import derivative_map
from .state import CanonicalState, RecoveredDeformation

logger = logging.getLogger(__name__)

__all__ = ["grid_triangles", "rasterize", "reparameterize", "MAX_TRIANGLE_EXTENT"]

# Triangles whose projection spans more grid cells than this are treated as
# tears (depth discontinuities) and skipped.
MAX_TRIANGLE_EXTENT = 8
_EDGE_EPS = 1e-6


def grid_triangles(mask: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Triangulate the defined 2x2 quads of a grid mask.

    Full quads give two triangles split along the main diagonal; quads with
    exactly three defined corners give one.

    Returns:
        ``(T, 3)`` node indices.
    """
    a = mask[:-1, :-1]
    b = mask[:-1, 1:]
    c = mask[1:, :-1]
    d = mask[1:, 1:]
    ia = index[:-1, :-1]
    ib = index[:-1, 1:]
    ic = index[1:, :-1]
    id_ = index[1:, 1:]
    tris = []
    full = a & b & c & d
    tris.append(np.stack([ia[full], ib[full], id_[full]], axis=1))
    tris.append(np.stack([ia[full], id_[full], ic[full]], axis=1))
    three = (a.astype(int) + b + c + d) == 3
    for miss, (p, q, r) in (
        (~a, (ib, id_, ic)),
        (~b, (ia, id_, ic)),
        (~c, (ia, ib, id_)),
        (~d, (ia, ib, ic)),
    ):
        sel = three & miss
        tris.append(np.stack([p[sel], q[sel], r[sel]], axis=1))
    return np.concatenate(tris).reshape(-1, 3).astype(np.int64)


def rasterize(domain: GridDomain, uv: np.ndarray, z: np.ndarray, tris: np.ndarray,
              attrs: np.ndarray, splat: np.ndarray | None = None):
    """Z-buffered rasterization of projected triangles onto grid points.

    Attributes are interpolated with perspective-correct barycentric weights,
    so a planar triangle yields 3D points exactly on its plane.  Where several
    candidates hit a grid point the one nearest the camera wins.

    Args:
        domain: target grid.
        uv: ``(N, 2)`` projected canonical coordinates of the vertices.
        z: ``(N,)`` vertex depths (positive).
        tris: ``(T, 3)`` vertex indices.
        attrs: ``(N, K)`` per-vertex attributes.
        splat: optional vertex indices to write to their nearest grid point
            directly (for vertices belonging to no triangle).

    Returns:
        ``(values (K, H, W), covered (H, W), depth (H, W))``.
    """
    h, w = domain.shape
    ou, ov = domain.offset
    hit_pix, hit_depth, hit_vals = [], [], []

    if len(tris):
        P = uv[tris]  # (T, 3, 2)
        lo = np.ceil(P.min(axis=1) - _EDGE_EPS).astype(np.int64)
        hi = np.floor(P.max(axis=1) + _EDGE_EPS).astype(np.int64)
        ext = hi - lo + 1
        keep = np.all(ext <= MAX_TRIANGLE_EXTENT, axis=1) & np.all(ext > 0, axis=1)
        if np.any(~keep & np.all(ext > MAX_TRIANGLE_EXTENT, axis=1)):
            logger.debug("skipping %d stretched triangles", int(np.sum(~keep)))
        tris, P, lo, ext = tris[keep], P[keep], lo[keep], ext[keep]
        x0, y0 = P[:, 0, 0], P[:, 0, 1]
        e1 = P[:, 1] - P[:, 0]
        e2 = P[:, 2] - P[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        ok = np.abs(det) > 1e-12
        tris, P, lo, ext, x0, y0, e1, e2, det = (
            a[ok] for a in (tris, P, lo, ext, x0, y0, e1, e2, det)
        )
        inv_z = 1.0 / z[tris]  # (T, 3)
        max_w = int(ext[:, 0].max(initial=0))
        max_h = int(ext[:, 1].max(initial=0))
        for dy in range(max_h):
            for dx in range(max_w):
                sel = (dx < ext[:, 0]) & (dy < ext[:, 1])
                if not sel.any():
                    continue
                pu = (lo[sel, 0] + dx).astype(np.float64)
                pv = (lo[sel, 1] + dy).astype(np.float64)
                rx = pu - x0[sel]
                ry = pv - y0[sel]
                d = det[sel]
                l1 = (rx * e2[sel, 1] - ry * e2[sel, 0]) / d
                l2 = (e1[sel, 0] * ry - e1[sel, 1] * rx) / d
                l0 = 1.0 - l1 - l2
                inside = (l0 >= -_EDGE_EPS) & (l1 >= -_EDGE_EPS) & (l2 >= -_EDGE_EPS)
                if not inside.any():
                    continue
                lam = np.clip(np.stack([l0, l1, l2], axis=1)[inside], 0.0, None)
                lam /= lam.sum(axis=1, keepdims=True)
                t_idx = np.flatnonzero(sel)[inside]
                pw = lam * inv_z[t_idx]
                s = pw.sum(axis=1)
                pw /= s[:, None]
                vals = np.einsum("tk,tkc->tc", pw, attrs[tris[t_idx]])
                col = pu[inside].astype(np.int64) - ou
                row = pv[inside].astype(np.int64) - ov
                hit_pix.append(row * w + col)
                hit_depth.append(1.0 / s)
                hit_vals.append(vals)

    if splat is not None and len(splat):
        q = np.rint(uv[splat]).astype(np.int64)
        hit_pix.append((q[:, 1] - ov) * w + (q[:, 0] - ou))
        hit_depth.append(z[splat])
        hit_vals.append(attrs[splat])

    k = attrs.shape[1]
    values = np.zeros((k, h, w))
    covered = np.zeros((h, w), dtype=bool)
    depth = np.full((h, w), np.inf)
    if not hit_pix:
        return values, covered, depth
    pix = np.concatenate(hit_pix)
    dep = np.concatenate(hit_depth)
    vals = np.concatenate(hit_vals)
    order = np.lexsort((dep, pix))
    pix, dep, vals = pix[order], dep[order], vals[order]
    first = np.ones(pix.size, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, dep, vals = pix[first], dep[first], vals[first]
    rows, cols = np.divmod(pix, w)
    values[:, rows, cols] = vals.T
    covered[rows, cols] = True
    depth[rows, cols] = dep
    return values, covered, depth


def reparameterize(state: CanonicalState, rec: RecoveredDeformation,
                   K: CameraIntrinsics) -> CanonicalState:
    """Align the deformed canonical geometry with the next frame's image space.

    The deformed points are projected through ``K`` and resampled onto the
    canonical grid (which grows by a fixed margin when they fall outside it).
    Points behind the camera are dropped and folds resolve to the surface
    nearest the camera.  Texture follows the points; derivatives are
    recomputed from the resampled point map.
    """
    dom = state.domain
    mask = state.params.defined
    index = np.full(dom.shape, -1, dtype=np.int64)
    rows, cols = np.nonzero(mask)
    index[rows, cols] = np.arange(rows.size)
    P = state.points.values[:, rows, cols].T.astype(np.float64)
    Q = P + rec.disp.values[:, rows, cols].T
    tex = state.texture.values[:, rows, cols].T.astype(np.float64)

    uv, front = K.project_canonical(Q, state.image_domain)
    finite = np.all(np.isfinite(uv), axis=1) & (np.abs(uv).max(axis=1) < 1e6)
    good = front & finite
    tris = grid_triangles(mask, index)
    tris = tris[np.all(good[tris], axis=1)]
    in_tri = np.zeros(rows.size, dtype=bool)
    in_tri[tris.ravel()] = True
    splat = np.flatnonzero(good & ~in_tri)

    used = np.zeros(rows.size, dtype=bool)
    used[tris.ravel()] = True
    used[splat] = True
    new_dom = dom
    if used.any():
        ulo, vlo = np.floor(uv[used].min(axis=0)).astype(int)
        uhi, vhi = np.ceil(uv[used].max(axis=0)).astype(int)
        new_dom = dom.grow_to_cover(ulo, uhi, vlo, vhi)
        if new_dom != dom:
            logger.debug("canonical domain grows %s -> %s", dom, new_dom)

    attrs = np.concatenate([Q, tex], axis=1)
    zq = np.where(good, Q[:, 2], 1.0)
    values, covered, _ = rasterize(new_dom, uv, zq, tris, attrs, splat=splat)
    points = RasterMap(new_dom, values[0:3], covered)
    texture = RasterMap(new_dom, values[3:], covered)
    return CanonicalState(
        params=ParamSet(new_dom, covered),
        points=points,
        derivs=derivative_map(points),
        texture=texture,
        frame_index=state.frame_index,
        image_domain=state.image_domain,
    )
