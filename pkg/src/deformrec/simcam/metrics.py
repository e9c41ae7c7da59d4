"""Surface accuracy metrics against ground truth."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..rastermap import ParamSet, RasterMap, reframe
from ..recover.linalg import GridGraph
from ..recover.reparam import grid_triangles

__all__ = ["eval_rmse_msd", "point_triangle_distance", "nearest_surface_distance"]

_CANDIDATE_VERTICES = 4


def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Euclidean distance from points ``p`` to triangles ``abc`` (all ``(N, 3)``).

    Closest-point classification over the triangle's Voronoi regions.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = vb / denom
        w = vc / denom
    q = a + v[:, None] * ab + w[:, None] * ac  # interior by default

    def pick(cond, value):
        nonlocal q, done
        sel = cond & ~done
        q[sel] = value[sel]
        done |= sel

    done = np.zeros(len(p), dtype=bool)
    pick((d1 <= 0) & (d2 <= 0), a)
    pick((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    pick((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t_ab[:, None] * ab)
    pick((d6 >= 0) & (d5 <= d6), c)
    pick((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t_ac[:, None] * ac)
    pick((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + t_bc[:, None] * (c - b))
    # degenerate triangles fall back to the nearest vertex
    bad = ~np.isfinite(q).all(axis=1)
    if bad.any():
        verts = np.stack([a[bad], b[bad], c[bad]], axis=1)
        k = np.argmin(np.linalg.norm(verts - p[bad, None], axis=2), axis=1)
        q[bad] = verts[np.arange(bad.sum()), k]
    return np.linalg.norm(p - q, axis=1)


def nearest_surface_distance(query: np.ndarray, truth: RasterMap | np.ndarray) -> np.ndarray:
    """Distance from each query point to the truth surface.

    A truth point map is triangulated over its defined grid quads; the
    triangles around the few nearest truth vertices are searched exactly.  A
    bare ``(M, 3)`` truth array falls back to nearest-point distance.
    """
    query = np.asarray(query, dtype=np.float64)
    if not isinstance(truth, RasterMap):
        pts = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
        d, _ = cKDTree(pts).query(query)
        return d
    graph = GridGraph.from_mask(truth.mask)
    verts = graph.node_values(truth.values.astype(np.float64))
    tris = grid_triangles(truth.mask, graph.index)
    tree = cKDTree(verts)
    k = min(_CANDIDATE_VERTICES, len(verts))
    dist, near = tree.query(query, k=k)
    dist = dist.reshape(len(query), -1)
    near = near.reshape(len(query), -1)
    best = dist.min(axis=1)
    if len(tris) == 0:
        return best
    # triangle incidence table: vertex -> triangles (padded with -1)
    owner = np.repeat(np.arange(len(tris)), 3)
    vert = tris.ravel()
    order = np.argsort(vert, kind="stable")
    vert, owner = vert[order], owner[order]
    starts = np.searchsorted(vert, np.arange(len(verts)))
    counts = np.bincount(vert, minlength=len(verts))
    width = int(counts.max())
    table = -np.ones((len(verts), width), dtype=np.int64)
    slot = np.arange(len(vert)) - starts[vert]
    table[vert, slot] = owner
    cand = table[near].reshape(len(query), -1)  # (Q, k*width)
    qi, ci = np.nonzero(cand >= 0)
    t = cand[qi, ci]
    d = point_triangle_distance(query[qi], verts[tris[t, 0]], verts[tris[t, 1]], verts[tris[t, 2]])
    np.minimum.at(best, qi, d)
    return best


def eval_rmse_msd(recovered: RasterMap, truth: RasterMap | np.ndarray,
                  region: ParamSet) -> tuple[float, float, float]:
    """RMSE, mean surface distance and its standard deviation over ``region`` (mm).

    RMSE compares grid-aligned correspondences when ``truth`` is a point map;
    for a bare truth point cloud it is the RMS of nearest-point distances.

    Raises:
        ValueError: the region holds no point defined in ``recovered``.
    """
    reg = region.on(recovered.domain).defined & recovered.mask
    if not reg.any():
        raise ValueError("evaluation region is empty")
    rec = recovered.values[:, reg].T.astype(np.float64)
    msd_d = nearest_surface_distance(rec, truth)
    if isinstance(truth, RasterMap):
        tr = reframe(truth, recovered.domain)
        both = reg & tr.mask
        if not both.any():
            raise ValueError("evaluation region has no ground-truth correspondences")
        diff = recovered.values[:, both].astype(np.float64) - tr.values[:, both].astype(np.float64)
        rmse = float(np.sqrt(np.mean(np.sum(diff * diff, axis=0))))
    else:
        rmse = float(np.sqrt(np.mean(msd_d ** 2)))
    return rmse, float(msd_d.mean()), float(msd_d.std())
