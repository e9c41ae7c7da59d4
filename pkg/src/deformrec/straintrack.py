"""Inter-frame and accumulative surface strain with long-horizon point tracks."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .measure import CameraIntrinsics
from .rastermap import ParamSet, RasterMap, reframe, sample_bilinear_many
from .recover.state import CanonicalState, RecoveredDeformation
from .surfgeom import derivative_map, extract_batch, principal_batch, strain_batch

__all__ = [
    "TrackSet",
    "canonical_flow",
    "advance_tracks",
    "accumulative_deformation",
    "strain_rows",
    "write_strain_csv",
    "STRAIN_COLUMNS",
]

STRAIN_COLUMNS = ("frame", "u", "v", "x", "y", "z", "eps_uu", "eps_vv", "eps_uv",
                  "lambda_max", "lambda_min")


@dataclass(frozen=True)
class TrackSet:
    """Canonical points followed from ``start_frame`` onwards.

    ``origin`` holds each track's integer canonical coordinate at the start
    frame (the grid over which accumulative derivatives are taken) and
    ``coords`` its current continuous coordinate.  ``positions``, when
    present, carries each track's 3D position forward by summing the
    recovered per-step displacements along the track.
    """

    start_frame: int
    origin: np.ndarray
    coords: np.ndarray
    alive: np.ndarray
    frame: int
    positions: np.ndarray | None = None

    @classmethod
    def seed(cls, region: ParamSet, frame: int, points: RasterMap | None = None) -> "TrackSet":
        """Tracks at every point of ``region``; pass ``points`` to carry 3D positions."""
        u, v = region.domain.coords()
        m = region.defined
        origin = np.stack([u[m], v[m]], axis=1).astype(np.int64)
        alive = np.ones(len(origin), bool)
        positions = None
        if points is not None:
            pts = reframe(points, region.domain)
            positions = pts.values[:, m].T.astype(np.float64)
            alive &= pts.mask[m]
        return cls(frame, origin, origin.astype(np.float64), alive, frame, positions)

    def __len__(self) -> int:
        return len(self.origin)


def canonical_flow(rec: RecoveredDeformation, state: CanonicalState, K: CameraIntrinsics) -> RasterMap:
    """2D canonical-space flow induced by a recovered 3D displacement map.

    Undefined where the displaced point falls behind the camera.
    """
    dom = state.domain
    disp = reframe(rec.disp, dom)
    ok = state.params.defined & disp.mask
    P = state.points.values[:, ok].T.astype(np.float64) + disp.values[:, ok].T
    uv, front = K.project_canonical(P, state.image_domain)
    u, v = dom.coords()
    flow = np.zeros((2,) + dom.shape)
    flow[0, ok] = uv[:, 0] - u[ok]
    flow[1, ok] = uv[:, 1] - v[ok]
    mask = np.zeros(dom.shape, dtype=bool)
    rows, cols = np.nonzero(ok)
    mask[rows[front], cols[front]] = True
    return RasterMap(dom, flow, mask)


def advance_tracks(tracks: TrackSet, flow: RasterMap, disp: RasterMap | None = None) -> TrackSet:
    """Move every live track by the bilinearly sampled flow; failed lookups die.

    With ``disp`` (the same step's 3D displacement map) tracks that carry
    positions also move in 3D; a failed displacement lookup kills the track.
    """
    alive = tracks.alive.copy()
    coords = tracks.coords.copy()
    positions = None if tracks.positions is None else tracks.positions.copy()
    if alive.any():
        idx = np.flatnonzero(alive)
        step, ok = sample_bilinear_many(flow, coords[idx])
        if positions is not None and disp is not None:
            d, ok_d = sample_bilinear_many(disp, coords[idx])
            ok &= ok_d
            positions[idx[ok]] += d[ok]
        coords[idx[ok]] += step[ok]
        alive[idx[~ok]] = False
    return replace(tracks, coords=coords, alive=alive, frame=tracks.frame + 1, positions=positions)


def accumulative_deformation(P_n: RasterMap, state_m: CanonicalState,
                             tracks: TrackSet) -> tuple[RasterMap, RasterMap]:
    """Displacement and local deformation of tracked points since the start frame.

    Tracked positions are the tracks' carried 3D positions when available,
    otherwise samples of the current canonical point map.  They are laid out
    on the start-frame grid, so derivatives over the tracked set use the same
    stencils as the start geometry.

    Returns:
        ``(displacement, local_deformation)`` on ``P_n``'s domain.
    """
    dom = P_n.domain
    cur = np.zeros((3,) + dom.shape)
    have = np.zeros(dom.shape, dtype=bool)
    if tracks.alive.any():
        if tracks.positions is not None:
            pts = tracks.positions[tracks.alive]
            ok = np.ones(len(pts), dtype=bool)
        else:
            pts, ok = sample_bilinear_many(state_m.points, tracks.coords[tracks.alive])
        org = tracks.origin[tracks.alive][ok]
        inside = dom.inside(org[:, 0], org[:, 1])
        rows, cols = dom.index_of(org[inside, 0], org[inside, 1])
        cur[:, rows, cols] = pts[ok][inside].T
        have[rows, cols] = True
    have &= P_n.mask
    start = P_n.with_defined(have)
    tracked = RasterMap(dom, cur, have)
    disp = RasterMap(dom, cur - start.values, have)

    d0 = derivative_map(start)
    d1 = derivative_map(tracked)
    ok = d0.mask & d1.mask
    D, good = extract_batch(d0.values[:, ok].T, d1.values[:, ok].T)
    out = np.zeros((6,) + dom.shape)
    out[3:5] = 1.0
    rows, cols = np.nonzero(ok)
    out[:, rows, cols] = D.T
    mask = np.zeros(dom.shape, dtype=bool)
    mask[rows[good], cols[good]] = True
    return disp, RasterMap(dom, out, mask)


def strain_rows(frame: int, points: RasterMap, local: RasterMap):
    """CSV rows ``(frame, u, v, x, y, z, eps..., lambda_max, lambda_min)``."""
    local = reframe(local, points.domain)
    ok = points.mask & local.mask
    u, v = points.domain.coords()
    eps = strain_batch(local.values[:, ok].T)
    hi, lo = principal_batch(eps)
    xyz = points.values[:, ok].T
    for ui, vi, p, e, a, b in zip(u[ok], v[ok], xyz, eps, hi, lo):
        yield (frame, int(ui), int(vi), *map(float, p), *map(float, e), float(a), float(b))


def write_strain_csv(path, rows, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(STRAIN_COLUMNS)
        for row in rows:
            writer.writerow([f"{x:.6g}" if isinstance(x, float) else x for x in row])
