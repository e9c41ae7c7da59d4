from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..measure import (
    CameraIntrinsics,
    FrameBundle,
    mask_out_instrument,
    measure_local_deformation,
    scene_flow,
)
from ..rastermap import RasterMap, reframe
from ..surfgeom import apply_batch, derivative_map
from .fusion import fuse
from .optimize import ALPHA, optimize_displacement, optimize_local_deformation
from .outliers import STRAIN_GATE, detect_outliers
from .reparam import reparameterize
from .state import CanonicalState, InlierPartition, RecoveredDeformation

logger = logging.getLogger(__name__)

__all__ = ["StepReport", "deform_local_geometry", "measure_frame", "step"]


@dataclass
class StepReport:
    """Diagnostics of one pipeline iteration (times in milliseconds)."""

    n_points: int = 0
    n_inliers: int = 0
    partition: InlierPartition | None = None
    timing_ms: dict = field(default_factory=dict)

    @property
    def optimize_ms(self) -> float:
        return sum(self.timing_ms.get(k, 0.0) for k in ("outliers", "local", "deform", "displacement"))


def measure_frame(bundle_t: FrameBundle, bundle_t1: FrameBundle) -> tuple[RasterMap, RasterMap]:
    """Image-space displacement and local-deformation measurements at ``t``."""
    P_t = bundle_t.points
    dP_t = derivative_map(P_t)
    F_I = scene_flow(P_t, bundle_t1.points, bundle_t.flow)
    D_I = measure_local_deformation(P_t, dP_t, F_I)
    return F_I, D_I


def deform_local_geometry(derivs: RasterMap, local: RasterMap) -> RasterMap:
    """Apply a local-deformation map to a derivative map point by point."""
    local = reframe(local, derivs.domain)
    ok = derivs.mask & local.mask
    out = np.zeros((6,) + derivs.domain.shape)
    out[:, ok] = apply_batch(derivs.values[:, ok].T, local.values[:, ok].T).T
    return RasterMap(derivs.domain, out, ok)


def step(
    state: CanonicalState,
    bundle_t: FrameBundle,
    bundle_t1: FrameBundle,
    K: CameraIntrinsics,
    alpha: float = ALPHA,
    strain_gate: float = STRAIN_GATE,
    use_pose: bool = True,
    report: StepReport | None = None,
) -> tuple[CanonicalState, RecoveredDeformation]:
    """One online iteration: optimize the canonical deformation at ``t``,
    reparameterize, and fuse frame ``t+1``.

    Bundles are instrument-masked here unless already masked.  The instrument
    pose of frame ``t+1`` (if any, and if ``use_pose``) bounds the deformed
    occluded geometry.

    Returns:
        The canonical state at ``t+1`` and the forward deformation at ``t``.
    """
    report = StepReport() if report is None else report
    clock = time.perf_counter
    bt = mask_out_instrument(bundle_t)
    bt1 = mask_out_instrument(bundle_t1)

    t0 = clock()
    F_I, D_I = measure_frame(bt, bt1)
    t1 = clock()
    part = detect_outliers(state, D_I, F_I, image_domain=bt.domain,
                           instrument_mask=bt.instrument_mask, strain_gate=strain_gate)
    t2 = clock()
    local = optimize_local_deformation(D_I, part, alpha=alpha)
    t3 = clock()
    target = deform_local_geometry(state.derivs, local)
    t4 = clock()
    pose = bt1.pose if use_pose else None
    _, disp = optimize_displacement(state, F_I, target, part, pose=pose)
    t5 = clock()
    rec = RecoveredDeformation(disp=disp, local=local, deformed_derivs=target)
    reparam = reparameterize(state, rec, K)
    t6 = clock()
    new_state = fuse(reparam, bt1)
    t7 = clock()

    report.n_points = len(state)
    report.n_inliers = len(part.inliers)
    report.partition = part
    report.timing_ms = {
        "measure": 1e3 * (t1 - t0),
        "outliers": 1e3 * (t2 - t1),
        "local": 1e3 * (t3 - t2),
        "deform": 1e3 * (t4 - t3),
        "displacement": 1e3 * (t5 - t4),
        "reparameterize": 1e3 * (t6 - t5),
        "fuse": 1e3 * (t7 - t6),
    }
    logger.debug("frame %d: %d points, %d inliers, optimize %.1f ms", state.frame_index,
                 report.n_points, report.n_inliers, report.optimize_ms)
    return new_state, rec
