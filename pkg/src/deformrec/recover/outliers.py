from __future__ import annotations

import numpy as np

from ..rastermap import GridDomain, ParamSet, RasterMap, reframe
from ..surfgeom import principal_batch, strain_batch
from .state import CanonicalState, InlierPartition

__all__ = ["STRAIN_GATE", "strain_gate_passes", "detect_outliers"]

STRAIN_GATE = 0.1


def strain_gate_passes(D: np.ndarray, gate: float = STRAIN_GATE) -> np.ndarray:
    """True where both principal strains of ``(..., 6)`` descriptors lie in ``[-gate, gate]``."""
    hi, lo = principal_batch(strain_batch(D))
    return (hi <= gate) & (lo >= -gate)


def detect_outliers(
    state: CanonicalState,
    D_I: RasterMap,
    F_I: RasterMap,
    image_domain: GridDomain | None = None,
    instrument_mask: ParamSet | None = None,
    strain_gate: float = STRAIN_GATE,
) -> InlierPartition:
    """Split the canonical parameter set into inliers and outliers.

    A canonical point is an outlier when it lies outside the image rectangle
    (``out_of_fov``), is covered by the instrument or unseen in the image
    (``occluded``), has no displacement or local-deformation measurement, or
    its measured principal strain leaves ``[-strain_gate, strain_gate]``.

    Measurement maps may live on the image domain; they are re-expressed on
    the canonical domain.
    """
    dom = state.domain
    image_domain = state.image_domain if image_domain is None else image_domain
    U_C = state.params.defined
    u, v = dom.coords()
    in_image = image_domain.inside(u, v)
    D = reframe(D_I, dom)
    F = reframe(F_I, dom)

    out_of_fov = U_C & ~in_image
    unseen = np.zeros(dom.shape, dtype=bool)
    if instrument_mask is not None:
        unseen |= instrument_mask.on(dom).defined
    occluded = U_C & in_image & unseen

    measured = D.mask & F.mask
    gate_ok = np.zeros(dom.shape, dtype=bool)
    gate_ok[measured] = strain_gate_passes(D.values[:, measured].T, strain_gate)
    inliers = U_C & in_image & ~unseen & measured & gate_ok
    return InlierPartition(
        inliers=ParamSet(dom, inliers),
        outliers=ParamSet(dom, U_C & ~inliers),
        occluded=ParamSet(dom, occluded),
        out_of_fov=ParamSet(dom, out_of_fov),
    )
