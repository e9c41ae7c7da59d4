"""Scikit-learn style front end to the online recovery loop."""

from __future__ import annotations

import logging

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .measure import mask_out_instrument
from .recover import STRAIN_GATE, CanonicalState, StepReport, init_state, step
from .recover.optimize import ALPHA
from .straintrack import TrackSet, accumulative_deformation, advance_tracks, canonical_flow
from .validation import check_alpha, check_bundle, check_intrinsics, check_strain_gate

logger = logging.getLogger(__name__)

__all__ = ["DeformationRecovery"]


class DeformationRecovery(BaseEstimator):
    """Online canonical-model recovery of a deforming surface.

    Frames are consumed in order, one :class:`~deformrec.measure.FrameBundle`
    at a time.  ``fit`` restarts from its first frame; ``partial_fit``
    continues the current sequence.

    Args:
        intrinsics: camera intrinsics (``CameraIntrinsics``, dict, 4-tuple or 3x3).
        alpha: smoothness weight of the local-deformation map.
        strain_gate: inter-frame principal strain bound for inliers.
        use_pose: bound occluded geometry by the instrument depth when given.
        track: follow every point of the first frame and expose accumulative
            deformation.

    Attributes:
        state_: current ``CanonicalState``.
        deformations_: forward ``RecoveredDeformation`` per processed step.
        reports_: ``StepReport`` per processed step.
        n_frames_seen_: frames consumed since the last reset.
        tracks_: ``TrackSet`` when ``track`` is on.
    """

    def __init__(self, intrinsics=None, alpha: float = ALPHA, strain_gate: float = STRAIN_GATE,
                 use_pose: bool = True, track: bool = False):
        self.intrinsics = intrinsics
        self.alpha = alpha
        self.strain_gate = strain_gate
        self.use_pose = use_pose
        self.track = track

    def _reset(self, bundle) -> None:
        self._K = check_intrinsics(self.intrinsics)
        check_alpha(self.alpha)
        check_strain_gate(self.strain_gate)
        self._prev = mask_out_instrument(bundle)
        self.state_ = init_state(self._prev)
        self._start = self.state_
        self.deformations_ = []
        self.reports_ = []
        self.n_frames_seen_ = 1
        self.tracks_ = TrackSet.seed(self.state_.params, 0, self.state_.points) if self.track else None

    def partial_fit(self, bundle, y=None) -> "DeformationRecovery":
        """Consume one more frame (initialising on the first call)."""
        if self.intrinsics is None:
            raise ValueError("intrinsics are required")
        check_bundle(bundle)
        if not hasattr(self, "state_"):
            self._reset(bundle)
            return self
        report = StepReport()
        new_state, rec = step(self.state_, self._prev, bundle, self._K, alpha=self.alpha,
                              strain_gate=self.strain_gate, use_pose=self.use_pose, report=report)
        if self.tracks_ is not None:
            flow = canonical_flow(rec, self.state_, self._K)
            self.tracks_ = advance_tracks(self.tracks_, flow, rec.disp)
        self.state_ = new_state
        self._prev = mask_out_instrument(bundle)
        self.deformations_.append(rec)
        self.reports_.append(report)
        self.n_frames_seen_ += 1
        return self

    def fit(self, frames, y=None) -> "DeformationRecovery":
        """Process a whole sequence from scratch."""
        for attr in ("state_", "deformations_", "reports_", "n_frames_seen_", "tracks_"):
            self.__dict__.pop(attr, None)
        frames = list(frames)
        if not frames:
            raise ValueError("fit needs at least one frame")
        for bundle in frames:
            self.partial_fit(bundle)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "state_"):
            raise NotFittedError("call fit or partial_fit first")

    @property
    def canonical_state(self) -> CanonicalState:
        self._check_fitted()
        return self.state_

    def transform(self, frames=None):
        """Canonical point map after consuming ``frames`` (if given)."""
        if frames is not None:
            for bundle in frames:
                self.partial_fit(bundle)
        self._check_fitted()
        return self.state_.points

    def accumulative_deformation(self):
        """``(displacement, local_deformation)`` of tracked points since the first frame."""
        self._check_fitted()
        if self.tracks_ is None:
            raise ValueError("construct with track=True to follow points")
        return accumulative_deformation(self._start.points, self.state_, self.tracks_)
