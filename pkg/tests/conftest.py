import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from deformrec.measure import CameraIntrinsics, FrameBundle
from deformrec.rastermap import GridDomain, ParamSet, RasterMap

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def plane_points(domain: GridDomain, K: CameraIntrinsics, z: float = 100.0) -> RasterMap:
    """Fronto-parallel plane at depth ``z`` seen on an image grid."""
    h, w = domain.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    zz = np.full((h, w), z)
    return RasterMap(domain, np.stack([zz * (u - K.cx) / K.fx, zz * (v - K.cy) / K.fy, zz]))


def make_bundle(points: RasterMap, flow: np.ndarray | None = None,
                instrument: np.ndarray | None = None, pose=None) -> FrameBundle:
    dom = points.domain
    fl = np.zeros((2,) + dom.shape) if flow is None else flow
    inst = np.zeros(dom.shape, bool) if instrument is None else instrument
    tex = RasterMap(dom, np.full((3,) + dom.shape, 128, dtype=np.uint8), points.mask)
    return FrameBundle(points, RasterMap(dom, fl, points.mask), ParamSet(dom, inst), tex, pose)


@pytest.fixture
def K64():
    return CameraIntrinsics(100.0, 100.0, 32.0, 32.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
