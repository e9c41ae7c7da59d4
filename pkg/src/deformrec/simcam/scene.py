"""Synthetic deformable sheets observed by a fixed pinhole camera.

A sheet is a rectangle of material coordinates ``X`` (mm).  A motion script
deforms it over time; each frame is rendered by solving, per pixel, for the
material point that projects onto it, so every measurement comes with exact
ground truth.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from ..measure import CameraIntrinsics, FrameBundle, InstrumentPose
from ..rastermap import GridDomain, ParamSet, RasterMap, crop_to
from ..surfgeom import extract_batch, principal_batch, strain_batch

logger = logging.getLogger(__name__)

__all__ = [
    "SheetConfig",
    "UniaxialStretch",
    "Bend",
    "Bump",
    "RigidMotion",
    "Occluder",
    "SceneConfig",
    "GroundTruth",
    "Frame",
    "StrainLimitError",
    "generate",
    "scenario",
    "SCENARIOS",
    "STRAIN_LIMIT",
]

STRAIN_LIMIT = 0.08
_FD_STEP = 1e-4


class StrainLimitError(ValueError):
    """A motion script exceeds the inter-frame strain the engine can gate."""


def _amount(t, start, end) -> float:
    """Frames of an event elapsed by (possibly fractional) time ``t``."""
    return float(np.clip(t - start, 0.0, max(end - start, 0.0)))


@dataclass
class SheetConfig:
    kind: str = "plane"  # "plane" or "dish"
    z0: float = 100.0
    curvature: float = 0.0  # dish: z = z0 + curvature * |X|^2 / 2
    extent: tuple[float, float] = (120.0, 120.0)  # material width, height (mm)

    def embed(self, X: np.ndarray) -> np.ndarray:
        z = np.full(X.shape[:-1], self.z0)
        if self.kind == "dish":
            z = z + 0.5 * self.curvature * np.sum(X * X, axis=-1)
        elif self.kind != "plane":
            raise ValueError(f"unknown sheet kind {self.kind!r}")
        return np.concatenate([X, z[..., None]], axis=-1)

    def contains(self, X: np.ndarray) -> np.ndarray:
        hw = 0.5 * np.asarray(self.extent)
        return np.all(np.abs(X) <= hw, axis=-1)


@dataclass
class UniaxialStretch:
    """Stretch ``(1 + rate)`` per frame along material axis ``u`` or ``v``.

    With a ``band`` ``(lo, hi)`` (mm) only that strip stretches and the rest
    moves rigidly with its edges.
    """

    rate: float = 0.01
    axis: str = "u"
    start: int = 0
    end: int = 10 ** 9
    band: tuple[float, float] | None = None
    kind: str = field(default="uniaxial_stretch", init=False)

    def stretch(self, t) -> float:
        return (1.0 + self.rate) ** _amount(t, self.start, self.end)

    def apply_material(self, X: np.ndarray, t) -> np.ndarray:
        s = self.stretch(t)
        ax = 0 if self.axis == "u" else 1
        a = X[..., ax]
        if self.band is None:
            a2 = s * a
        else:
            lo, hi = self.band
            c = 0.5 * (lo + hi)
            a2 = a + (s - 1.0) * (np.clip(a, lo, hi) - c)
        out = X.copy()
        out[..., ax] = a2
        return out


@dataclass
class Bend:
    """Isometric cylindrical bend about the ``v`` axis, curvature growing per frame."""

    curvature_rate: float = 0.002  # 1/mm per frame
    start: int = 0
    end: int = 10 ** 9
    kind: str = field(default="bend", init=False)

    def apply(self, x: np.ndarray, t) -> np.ndarray:
        k = self.curvature_rate * _amount(t, self.start, self.end)
        if k == 0:
            return x
        out = x.copy()
        out[..., 0] = np.sin(k * x[..., 0]) / k
        out[..., 2] = x[..., 2] + (1.0 - np.cos(k * x[..., 0])) / k
        return out


@dataclass
class Bump:
    """Gaussian indentation (away from the camera) with a keyframed depth profile."""

    center: tuple[float, float] = (0.0, 0.0)  # material mm
    radius: float = 5.0  # Gaussian sigma, mm
    profile: list = field(default_factory=lambda: [(0, 0.0), (10, 3.0)])  # (frame, depth mm)
    kind: str = field(default="bump", init=False)

    def depth(self, t) -> float:
        f, d = zip(*self.profile)
        return float(np.interp(t, f, d))

    def apply(self, x: np.ndarray, X: np.ndarray, t) -> np.ndarray:
        d = self.depth(t)
        if d == 0:
            return x
        r2 = np.sum((X - np.asarray(self.center)) ** 2, axis=-1)
        out = x.copy()
        out[..., 2] = x[..., 2] + d * np.exp(-0.5 * r2 / self.radius ** 2)
        return out


@dataclass
class RigidMotion:
    """Per-frame rigid scene motion about ``pivot`` (camera coordinates)."""

    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # mm per frame
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # rotation vector, rad per frame
    start: int = 0
    end: int = 10 ** 9
    pivot: tuple[float, float, float] | None = None
    kind: str = field(default="rigid_scene_motion", init=False)

    def apply(self, x: np.ndarray, t, z0: float) -> np.ndarray:
        n = _amount(t, self.start, self.end)
        if n == 0:
            return x
        pivot = np.array(self.pivot if self.pivot is not None else (0.0, 0.0, z0))
        R = Rotation.from_rotvec(n * np.asarray(self.rotation, dtype=float)).as_matrix()
        return (x - pivot) @ R.T + pivot + n * np.asarray(self.translation, dtype=float)


@dataclass
class Occluder:
    """An instrument seen as a disk in the image, hovering ``clearance`` mm above the tissue."""

    center: tuple[float, float] = (0.0, 0.0)  # canonical px (image centre = origin)
    radius: float = 10.0
    start: int = 0
    end: int = 10 ** 9
    clearance: float = 0.5
    velocity: tuple[float, float] = (0.0, 0.0)  # px per frame
    kind: str = field(default="occluder", init=False)

    def active(self, t: int) -> bool:
        return self.start <= t < self.end

    def mask(self, domain: GridDomain, t: int) -> np.ndarray:
        u, v = domain.coords()
        n = t - self.start
        cu = self.center[0] + n * self.velocity[0]
        cv = self.center[1] + n * self.velocity[1]
        return (u - cu) ** 2 + (v - cv) ** 2 <= self.radius ** 2


_EVENT_TYPES = {
    "uniaxial_stretch": UniaxialStretch,
    "bend": Bend,
    "bump": Bump,
    "rigid_scene_motion": RigidMotion,
    "occluder": Occluder,
}


def event_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    cls = _EVENT_TYPES.get(kind)
    if cls is None:
        raise ValueError(f"unknown motion event {kind!r}; valid: {sorted(_EVENT_TYPES)}")
    for key in ("band", "center", "translation", "rotation", "pivot", "velocity"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    if "profile" in d:
        d["profile"] = [tuple(p) for p in d["profile"]]
    return cls(**d)


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 64
    intrinsics: CameraIntrinsics | None = None
    sheet: SheetConfig = field(default_factory=SheetConfig)
    motion_script: list = field(default_factory=list)
    frames: int = 10
    sigma_depth: float = 0.0
    sigma_flow: float = 0.0
    seed: int = 0
    truth_pad: int = 32
    allow_large_strain: bool = False
    name: str = "custom"

    def __post_init__(self):
        if isinstance(self.sheet, dict):
            d = dict(self.sheet)
            if "extent" in d:
                d["extent"] = tuple(d["extent"])
            self.sheet = SheetConfig(**d)
        if self.intrinsics is None:
            f = self.sheet.z0  # 1 mm per pixel at rest depth
            self.intrinsics = CameraIntrinsics(f, f, self.width / 2.0, self.height / 2.0)
        elif isinstance(self.intrinsics, dict):
            self.intrinsics = CameraIntrinsics(**self.intrinsics)
        self.motion_script = [event_from_dict(e) if isinstance(e, dict) else e
                              for e in self.motion_script]

    @property
    def image_domain(self) -> GridDomain:
        return GridDomain.image(self.width, self.height)

    @property
    def truth_domain(self) -> GridDomain:
        d = self.image_domain
        p = self.truth_pad
        return GridDomain(d.width + 2 * p, d.height + 2 * p, (d.offset[0] - p, d.offset[1] - p))

    def events(self, kind: str) -> list:
        return [e for e in self.motion_script if e.kind == kind]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intrinsics"] = self.intrinsics.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)

    # -- kinematics ---------------------------------------------------------

    def position(self, X: np.ndarray, t) -> np.ndarray:
        """Camera-frame position of material points ``X`` at time ``t``."""
        Xs = X
        for e in self.events("uniaxial_stretch"):
            Xs = e.apply_material(Xs, t)
        x = self.sheet.embed(Xs)
        for e in self.events("bend"):
            x = e.apply(x, t)
        for e in self.events("bump"):
            x = e.apply(x, X, t)
        for e in self.events("rigid_scene_motion"):
            x = e.apply(x, t, self.sheet.z0)
        return x

    def tangents(self, X: np.ndarray, t) -> np.ndarray:
        """Material-coordinate tangent pairs ``(dx/dX1, dx/dX2)``, shape ``(..., 6)``."""
        h = _FD_STEP
        e1 = np.array([h, 0.0])
        e2 = np.array([0.0, h])
        tu = (self.position(X + e1, t) - self.position(X - e1, t)) / (2 * h)
        tv = (self.position(X + e2, t) - self.position(X - e2, t)) / (2 * h)
        return np.concatenate([tu, tv], axis=-1)

    def local_deformation(self, X: np.ndarray, t_from, t_to) -> np.ndarray:
        D, _ = extract_batch(self.tangents(X, t_from), self.tangents(X, t_to))
        return D

    def check_strain(self, spacing: float = 1.0) -> float:
        """Largest inter-frame principal strain magnitude over the sheet."""
        hw = 0.5 * np.asarray(self.sheet.extent) - 2 * _FD_STEP
        g1 = np.arange(-hw[0], hw[0] + 1e-9, spacing)
        g2 = np.arange(-hw[1], hw[1] + 1e-9, spacing)
        X = np.stack(np.meshgrid(g1, g2), axis=-1).reshape(-1, 2)
        worst = 0.0
        for t in range(self.frames - 1):
            hi, lo = principal_batch(strain_batch(self.local_deformation(X, t, t + 1)))
            worst = max(worst, float(np.abs(hi).max()), float(np.abs(lo).max()))
        return worst


@dataclass
class GroundTruth:
    """Noiseless truth on the padded truth domain.

    ``local``/``strain`` are accumulated from frame 0 and ``local_step`` spans
    this frame to the next; ``material`` holds the material coordinates seen
    at each grid point.
    """

    points: RasterMap
    material: RasterMap
    local: RasterMap
    local_step: RasterMap
    strain: RasterMap


@dataclass
class Frame:
    index: int
    bundle: FrameBundle
    truth: GroundTruth


def _render_material(cfg: SceneConfig, dom: GridDomain, t: int, guess: np.ndarray | None):
    """Material coordinates projecting onto each grid point (Newton per pixel)."""
    K = cfg.intrinsics
    u, v = dom.coords()
    # pixel coordinates in the image's own frame
    pu = (u - cfg.image_domain.offset[0]).astype(np.float64).ravel()
    pv = (v - cfg.image_domain.offset[1]).astype(np.float64).ravel()
    target = np.stack([pu, pv], axis=1)
    if guess is None:
        X = np.stack([(pu - K.cx) * cfg.sheet.z0 / K.fx, (pv - K.cy) * cfg.sheet.z0 / K.fy], axis=1)
    else:
        X = guess.copy()
    h = 1e-5
    for _ in range(30):
        q, _ = K.project(cfg.position(X, t))
        r = q - target
        if np.max(np.abs(r)) < 1e-10:
            break
        qa, _ = K.project(cfg.position(X + [h, 0.0], t))
        qb, _ = K.project(cfg.position(X + [0.0, h], t))
        J = np.stack([(qa - q) / h, (qb - q) / h], axis=-1)  # (N, 2, 2)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        det = np.where(np.abs(det) > 1e-12, det, 1e-12)
        dx = (J[:, 1, 1] * r[:, 0] - J[:, 0, 1] * r[:, 1]) / det
        dy = (-J[:, 1, 0] * r[:, 0] + J[:, 0, 0] * r[:, 1]) / det
        step = np.stack([dx, dy], axis=1)
        X = X - np.clip(step, -20.0, 20.0)
    q, front = K.project(cfg.position(X, t))
    ok = front & (np.max(np.abs(q - target), axis=1) < 1e-6) & cfg.sheet.contains(X)
    return X, ok


def _texture(X: np.ndarray) -> np.ndarray:
    """Smooth procedural RGB in ``[0, 255]`` attached to material points."""
    a = np.sin(0.35 * X[:, 0]) * np.cos(0.27 * X[:, 1])
    b = np.sin(0.11 * X[:, 0] + 0.19 * X[:, 1])
    checker = ((np.floor(X[:, 0] / 6.0) + np.floor(X[:, 1] / 6.0)) % 2) * 2 - 1
    r = 150 + 60 * a + 20 * checker
    g = 90 + 50 * b - 20 * checker
    bl = 110 + 40 * a * b + 10 * checker
    return np.clip(np.stack([r, g, bl], axis=1), 0, 255)


def generate(config: SceneConfig) -> list[Frame]:
    """Render a synthetic sequence with exact ground truth.

    Noise is drawn after the ground truth is recorded.

    Raises:
        StrainLimitError: the script exceeds the inter-frame strain limit and
            ``allow_large_strain`` is not set.
    """
    cfg = config
    if not cfg.allow_large_strain and cfg.motion_script:
        worst = cfg.check_strain()
        if worst > STRAIN_LIMIT:
            raise StrainLimitError(
                f"inter-frame principal strain reaches {worst:.3f} > {STRAIN_LIMIT}; "
                "set allow_large_strain to override"
            )
    rng = np.random.default_rng(cfg.seed)
    K = cfg.intrinsics
    tdom = cfg.truth_domain
    idom = cfg.image_domain
    shape = tdom.shape
    occluders = cfg.events("occluder")
    frames = []
    guess = None
    for t in range(cfg.frames):
        X, ok = _render_material(cfg, tdom, t, guess)
        guess = np.where(ok[:, None], X, guess if guess is not None else X)
        x_t = cfg.position(X, t)
        x_t1 = cfg.position(X, t + 1)
        q1, front1 = K.project(x_t1)

        pts = x_t.T.reshape((3,) + shape)
        truth_pts = RasterMap(tdom, pts, ok.reshape(shape))
        material = RasterMap(tdom, X.T.reshape((2,) + shape), ok.reshape(shape))
        D_acc = cfg.local_deformation(X, 0, t)
        D_step = cfg.local_deformation(X, t, t + 1)
        local = RasterMap(tdom, D_acc.T.reshape((6,) + shape), ok.reshape(shape))
        local_step = RasterMap(tdom, D_step.T.reshape((6,) + shape), ok.reshape(shape))
        strain = RasterMap(tdom, strain_batch(D_acc).T.reshape((3,) + shape), ok.reshape(shape))
        truth = GroundTruth(truth_pts, material, local, local_step, strain)

        # measurements on the image grid
        u, v = tdom.coords()
        pu = (u - idom.offset[0]).ravel()
        pv = (v - idom.offset[1]).ravel()
        flow = np.stack([q1[:, 0] - pu, q1[:, 1] - pv], axis=1)
        flow_ok = ok & front1
        flow_map = crop_to(RasterMap(tdom, flow.T.reshape((2,) + shape), flow_ok.reshape(shape)), idom)
        depth = crop_to(RasterMap(tdom, x_t[:, 2].reshape((1,) + shape), ok.reshape(shape)), idom)
        tex = crop_to(RasterMap(tdom, _texture(X).T.reshape((3,) + shape), ok.reshape(shape)), idom)

        z = depth.values[0]
        dmask = depth.mask
        if cfg.sigma_depth > 0:
            z = z + rng.normal(0.0, cfg.sigma_depth, z.shape)
        fl = flow_map.values
        if cfg.sigma_flow > 0:
            fl = fl + rng.normal(0.0, cfg.sigma_flow, fl.shape)
        dmask = dmask & (z > 0)
        vv, uu = np.mgrid[0:idom.height, 0:idom.width].astype(np.float64)
        points = RasterMap(idom, np.stack([z * (uu - K.cx) / K.fx, z * (vv - K.cy) / K.fy, z]), dmask)
        flow_map = RasterMap(idom, fl, flow_map.mask)
        texture = RasterMap(idom, np.rint(tex.values).astype(np.uint8), tex.mask)

        inst = np.zeros(idom.shape, dtype=bool)
        z_bottom = np.zeros(idom.shape)
        zb_mask = np.zeros(idom.shape, dtype=bool)
        truth_img = crop_to(truth_pts, idom)
        for occ in occluders:
            if not occ.active(t):
                continue
            m = occ.mask(idom, t)
            inst |= m
            here = m & truth_img.mask
            z_bottom[here] = truth_img.values[2][here] - occ.clearance
            zb_mask |= here
        pose = InstrumentPose(RasterMap(idom, z_bottom[None], zb_mask)) if zb_mask.any() else None
        bundle = FrameBundle(points, flow_map, ParamSet(idom, inst), texture, pose)
        frames.append(Frame(t, bundle, truth))
    return frames


def scenario(name: str, frames: int | None = None, seed: int = 0, **overrides) -> SceneConfig:
    """Named preset scenes.

    ``traction``: central band stretched 1 %/frame with rigid surroundings.
    ``palpation``: a Gaussian indentation pressed and held under an
    occluding instrument that carries its bottom depth.
    ``camera_pan``: the scene pans 20 mm sideways, holds, and returns.
    ``occlusion``: an instrument sweeps across a slowly bending dish.
    ``rigid``: rigid scene translation and rotation.
    """
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; valid names: {', '.join(sorted(SCENARIOS))}")
    base = SCENARIOS[name](frames)
    fields = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    # preset intrinsics follow the grid unless given explicitly
    fields["intrinsics"] = None
    fields.update(overrides, seed=seed, name=name)
    return SceneConfig(**fields)


def _traction(frames):
    n = 31 if frames is None else frames
    return SceneConfig(
        motion_script=[UniaxialStretch(rate=0.01, axis="u", band=(-12.0, 12.0))],
        frames=n, sigma_depth=0.1, sigma_flow=0.2,
    )


def _palpation(frames):
    n = 20 if frames is None else frames
    return SceneConfig(
        motion_script=[
            Bump(center=(0.0, 0.0), radius=5.0, profile=[(0, 0.0), (4, 0.0), (14, 3.0)]),
            Occluder(center=(0.0, 0.0), radius=10.0, start=2, clearance=0.5),
        ],
        frames=n, sigma_depth=0.1,
    )


def _camera_pan(frames):
    n = 40 if frames is None else frames
    return SceneConfig(
        motion_script=[
            RigidMotion(translation=(2.0, 0.0, 0.0), start=5, end=15),
            RigidMotion(translation=(-2.0, 0.0, 0.0), start=25, end=35),
        ],
        frames=n,
    )


def _occlusion(frames):
    n = 20 if frames is None else frames
    return SceneConfig(
        sheet=SheetConfig(kind="dish", curvature=0.002),
        motion_script=[
            Bend(curvature_rate=0.0005),
            Occluder(center=(-20.0, 0.0), radius=8.0, start=3, end=10 ** 9, velocity=(2.0, 0.0)),
        ],
        frames=n, sigma_depth=0.05,
    )


def _rigid(frames):
    n = 40 if frames is None else frames
    return SceneConfig(
        sheet=SheetConfig(kind="dish", curvature=0.004),
        motion_script=[RigidMotion(translation=(0.15, 0.1, 0.1), rotation=(0.001, 0.002, 0.0015))],
        frames=n,
    )


SCENARIOS = {
    "traction": _traction,
    "palpation": _palpation,
    "camera_pan": _camera_pan,
    "occlusion": _occlusion,
    "rigid": _rigid,
}
