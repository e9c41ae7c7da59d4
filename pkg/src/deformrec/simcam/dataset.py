"""On-disk dataset layout shared by the generator and the command-line driver.

::

    manifest.json
    frame_000000/points.rtf        f32, 3 channels, image grid
    frame_000000/flow.rtf          f32, 2 channels, forward flow to the next frame
    frame_000000/mask.rtf          u8, 1 channel, instrument pixels
    frame_000000/texture.rtf       u8, 3 channels
    frame_000000/truth_points.rtf  f32, 3 channels, padded truth grid
    frame_000000/pose.rtf          f32, 1 channel, instrument bottom depth (optional)

Datasets without ground truth simply omit ``truth_points.rtf``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..measure import CameraIntrinsics, FrameBundle, InstrumentPose
from ..rastermap import GridDomain, ParamSet, RasterMap, read_rtf, write_rtf
from .scene import Frame, SceneConfig

__all__ = [
    "DatasetError",
    "Dataset",
    "write_dataset",
    "load_dataset",
    "downsample_map",
    "frame_dir",
    "REQUIRED_FILES",
]

FORMAT = "deformrec-dataset"
VERSION = 1
REQUIRED_FILES = ("points.rtf", "flow.rtf", "mask.rtf", "texture.rtf")


class DatasetError(ValueError):
    """Missing files or a malformed manifest."""


def frame_dir(root, index: int) -> Path:
    return Path(root) / f"frame_{index:06d}"


def write_dataset(frames: list[Frame], directory, config: SceneConfig | None = None) -> Path:
    """Write frames and a manifest; output bytes depend only on the inputs."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    poses = []
    for fr in frames:
        d = frame_dir(root, fr.index)
        d.mkdir(exist_ok=True)
        b = fr.bundle
        write_rtf(b.points, d / "points.rtf", np.float32)
        write_rtf(b.flow, d / "flow.rtf", np.float32)
        inst = b.instrument_mask
        write_rtf(RasterMap(inst.domain, inst.defined[None].astype(np.uint8), None), d / "mask.rtf")
        write_rtf(b.texture, d / "texture.rtf", np.uint8)
        if fr.truth is not None:
            write_rtf(fr.truth.points, d / "truth_points.rtf", np.float32)
        if b.pose is not None:
            write_rtf(b.pose.z_bottom, d / "pose.rtf", np.float32)
            poses.append({"frame": fr.index, "file": f"{d.name}/pose.rtf"})
    first = frames[0].bundle.domain if frames else GridDomain(1, 1)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "width": first.width,
        "height": first.height,
        "frames": len(frames),
        "intrinsics": config.intrinsics.as_dict() if config is not None else None,
        "seed": config.seed if config is not None else None,
        "pose": poses,
        "config": config.to_dict() if config is not None else None,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def downsample_map(m: RasterMap, image_domain: GridDomain, stride: int) -> RasterMap:
    """Keep grid points whose image pixel coordinate is a multiple of ``stride``.

    The result lives on the canonical frame of the subsampled image, so a map
    on a padded truth grid stays aligned with the subsampled image grid.
    """
    if stride == 1:
        return m
    ox, oy = image_domain.offset
    u, v = m.domain.coords()
    pu = u[0] - ox
    pv = v[:, 0] - oy
    cols = np.flatnonzero(pu % stride == 0)
    rows = np.flatnonzero(pv % stride == 0)
    new_img = subsampled_image_domain(image_domain, stride)
    off = (int(pu[cols[0]] // stride + new_img.offset[0]), int(pv[rows[0]] // stride + new_img.offset[1]))
    dom = GridDomain(len(cols), len(rows), off)
    vals = m.values[:, rows][:, :, cols]
    return RasterMap(dom, vals, m.mask[rows][:, cols])


def subsampled_image_domain(image_domain: GridDomain, stride: int) -> GridDomain:
    w = -(-image_domain.width // stride)
    h = -(-image_domain.height // stride)
    return GridDomain.image(w, h)


@dataclass
class Dataset:
    """A dataset directory opened for sequential reading."""

    root: Path
    manifest: dict
    intrinsics: CameraIntrinsics
    stride: int = 1

    @property
    def n_frames(self) -> int:
        return int(self.manifest["frames"])

    @property
    def image_domain(self) -> GridDomain:
        full = GridDomain.image(int(self.manifest["width"]), int(self.manifest["height"]))
        return subsampled_image_domain(full, self.stride)

    @property
    def full_image_domain(self) -> GridDomain:
        return GridDomain.image(int(self.manifest["width"]), int(self.manifest["height"]))

    def _read(self, index: int, name: str, required: bool = True) -> RasterMap | None:
        path = frame_dir(self.root, index) / name
        if not path.exists():
            if required:
                raise DatasetError(f"missing file: {path}")
            return None
        return downsample_map(read_rtf(path), self.full_image_domain, self.stride)

    def has_truth(self, index: int) -> bool:
        return (frame_dir(self.root, index) / "truth_points.rtf").exists()

    def truth_points(self, index: int) -> RasterMap | None:
        return self._read(index, "truth_points.rtf", required=False)

    def instrument_mask(self, index: int) -> ParamSet:
        m = self._read(index, "mask.rtf")
        return ParamSet(m.domain, m.mask & (m.values[0] > 0))

    def bundle(self, index: int) -> FrameBundle:
        pts = self._read(index, "points.rtf").astype(np.float64)
        flow = self._read(index, "flow.rtf").astype(np.float64)
        if self.stride > 1:
            flow = RasterMap(flow.domain, flow.values / self.stride, flow.mask)
        tex = self._read(index, "texture.rtf")
        pose_map = self._read(index, "pose.rtf", required=False)
        pose = InstrumentPose(pose_map.astype(np.float64)) if pose_map is not None else None
        return FrameBundle(pts, flow, self.instrument_mask(index), tex, pose)

    def check(self, frames: range | None = None) -> None:
        """Raise ``DatasetError`` naming the first missing required file."""
        for i in frames if frames is not None else range(self.n_frames):
            for name in REQUIRED_FILES:
                path = frame_dir(self.root, i) / name
                if not path.exists():
                    raise DatasetError(f"missing file: {path}")


def load_dataset(directory, stride: int = 1) -> Dataset:
    """Open a dataset directory (reading the manifest only).

    Raises:
        DatasetError: missing or malformed manifest, or an invalid stride.
    """
    root = Path(directory)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {path}: {exc}") from exc
    for key in ("frames", "width", "height", "intrinsics"):
        if manifest.get(key) is None:
            raise DatasetError(f"malformed manifest {path}: missing {key!r}")
    if stride < 1:
        raise DatasetError(f"downsample stride must be >= 1, got {stride}")
    try:
        K = CameraIntrinsics(**manifest["intrinsics"])
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"malformed manifest {path}: intrinsics: {exc}") from exc
    return Dataset(root, manifest, K.scaled(stride) if stride > 1 else K, stride)
