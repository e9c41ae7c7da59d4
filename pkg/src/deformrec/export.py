"""File exports: canonical meshes and metric summaries."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .rastermap import RasterMap, reframe
from .recover.linalg import GridGraph
from .recover.reparam import grid_triangles

__all__ = ["write_ply", "read_ply_counts", "pool_stats", "write_json"]


def write_ply(path, points: RasterMap, texture: RasterMap | None = None) -> tuple[int, int]:
    """ASCII PLY of a point map triangulated over its defined grid quads.

    Vertices carry ``x y z`` in mm and ``r g b`` (grey when no texture).

    Returns:
        ``(n_vertices, n_faces)``.
    """
    graph = GridGraph.from_mask(points.mask)
    xyz = graph.node_values(points.values.astype(np.float64))
    if texture is not None:
        tex = reframe(texture, points.domain)
        rgb = graph.node_values(tex.values.astype(np.float64))
        if rgb.shape[1] == 1:
            rgb = np.repeat(rgb, 3, axis=1)
        rgb = np.clip(np.rint(rgb), 0, 255).astype(np.int64)
    else:
        rgb = np.full((graph.n, 3), 128, dtype=np.int64)
    faces = grid_triangles(points.mask, graph.index)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {graph.n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}" for p, c in zip(xyz, rgb)]
    lines += [f"3 {f[0]} {f[1]} {f[2]}" for f in faces]
    Path(path).write_text("\n".join(lines) + "\n")
    return graph.n, len(faces)


def read_ply_counts(path) -> tuple[int, int]:
    """Vertex and face counts from a PLY header."""
    nv = nf = 0
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts[:2] == ["element", "vertex"]:
                nv = int(parts[2])
            elif parts[:2] == ["element", "face"]:
                nf = int(parts[2])
            elif parts and parts[0] == "end_header":
                break
    return nv, nf


def pool_stats(entries: list[dict]) -> dict | None:
    """Combine per-frame ``{n, rmse, msd, std}`` into one pooled summary.

    Equivalent to evaluating all frames' points together.
    """
    entries = [e for e in entries if e and e.get("n", 0) > 0]
    if not entries:
        return None
    n = np.array([e["n"] for e in entries], dtype=np.float64)
    rmse = np.array([e["rmse"] for e in entries])
    msd = np.array([e["msd"] for e in entries])
    std = np.array([e["std"] for e in entries])
    total = n.sum()
    mean = float(np.sum(n * msd) / total)
    second = float(np.sum(n * (std ** 2 + msd ** 2)) / total)
    return {
        "n": int(total),
        "rmse": float(np.sqrt(np.sum(n * rmse ** 2) / total)),
        "msd": mean,
        "std": float(np.sqrt(max(second - mean * mean, 0.0))),
    }


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
