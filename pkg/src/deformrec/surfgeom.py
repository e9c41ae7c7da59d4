"""Differential geometry of grid-parameterized surfaces.

A tangent pair is the 6-vector ``(t_u, t_v)`` of partial derivatives of a
point map, as stored in a derivative map.  The local deformation between two
tangent pairs is a rotation vector ``r`` plus in-plane stretch
``xi = (xi_uu, xi_vv, xi_uv)``, obtained from the polar decomposition of the
frame-to-frame deformation gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .rastermap import RasterMap

__all__ = [
    "LocalDeformation",
    "SurfaceStrain",
    "DegenerateTangentError",
    "InvalidDeformationError",
    "DEGENERACY_TOL",
    "derivative_map",
    "extract_local_deformation",
    "apply_local_deformation",
    "stretch_to_strain",
    "principal_strain",
    "extract_batch",
    "apply_batch",
    "strain_batch",
    "principal_batch",
    "IDENTITY6",
]

DEGENERACY_TOL = 1e-8
BRANCH_TOL = 1e-9
IDENTITY6 = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 0.0])


class DegenerateTangentError(ValueError):
    """Tangent vectors do not span a plane."""


class InvalidDeformationError(ValueError):
    """The deformation gradient flips orientation."""


@dataclass(frozen=True)
class LocalDeformation:
    r: tuple[float, float, float] = (0.0, 0.0, 0.0)
    xi: tuple[float, float, float] = (1.0, 1.0, 0.0)

    def __post_init__(self):
        r = tuple(float(c) for c in self.r)
        xi = tuple(float(c) for c in self.xi)
        if len(r) != 3 or len(xi) != 3:
            raise ValueError("r and xi need three components each")
        if xi[0] <= 0 or xi[1] <= 0:
            raise ValueError(f"stretch ratios must be positive, got {xi[:2]}")
        if np.linalg.norm(r) >= np.pi:
            raise ValueError("rotation vector outside the principal branch")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "xi", xi)

    @classmethod
    def identity(cls) -> "LocalDeformation":
        return cls()

    def as_vector(self) -> np.ndarray:
        return np.array(self.r + self.xi)

    @classmethod
    def from_vector(cls, vec) -> "LocalDeformation":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(tuple(vec[:3]), tuple(vec[3:6]))


@dataclass(frozen=True)
class SurfaceStrain:
    eps_uu: float
    eps_vv: float
    eps_uv: float

    def tensor(self) -> np.ndarray:
        return np.array([[self.eps_uu, self.eps_uv], [self.eps_uv, self.eps_vv]])


# --- derivative maps --------------------------------------------------------

def _axis_derivative(values: np.ndarray, mask: np.ndarray, axis: int):
    """Finite differences along one grid axis honoring the defined set.

    Central where both neighbors are defined, one-sided where only one is,
    undefined where neither is.
    """
    vals = np.moveaxis(values, axis + 1, -1)
    m = np.moveaxis(mask, axis, -1)
    n = m.shape[-1]
    fwd_ok = np.zeros_like(m)
    bwd_ok = np.zeros_like(m)
    fwd = np.zeros_like(vals)
    bwd = np.zeros_like(vals)
    if n > 1:
        fwd_ok[..., :-1] = m[..., :-1] & m[..., 1:]
        bwd_ok[..., 1:] = m[..., 1:] & m[..., :-1]
        fwd[..., :-1] = vals[..., 1:] - vals[..., :-1]
        bwd[..., 1:] = vals[..., 1:] - vals[..., :-1]
    both = fwd_ok & bwd_ok
    out = np.where(both, 0.5 * (fwd + bwd), np.where(fwd_ok, fwd, bwd))
    ok = fwd_ok | bwd_ok
    return np.moveaxis(out, -1, axis + 1), np.moveaxis(ok, -1, axis)


def derivative_map(P: RasterMap) -> RasterMap:
    """Tangent derivatives ``(dP/du, dP/dv)`` of a 3-channel point map (mm/px)."""
    values = P.values.astype(np.float64)
    mask = P.mask
    du, ok_u = _axis_derivative(values, mask, axis=1)
    dv, ok_v = _axis_derivative(values, mask, axis=0)
    ok = ok_u & ok_v
    return RasterMap(P.domain, np.concatenate([du, dv], axis=0), ok)


# --- local deformation ------------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _frames(dP: np.ndarray):
    """Columns ``[t_u, t_v, n]`` and orthonormal tangent bases ``[e1, e2, n]``."""
    tu = dP[..., 0:3]
    tv = dP[..., 3:6]
    cross = np.cross(tu, tv)
    area = np.linalg.norm(cross, axis=-1)
    n = _unit(cross)
    A = np.stack([tu, tv, n], axis=-1)
    e1 = _unit(tu)
    e2 = np.cross(n, e1)
    E = np.stack([e1, e2, n], axis=-1)
    return A, E, area


def extract_batch(dP: np.ndarray, dP_after: np.ndarray):
    """Vectorized local-deformation extraction.

    Args:
        dP: ``(..., 6)`` tangent pairs before deformation.
        dP_after: ``(..., 6)`` tangent pairs after deformation.

    Returns:
        ``(D, ok)`` where ``D`` has shape ``(..., 6)`` holding
        ``(r, xi_uu, xi_vv, xi_uv)`` and ``ok`` flags entries that are
        non-degenerate and orientation preserving.  Entries with ``ok`` false
        hold the identity.
    """
    dP = np.asarray(dP, dtype=np.float64)
    dP_after = np.asarray(dP_after, dtype=np.float64)
    shape = np.broadcast_shapes(dP.shape, dP_after.shape)[:-1]
    dP = np.broadcast_to(dP, shape + (6,)).reshape(-1, 6).copy()
    dP_after = np.broadcast_to(dP_after, shape + (6,)).reshape(-1, 6).copy()
    out = np.tile(IDENTITY6, (dP.shape[0], 1))
    A, E, area = _frames(dP)
    A2, _, area2 = _frames(dP_after)
    ok = (area > DEGENERACY_TOL) & (area2 > DEGENERACY_TOL)
    if not np.any(ok):
        return out.reshape(shape + (6,)), ok.reshape(shape)
    idx = np.flatnonzero(ok)
    F = A2[idx] @ np.linalg.inv(A[idx])
    detF = np.linalg.det(F)
    good = detF > 0
    ok[idx[~good]] = False
    idx = idx[good]
    F = F[good]
    W, S, Vt = np.linalg.svd(F)
    R = W @ Vt
    U = np.swapaxes(Vt, -1, -2) @ (S[..., None] * Vt)
    Eg = E[idx]
    Uh = np.swapaxes(Eg, -1, -2) @ U @ Eg
    rv = Rotation.from_matrix(R).as_rotvec()
    # Normals follow the tangents, so det F > 0 always; an in-plane mirror
    # shows up as a half turn instead and is rejected the same way.
    flipped = np.linalg.norm(rv, axis=1) >= np.pi - BRANCH_TOL
    ok[idx[flipped]] = False
    keep = ~flipped
    idx, rv, Uh = idx[keep], rv[keep], Uh[keep]
    out[idx, 0:3] = rv
    out[idx, 3] = Uh[:, 0, 0]
    out[idx, 4] = Uh[:, 1, 1]
    out[idx, 5] = 0.5 * (Uh[:, 0, 1] + Uh[:, 1, 0])
    return out.reshape(shape + (6,)), ok.reshape(shape)


def apply_batch(dP: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Vectorized inverse of :func:`extract_batch`.

    The stretch acts in the orthonormal tangent basis of ``dP`` (unit
    out-of-plane stretch), then the rotation acts in 3D.
    """
    dP = np.asarray(dP, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    shape = np.broadcast_shapes(dP.shape, D.shape)[:-1]
    dP = np.broadcast_to(dP, shape + (6,)).reshape(-1, 6).copy()
    D = np.broadcast_to(D, shape + (6,)).reshape(-1, 6).copy()
    _, E, _ = _frames(dP)
    Uh = np.zeros((dP.shape[0], 3, 3))
    Uh[:, 0, 0] = D[:, 3]
    Uh[:, 1, 1] = D[:, 4]
    Uh[:, 0, 1] = D[:, 5]
    Uh[:, 1, 0] = D[:, 5]
    Uh[:, 2, 2] = 1.0
    U = E @ Uh @ np.swapaxes(E, -1, -2)
    R = Rotation.from_rotvec(D[:, 0:3]).as_matrix()
    M = R @ U
    tu = np.einsum("nij,nj->ni", M, dP[:, 0:3])
    tv = np.einsum("nij,nj->ni", M, dP[:, 3:6])
    return np.concatenate([tu, tv], axis=-1).reshape(shape + (6,))


def extract_local_deformation(dP, dP_after) -> LocalDeformation:
    """Local rotation and in-plane stretch taking one tangent pair to another.

    Raises:
        DegenerateTangentError: either pair fails to span a plane.
        InvalidDeformationError: the deformation reverses the surface
            orientation (a reflection, or a half turn that leaves the
            principal rotation branch).
    """
    dP = np.asarray(dP, dtype=np.float64).reshape(6)
    dP_after = np.asarray(dP_after, dtype=np.float64).reshape(6)
    for pair in (dP, dP_after):
        if np.linalg.norm(np.cross(pair[:3], pair[3:])) <= DEGENERACY_TOL:
            raise DegenerateTangentError(f"tangent pair {pair} spans no plane")
    D, ok = extract_batch(dP, dP_after)
    if not ok:
        raise InvalidDeformationError("deformation gradient has negative determinant")
    return LocalDeformation.from_vector(D)


def apply_local_deformation(dP, d: LocalDeformation) -> np.ndarray:
    return apply_batch(np.asarray(dP, dtype=np.float64).reshape(6), d.as_vector())


# --- strain -----------------------------------------------------------------

def strain_batch(D: np.ndarray) -> np.ndarray:
    """Small strain ``(eps_uu, eps_vv, eps_uv)`` from ``(..., 6)`` descriptors."""
    D = np.asarray(D, dtype=np.float64)
    return np.stack([D[..., 3] - 1.0, D[..., 4] - 1.0, D[..., 5]], axis=-1)


def principal_batch(eps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    eps = np.asarray(eps, dtype=np.float64)
    mean = 0.5 * (eps[..., 0] + eps[..., 1])
    rad = np.hypot(0.5 * (eps[..., 0] - eps[..., 1]), eps[..., 2])
    return mean + rad, mean - rad


def stretch_to_strain(d: LocalDeformation) -> SurfaceStrain:
    return SurfaceStrain(d.xi[0] - 1.0, d.xi[1] - 1.0, d.xi[2])


def principal_strain(eps: SurfaceStrain) -> tuple[float, float]:
    """Eigenvalues ``(lambda_max, lambda_min)`` of the 2x2 strain tensor."""
    hi, lo = principal_batch(np.array([eps.eps_uu, eps.eps_vv, eps.eps_uv]))
    return float(hi), float(lo)
