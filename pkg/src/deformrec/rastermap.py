"""Grid-indexed map containers with explicit defined-domains.

Every map lives on a :class:`GridDomain`, a rectangle of integer grid points
anchored in the borderless canonical plane by a signed offset.  Grid index
``[row, col]`` corresponds to canonical coordinate
``(u, v) = (offset_u + col, offset_v + row)``.

Values are stored planar, ``(channels, height, width)``, and whether a point
carries data is an explicit boolean grid rather than a sentinel value.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GridDomain",
    "ParamSet",
    "RasterMap",
    "RtfError",
    "RtfMagicError",
    "RtfDtypeError",
    "RtfTruncatedError",
    "DomainError",
    "sample_bilinear",
    "sample_bilinear_many",
    "expand_to",
    "crop_to",
    "write_rtf",
    "read_rtf",
    "CANONICAL_MARGIN",
]

# Canonical domains grow by this many grid points per side when fused or
# reparameterized data falls outside them.
CANONICAL_MARGIN = 16


class DomainError(ValueError):
    """Raised when two grid domains are incompatible for an operation."""


@dataclass(frozen=True)
class GridDomain:
    width: int
    height: int
    offset: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "offset", (int(self.offset[0]), int(self.offset[1])))

    @classmethod
    def image(cls, width: int, height: int) -> "GridDomain":
        """Image-space grid whose center sits on the canonical origin."""
        return cls(width, height, (-(int(width) // 2), -(int(height) // 2)))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def u_range(self) -> tuple[int, int]:
        """Half-open range of canonical u covered by this grid."""
        return (self.offset[0], self.offset[0] + self.width)

    @property
    def v_range(self) -> tuple[int, int]:
        return (self.offset[1], self.offset[1] + self.height)

    def contains(self, other: "GridDomain") -> bool:
        u0, u1 = self.u_range
        v0, v1 = self.v_range
        ou0, ou1 = other.u_range
        ov0, ov1 = other.v_range
        return u0 <= ou0 and ou1 <= u1 and v0 <= ov0 and ov1 <= v1

    def union(self, other: "GridDomain") -> "GridDomain":
        u0 = min(self.u_range[0], other.u_range[0])
        u1 = max(self.u_range[1], other.u_range[1])
        v0 = min(self.v_range[0], other.v_range[0])
        v1 = max(self.v_range[1], other.v_range[1])
        return GridDomain(u1 - u0, v1 - v0, (u0, v0))

    def grow_to_cover(self, u_min: int, u_max: int, v_min: int, v_max: int,
                      margin: int = CANONICAL_MARGIN) -> "GridDomain":
        """Smallest fixed-margin growth of this domain covering the inclusive box.

        Sides that already cover the box are left untouched.
        """
        u0, u1 = self.u_range
        v0, v1 = self.v_range
        if u_min < u0:
            u0 = u_min - margin
        if u_max >= u1:
            u1 = u_max + 1 + margin
        if v_min < v0:
            v0 = v_min - margin
        if v_max >= v1:
            v1 = v_max + 1 + margin
        return GridDomain(u1 - u0, v1 - v0, (u0, v0))

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Canonical ``(u, v)`` coordinate grids, each of shape ``(height, width)``."""
        u = np.arange(self.width) + self.offset[0]
        v = np.arange(self.height) + self.offset[1]
        return np.meshgrid(u, v)

    def index_of(self, u, v):
        """Grid ``(row, col)`` of canonical coordinates (no bounds check)."""
        return np.asarray(v) - self.offset[1], np.asarray(u) - self.offset[0]

    def inside(self, u, v) -> np.ndarray:
        row, col = self.index_of(u, v)
        return (row >= 0) & (row < self.height) & (col >= 0) & (col < self.width)

    def slices_in(self, outer: "GridDomain") -> tuple[slice, slice]:
        """Row/column slices locating this domain inside ``outer``."""
        if not outer.contains(self):
            raise DomainError(f"{outer} does not contain {self}")
        r0 = self.offset[1] - outer.offset[1]
        c0 = self.offset[0] - outer.offset[0]
        return slice(r0, r0 + self.height), slice(c0, c0 + self.width)


@dataclass(frozen=True, eq=False)
class ParamSet:
    """The defined subset of a grid domain."""

    domain: GridDomain
    defined: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.defined, dtype=bool)
        if mask.shape != self.domain.shape:
            raise ValueError(f"mask shape {mask.shape} != domain shape {self.domain.shape}")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "defined", mask)

    @classmethod
    def empty(cls, domain: GridDomain) -> "ParamSet":
        return cls(domain, np.zeros(domain.shape, dtype=bool))

    @classmethod
    def full(cls, domain: GridDomain) -> "ParamSet":
        return cls(domain, np.ones(domain.shape, dtype=bool))

    def __len__(self) -> int:
        return int(self.defined.sum())

    @property
    def count(self) -> int:
        return len(self)

    def contains(self, u, v):
        """Membership of canonical coordinates; ``False`` outside the domain."""
        u = np.asarray(u)
        v = np.asarray(v)
        inside = self.domain.inside(u, v)
        row, col = self.domain.index_of(u, v)
        row = np.where(inside, row, 0)
        col = np.where(inside, col, 0)
        out = inside & self.defined[row, col]
        return bool(out) if out.ndim == 0 else out

    def expand_to(self, domain: GridDomain) -> "ParamSet":
        rs, cs = self.domain.slices_in(domain)
        mask = np.zeros(domain.shape, dtype=bool)
        mask[rs, cs] = self.defined
        return ParamSet(domain, mask)

    def on(self, domain: GridDomain) -> "ParamSet":
        """Re-express on an arbitrary domain (points outside it are dropped)."""
        mask = np.zeros(domain.shape, dtype=bool)
        common = _overlap(self.domain, domain)
        if common is not None:
            rs, cs = common.slices_in(self.domain)
            rd, cd = common.slices_in(domain)
            mask[rd, cd] = self.defined[rs, cs]
        return ParamSet(domain, mask)

    def _aligned(self, other: "ParamSet") -> np.ndarray:
        if other.domain == self.domain:
            return other.defined
        return other.on(self.domain).defined

    def __or__(self, other: "ParamSet") -> "ParamSet":
        if other.domain != self.domain:
            dom = self.domain.union(other.domain)
            return self.on(dom) | other.on(dom)
        return ParamSet(self.domain, self.defined | other.defined)

    def __and__(self, other: "ParamSet") -> "ParamSet":
        return ParamSet(self.domain, self.defined & self._aligned(other))

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        return ParamSet(self.domain, self.defined & ~self._aligned(other))

    def __invert__(self) -> "ParamSet":
        return ParamSet(self.domain, ~self.defined)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.domain == other.domain and np.array_equal(self.defined, other.defined)

    __hash__ = None


def _overlap(a: GridDomain, b: GridDomain) -> GridDomain | None:
    u0 = max(a.u_range[0], b.u_range[0])
    u1 = min(a.u_range[1], b.u_range[1])
    v0 = max(a.v_range[0], b.v_range[0])
    v1 = min(a.v_range[1], b.v_range[1])
    if u1 <= u0 or v1 <= v0:
        return None
    return GridDomain(u1 - u0, v1 - v0, (u0, v0))


@dataclass(frozen=True, eq=False)
class RasterMap:
    """Per-grid-point values on a domain, with an explicit defined set.

    Values at undefined points are zeroed on construction and never read;
    values at defined points must be finite.
    """

    domain: GridDomain
    values: np.ndarray
    defined: ParamSet = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3 or values.shape[1:] != self.domain.shape:
            raise ValueError(
                f"values must have shape (C, {self.domain.height}, {self.domain.width}), "
                f"got {values.shape}"
            )
        if values.dtype.kind not in "fu":
            values = values.astype(np.float64)
        defined = self.defined
        if defined is None:
            defined = ParamSet(self.domain, np.all(np.isfinite(values), axis=0))
        elif isinstance(defined, np.ndarray):
            defined = ParamSet(self.domain, defined)
        elif defined.domain != self.domain:
            raise DomainError("defined set lives on a different domain")
        mask = defined.defined
        if values.dtype.kind == "f" and not np.all(np.isfinite(values[:, mask])):
            raise ValueError("non-finite values at defined points")
        values = np.where(mask[None], values, values.dtype.type(0))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "defined", defined)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return self.defined.defined

    def __len__(self) -> int:
        return len(self.defined)

    def with_defined(self, defined) -> "RasterMap":
        """Same values restricted to a (sub)set of points."""
        if isinstance(defined, ParamSet):
            defined = defined.on(self.domain).defined
        return RasterMap(self.domain, self.values, self.mask & defined)

    def at(self, u: int, v: int):
        """Value tuple at an integer canonical coordinate, or ``None``."""
        if not self.defined.contains(u, v):
            return None
        row, col = self.domain.index_of(u, v)
        return tuple(self.values[:, row, col].tolist())

    def points(self) -> np.ndarray:
        """Values at defined points as an ``(N, C)`` array in row-major order."""
        return self.values[:, self.mask].T

    def astype(self, dtype) -> "RasterMap":
        return RasterMap(self.domain, self.values.astype(dtype), self.defined)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RasterMap):
            return NotImplemented
        return (
            self.domain == other.domain
            and self.values.dtype == other.values.dtype
            and self.defined == other.defined
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


# Aliases documenting channel semantics at call sites.
Point3Map = RasterMap  # (x, y, z), mm
Deriv6Map = RasterMap  # (dx/du, dy/du, dz/du, dx/dv, dy/dv, dz/dv), mm/px
Disp3Map = RasterMap  # 3D displacement, mm
Flow2Map = RasterMap  # (du, dv), px
LocalDefMap = RasterMap  # (r0, r1, r2, xi_uu, xi_vv, xi_uv)
TextureMap = RasterMap  # RGB


def sample_bilinear_many(m: RasterMap, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear lookup at many continuous canonical coordinates.

    Args:
        m: Map to sample.
        uv: ``(N, 2)`` array of canonical ``(u, v)`` coordinates.

    Returns:
        ``(values, valid)`` with values of shape ``(N, C)`` (zero where invalid)
        and a boolean validity vector.  A lookup is valid when every corner
        carrying nonzero weight is inside the domain and defined.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    n = uv.shape[0]
    out = np.zeros((n, m.channels), dtype=np.float64)
    finite = np.all(np.isfinite(uv), axis=1)
    x = np.where(finite, uv[:, 0] - m.domain.offset[0], -1.0)
    y = np.where(finite, uv[:, 1] - m.domain.offset[1], -1.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    h, w = m.domain.shape
    mask = m.mask
    valid = finite.copy()
    corners = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            wgt = wy * wx
            need = wgt > 0.0
            r = y0 + dy
            c = x0 + dx
            inb = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            rc = np.clip(r, 0, h - 1)
            cc = np.clip(c, 0, w - 1)
            ok = inb & mask[rc, cc]
            valid &= ~need | ok
            corners.append((wgt, rc, cc))
    vals = m.values
    for wgt, rc, cc in corners:
        out += (wgt * valid)[:, None] * vals[:, rc, cc].T
    out[~valid] = 0.0
    return out, valid


def sample_bilinear(m: RasterMap, at):
    """Bilinear value tuple at one continuous canonical coordinate, or ``None``."""
    vals, valid = sample_bilinear_many(m, np.asarray(at, dtype=np.float64)[None])
    if not valid[0]:
        return None
    return tuple(vals[0].tolist())


def expand_to(m: RasterMap, new_domain: GridDomain) -> RasterMap:
    """Embed a map into a larger domain; newly covered points are undefined."""
    if not new_domain.contains(m.domain):
        raise DomainError(f"{new_domain} does not contain {m.domain}")
    rs, cs = m.domain.slices_in(new_domain)
    values = np.zeros((m.channels,) + new_domain.shape, dtype=m.values.dtype)
    values[:, rs, cs] = m.values
    mask = np.zeros(new_domain.shape, dtype=bool)
    mask[rs, cs] = m.mask
    return RasterMap(new_domain, values, mask)


def crop_to(m: RasterMap, domain: GridDomain) -> RasterMap:
    """View of a map on a sub-domain."""
    rs, cs = domain.slices_in(m.domain)
    return RasterMap(domain, m.values[:, rs, cs], m.mask[rs, cs])


def reframe(m: RasterMap, domain: GridDomain) -> RasterMap:
    """Re-express a map on any domain; points outside ``domain`` are dropped."""
    if domain == m.domain:
        return m
    common = _overlap(m.domain, domain)
    values = np.zeros((m.channels,) + domain.shape, dtype=m.values.dtype)
    mask = np.zeros(domain.shape, dtype=bool)
    if common is not None:
        rs, cs = common.slices_in(m.domain)
        rd, cd = common.slices_in(domain)
        values[:, rd, cd] = m.values[:, rs, cs]
        mask[rd, cd] = m.mask[rs, cs]
    return RasterMap(domain, values, mask)


# --- RTF files --------------------------------------------------------------

RTF_MAGIC = b"RTEN"
RTF_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIii3I")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class RtfError(ValueError):
    """Base class for malformed raster tensor files."""


class RtfMagicError(RtfError):
    pass


class RtfDtypeError(RtfError):
    pass


class RtfTruncatedError(RtfError):
    pass


def _dtype_code(values: np.ndarray, dtype) -> int:
    if dtype is None:
        dtype = "u8" if values.dtype == np.uint8 else "f32"
    elif not isinstance(dtype, (str, int)):
        try:
            dtype = {np.dtype(np.float32): "f32", np.dtype(np.uint8): "u8"}.get(np.dtype(dtype), dtype)
        except TypeError:
            pass
    if dtype in ("f32", 0):
        return 0
    if dtype in ("u8", 1):
        return 1
    raise RtfDtypeError(f"unsupported RTF dtype {dtype!r}")


def to_rtf_bytes(m: RasterMap, dtype=None) -> bytes:
    code = _dtype_code(m.values, dtype)
    target = _DTYPES[code]
    values = m.values
    if code == 1 and values.dtype != np.uint8:
        values = np.clip(np.rint(values), 0, 255)
    header = _HEADER.pack(
        RTF_MAGIC, RTF_VERSION, m.domain.width, m.domain.height, m.channels, code,
        m.domain.offset[0], m.domain.offset[1], 0, 0, 0,
    )
    payload = np.ascontiguousarray(values.astype(target, copy=False)).tobytes()
    mask = np.ascontiguousarray(m.mask.astype(np.uint8)).tobytes()
    return header + payload + mask


def from_rtf_bytes(data: bytes) -> RasterMap:
    if len(data) < _HEADER.size:
        raise RtfTruncatedError(f"header needs {_HEADER.size} bytes, got {len(data)}")
    magic, version, width, height, channels, code, ou, ov, *_ = _HEADER.unpack_from(data)
    if magic != RTF_MAGIC:
        raise RtfMagicError(f"bad magic {magic!r}")
    if version != RTF_VERSION:
        raise RtfError(f"unsupported RTF version {version}")
    if code not in _DTYPES:
        raise RtfDtypeError(f"unknown dtype code {code}")
    dt = _DTYPES[code]
    n_val = channels * height * width
    need = _HEADER.size + n_val * dt.itemsize + height * width
    if len(data) < need:
        raise RtfTruncatedError(f"expected {need} bytes, got {len(data)}")
    start = _HEADER.size
    values = np.frombuffer(data, dtype=dt, count=n_val, offset=start)
    values = values.reshape(channels, height, width).astype(dt.newbyteorder("="))
    mask = np.frombuffer(data, dtype=np.uint8, count=height * width,
                         offset=start + n_val * dt.itemsize)
    mask = mask.reshape(height, width).astype(bool)
    return RasterMap(GridDomain(width, height, (ou, ov)), values, mask)


def write_rtf(m: RasterMap, path, dtype=None) -> None:
    """Write a map as a raster tensor file.

    ``dtype`` is ``"f32"``/``np.float32`` or ``"u8"``/``np.uint8``; by default ``uint8`` maps are written
    as u8 and everything else as f32 (float64 maps lose precision).
    """
    Path(path).write_bytes(to_rtf_bytes(m, dtype))


def read_rtf(path) -> RasterMap:
    return from_rtf_bytes(Path(path).read_bytes())
