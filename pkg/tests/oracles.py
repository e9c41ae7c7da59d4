"""Independent reference implementations used as test oracles.

Everything here is written from the objective definitions with plain loops and
dense linear algebra, sharing no code with the package's solvers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deformrec.measure import InstrumentPose
from deformrec.rastermap import GridDomain, ParamSet, RasterMap
from deformrec.recover import CanonicalState, InlierPartition

IDENT = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 0.0])


def grid_edges(mask: np.ndarray) -> list[tuple[tuple[int, int], tuple[int, int], str]]:
    """4-neighbour edges ``((r, c), (r', c'), axis)`` between defined cells."""
    h, w = mask.shape
    out = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            if c + 1 < w and mask[r, c + 1]:
                out.append(((r, c), (r, c + 1), "u"))
            if r + 1 < h and mask[r + 1, c]:
                out.append(((r, c), (r + 1, c), "v"))
    return out


def components(nodes: list, edges: list) -> dict:
    """Breadth-first connected-component label per node."""
    adj = {n: [] for n in nodes}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    label = {}
    k = 0
    for n in nodes:
        if n in label:
            continue
        stack = [n]
        label[n] = k
        while stack:
            x = stack.pop()
            for y in adj[x]:
                if y not in label:
                    label[y] = k
                    stack.append(y)
        k += 1
    return label


def _lstsq(rows: list, rhs: list, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros(0)
    J = np.zeros((len(rows), n))
    for i, row in enumerate(rows):
        for j, val in row:
            J[i, j] += val
    sol, *_ = np.linalg.lstsq(J, np.asarray(rhs, dtype=np.float64), rcond=None)
    return sol


def dense_local_deformation(D: np.ndarray, U: np.ndarray, inl: np.ndarray, oof: np.ndarray,
                            alpha: float) -> np.ndarray:
    """Minimizer of the local-deformation quadratic by dense least squares.

    ``D`` is ``(6, H, W)``; solver coordinates are offsets from the identity.
    Stretch coordinates are pinned to identity at ``oof`` points.  Components
    without data take the identity (the minimum-norm choice).
    """
    nodes = list(zip(*np.nonzero(U)))
    edges = [(a, b) for a, b, _ in grid_edges(U)]
    out = np.zeros((6,) + U.shape)
    out[3:5] = 1.0
    sqa = np.sqrt(alpha)
    for coord in range(6):
        pinned = oof if coord >= 3 else np.zeros_like(U)
        free = [n for n in nodes if not pinned[n]]
        idx = {n: i for i, n in enumerate(free)}
        rows, rhs = [], []
        for n in free:
            if inl[n]:
                rows.append([(idx[n], 1.0)])
                rhs.append(D[(coord,) + n] - IDENT[coord])
        for a, b in edges:
            row = []
            if a in idx:
                row.append((idx[a], sqa))
            if b in idx:
                row.append((idx[b], -sqa))
            if row:
                rows.append(row)
                rhs.append(0.0)
        sol = _lstsq(rows, rhs, len(free))
        for n, i in idx.items():
            out[(coord,) + n] = sol[i] + IDENT[coord]
    out[:, ~U] = 0.0
    return out


def edge_targets(P: np.ndarray, G: np.ndarray, G_ok: np.ndarray, U: np.ndarray):
    """Edges of ``U`` with their derivative-term residual offsets.

    For an edge ``a -> b`` along axis ``u`` (``v``) the target forward
    difference is the mean of the target tangents at both ends, or the one
    that exists; edges with neither are skipped.  Returns ``[(a, b, c)]`` with
    ``c = target - (P_b - P_a)`` so the residual is ``delta_b - delta_a - c``.
    """
    out = []
    for a, b, axis in grid_edges(U):
        ch = slice(0, 3) if axis == "u" else slice(3, 6)
        ga, gb = G[(ch,) + a], G[(ch,) + b]
        if G_ok[a] and G_ok[b]:
            tgt = 0.5 * (ga + gb)
        elif G_ok[a]:
            tgt = ga
        elif G_ok[b]:
            tgt = gb
        else:
            continue
        out.append((a, b, tgt - (P[(slice(None),) + b] - P[(slice(None),) + a])))
    return out


def displacement_system(P, F, G, G_ok, U, inl):
    """Dense normal equations ``(A, B, nodes, fixed)`` of the displacement quadratic.

    ``B`` holds one right-hand side per coordinate.  Nodes of components
    without any inlier are reported in ``fixed`` (they stay put).
    """
    nodes = list(zip(*np.nonzero(U)))
    idx = {n: i for i, n in enumerate(nodes)}
    tgt = edge_targets(P, G, G_ok, U)
    lab = components(nodes, [(a, b) for a, b, _ in tgt])
    anchored = {lab[n] for n in nodes if inl[n]}
    fixed = np.array([lab[n] not in anchored for n in nodes], dtype=bool)
    n = len(nodes)
    J = np.zeros((n + len(tgt), n))
    Y = np.zeros((n + len(tgt), 3))
    for i, node in enumerate(nodes):
        if inl[node]:
            J[i, i] = 1.0
            Y[i] = F[(slice(None),) + node]
    for k, (a, b, c) in enumerate(tgt):
        J[n + k, idx[b]] = 1.0
        J[n + k, idx[a]] = -1.0
        Y[n + k] = c
    return J.T @ J, J.T @ Y, nodes, fixed, (J, Y)


def dense_displacement(P, F, G, G_ok, U, inl) -> np.ndarray:
    """Equality-only displacement minimizer as a ``(3, H, W)`` grid."""
    _, _, nodes, fixed, (J, Y) = displacement_system(P, F, G, G_ok, U, inl)
    free = ~fixed
    sol = np.zeros((len(nodes), 3))
    if free.any():
        sol[free], *_ = np.linalg.lstsq(J[:, free], Y, rcond=None)
    out = np.zeros((3,) + U.shape)
    for i, node in enumerate(nodes):
        out[(slice(None),) + node] = sol[i]
    return out


def kkt_residual(A: np.ndarray, b: np.ndarray, x: np.ndarray, lower: np.ndarray) -> float:
    """Natural residual ``|x - max(lower, x - (Ax - b))|_inf`` of a bound-constrained QP."""
    g = A @ x - b
    proj = np.maximum(lower, x - g)
    return float(np.max(np.abs(x - proj))) if x.size else 0.0


# --- random problem instances -------------------------------------------------

@dataclass
class Instance:
    U: np.ndarray
    inl: np.ndarray
    oof: np.ndarray
    D: np.ndarray
    P: np.ndarray
    F: np.ndarray
    G: np.ndarray
    G_ok: np.ndarray
    z_tool: np.ndarray
    tool_ok: np.ndarray
    alpha: float

    @property
    def domain(self) -> GridDomain:
        h, w = self.U.shape
        return GridDomain(w, h, (-(w // 2), -(h // 2)))

    def partition(self) -> InlierPartition:
        dom = self.domain
        out = self.U & ~self.inl
        return InlierPartition(ParamSet(dom, self.inl), ParamSet(dom, out),
                               ParamSet(dom, out & ~self.oof), ParamSet(dom, self.oof))

    def state(self) -> CanonicalState:
        dom = self.domain
        pts = RasterMap(dom, self.P, self.U)
        tex = RasterMap(dom, np.zeros((3,) + self.U.shape), self.U)
        return CanonicalState.from_maps(pts, tex, 0, dom)

    def maps(self):
        dom = self.domain
        D_I = RasterMap(dom, self.D, self.U)
        F_I = RasterMap(dom, self.F, self.U)
        target = RasterMap(dom, self.G, self.G_ok)
        pose = InstrumentPose(RasterMap(dom, self.z_tool[None], self.tool_ok))
        return D_I, F_I, target, pose


def random_instance(rng: np.random.Generator, max_points: int = 100) -> Instance:
    while True:
        h = int(rng.integers(2, 11))
        w = int(rng.integers(2, 11))
        if h * w <= max_points:
            break
    U = rng.random((h, w)) < rng.uniform(0.6, 1.0)
    if not U.any():
        U[h // 2, w // 2] = True
    inl = U & (rng.random((h, w)) < rng.uniform(0.3, 0.95))
    oof = U & ~inl & (rng.random((h, w)) < 0.3)
    D = np.zeros((6, h, w))
    D[0:3] = rng.normal(0, 0.05, (3, h, w))
    D[3:5] = 1.0 + rng.normal(0, 0.03, (2, h, w))
    D[5] = rng.normal(0, 0.02, (h, w))
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    P = np.stack([uu, vv, 100.0 + rng.normal(0, 0.5, (h, w))])
    F = rng.normal(0, 0.5, (3, h, w))
    G = np.concatenate([np.stack([np.ones((h, w)), np.zeros((h, w)), np.zeros((h, w))]),
                        np.stack([np.zeros((h, w)), np.ones((h, w)), np.zeros((h, w))])])
    G = G + rng.normal(0, 0.1, (6, h, w))
    G_ok = U & (rng.random((h, w)) < 0.9)
    # instrument bottom just above the current surface on occluded points
    z_tool = P[2] + rng.uniform(-0.8, 0.6, (h, w))
    tool_ok = U & ~inl & ~oof & (rng.random((h, w)) < 0.8)
    if tool_ok.any():
        # one deep instrument point keeps the instance feasible
        r, c = np.argwhere(tool_ok)[0]
        z_tool[r, c] = P[2].min() - 5.0
    alpha = float(10 ** rng.uniform(-1, 2.5))
    return Instance(U, inl, oof, D, P, F, G, G_ok, z_tool, tool_ok, alpha)


def segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-300), 0.0, 1.0)
    return np.linalg.norm(p - (a + t * ab))


def point_triangle_distance(p, a, b, c):
    """Plane projection when it lands inside, else the nearest edge."""
    n = np.cross(b - a, c - a)
    nn = np.dot(n, n)
    if nn > 1e-24:
        q = p - np.dot(p - a, n) / nn * n
        # barycentrics from sub-triangle areas
        wa = np.dot(np.cross(c - b, q - b), n) / nn
        wb = np.dot(np.cross(a - c, q - c), n) / nn
        wc = 1.0 - wa - wb
        if min(wa, wb, wc) >= 0:
            return np.linalg.norm(p - q)
    return min(segment_distance(p, a, b), segment_distance(p, b, c), segment_distance(p, c, a))
