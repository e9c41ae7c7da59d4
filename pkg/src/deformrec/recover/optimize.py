"""The two canonical-deformation optimizations.

Both are sparse quadratics over the 4-neighbour graph of the canonical
parameter set; they decouple per coordinate, so each is one SPD matrix with
several right-hand sides solved by :func:`~deformrec.recover.linalg.pcg`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..measure import InstrumentPose
from ..rastermap import RasterMap, reframe
from ..surfgeom import IDENTITY6
from .linalg import GridGraph, SolverError, pcg
from .state import CanonicalState, InlierPartition

logger = logging.getLogger(__name__)

__all__ = [
    "ALPHA",
    "POSE_MARGIN",
    "MAX_ACTIVE_SET_ROUNDS",
    "optimize_local_deformation",
    "optimize_displacement",
    "displacement_problem",
    "DisplacementProblem",
    "solve_bounded",
    "BoundedSolution",
]

ALPHA = 200.0
POSE_MARGIN = 1e-3
MAX_ACTIVE_SET_ROUNDS = 10
RTOL = 1e-10


def _solve_with_fixed(A: sp.csr_matrix, rhs: np.ndarray, fixed: np.ndarray,
                      fixed_vals: np.ndarray, rtol: float) -> np.ndarray:
    """Solve ``A x = rhs`` with ``x[fixed] = fixed_vals`` eliminated."""
    n = A.shape[0]
    rhs = np.asarray(rhs, dtype=np.float64)
    vec = rhs.ndim == 1
    rhs2 = rhs[:, None] if vec else rhs
    fv = np.asarray(fixed_vals, dtype=np.float64).reshape(-1, rhs2.shape[1]) if fixed.any() \
        else np.zeros((0, rhs2.shape[1]))
    x = np.zeros_like(rhs2)
    free = ~fixed
    x[fixed] = fv
    if free.any():
        Aff = A[free][:, free]
        b = rhs2[free]
        if fixed.any():
            b = b - A[free][:, fixed] @ fv
        x[free], _ = pcg(Aff.tocsr(), b, rtol=rtol)
    return x[:, 0] if vec else x


def _unanchored(graph: GridGraph, edges: np.ndarray, anchored: np.ndarray) -> np.ndarray:
    """Nodes in connected components that contain no anchored node."""
    labels = graph.components(edges)
    has = np.zeros(labels.max() + 1 if labels.size else 0, dtype=bool)
    np.logical_or.at(has, labels, anchored)
    return ~has[labels]


def optimize_local_deformation(
    D_I: RasterMap,
    part: InlierPartition,
    alpha: float = ALPHA,
    rtol: float = RTOL,
    freeze_out_of_fov: bool = True,
) -> RasterMap:
    """Smooth, gap-filling estimate of the canonical local-deformation map.

    Minimizes ``sum_inliers |D_C - D_I|^2 + alpha * sum_edges |D_C(i) - D_C(j)|^2``
    over the 6 coordinates ``(r, xi_uu - 1, xi_vv - 1, xi_uv)`` on the whole
    canonical parameter set.  Out-of-view points keep identity stretch (they
    only rotate with their neighbours), and connected components without any
    inlier fall back to the identity deformation.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    dom = part.inliers.domain
    U_C = part.inliers.defined | part.outliers.defined
    graph = GridGraph.from_mask(U_C)
    n = graph.n
    out = np.zeros((6,) + dom.shape)
    out[3:5] = 1.0
    if n == 0:
        return RasterMap(dom, out, U_C)
    D = reframe(D_I, dom)
    inl = graph.node_mask(part.inliers.defined)
    target = graph.node_values(D.values) - IDENTITY6
    target[~inl] = 0.0
    A = (sp.diags(inl.astype(np.float64)) + graph.laplacian(weight=alpha)).tocsr()
    rhs = target * inl[:, None]

    sol = np.zeros((n, 6))
    fixed_r = _unanchored(graph, graph.edges, inl)
    sol[:, 0:3] = _solve_with_fixed(A, rhs[:, 0:3], fixed_r, np.zeros((fixed_r.sum(), 3)), rtol)

    oof = graph.node_mask(part.out_of_fov.defined) if freeze_out_of_fov else np.zeros(n, bool)
    # stretch is pinned to identity out of view; anchors are inliers or pinned nodes
    free_edges = graph.edges[~(oof[graph.edges[:, 0]] | oof[graph.edges[:, 1]])]
    touches_pin = np.zeros(n, dtype=bool)
    both = graph.edges
    touches_pin[both[oof[both[:, 1]], 0]] = True
    touches_pin[both[oof[both[:, 0]], 1]] = True
    fixed_s = oof | (_unanchored(graph, free_edges, inl | touches_pin | oof) & ~oof)
    sol[:, 3:6] = _solve_with_fixed(A, rhs[:, 3:6], fixed_s, np.zeros((fixed_s.sum(), 3)), rtol)

    out = graph.scatter(sol + IDENTITY6)
    out[:, ~U_C] = 0.0
    return RasterMap(dom, out, U_C)


@dataclass
class DisplacementProblem:
    """Per-coordinate quadratic for the deformed point map.

    Unknowns are displacements ``delta`` (``P' = P + delta``) at the nodes of
    ``graph``.  The objective is
    ``sum_nodes w_i |delta_i - f_i|^2 + sum_edges |delta_j - delta_i - c_e|^2``;
    its normal matrix ``A`` is shared by the three coordinates.
    """

    graph: GridGraph
    edges: np.ndarray
    weights: np.ndarray
    data: np.ndarray
    edge_targets: np.ndarray
    A: sp.csr_matrix
    rhs: np.ndarray
    anchored: np.ndarray

    def objective(self, delta: np.ndarray) -> float:
        d = np.asarray(delta).reshape(-1, 3)
        r_data = (d - self.data) * np.sqrt(self.weights)[:, None]
        r_edge = d[self.edges[:, 1]] - d[self.edges[:, 0]] - self.edge_targets
        return float(np.sum(r_data ** 2) + np.sum(r_edge ** 2))


def displacement_problem(state: CanonicalState, F_I: RasterMap, dP_target: RasterMap,
                         part: InlierPartition) -> DisplacementProblem:
    """Assemble the displacement quadratic.

    The derivative term compares each forward difference of ``P'`` along an
    edge with the mean of the target tangents at the edge's two ends (the
    target at the defined end if only one is defined; edges with none are
    dropped).
    """
    dom = state.domain
    graph = GridGraph.from_mask(state.params.defined)
    P = graph.node_values(state.points.values.astype(np.float64))
    tgt = reframe(dP_target, dom)
    G = graph.node_values(tgt.values)
    G_ok = graph.node_mask(tgt.mask)
    e = graph.edges
    horiz = graph.horizontal
    gi = np.where(horiz[:, None], G[e[:, 0], 0:3], G[e[:, 0], 3:6])
    gj = np.where(horiz[:, None], G[e[:, 1], 0:3], G[e[:, 1], 3:6])
    oi = G_ok[e[:, 0]][:, None]
    oj = G_ok[e[:, 1]][:, None]
    gbar = np.where(oi & oj, 0.5 * (gi + gj), np.where(oi, gi, gj))
    keep = (oi | oj)[:, 0]
    edges = e[keep]
    c = gbar[keep] - (P[edges[:, 1]] - P[edges[:, 0]])

    w = graph.node_mask(part.inliers.defined).astype(np.float64)
    F = reframe(F_I, dom)
    f = graph.node_values(F.values)
    f[w == 0] = 0.0
    B = graph.incidence(edges)
    A = (sp.diags(w) + B.T @ B).tocsr()
    rhs = w[:, None] * f + B.T @ c
    anchored = ~_unanchored(graph, edges, w > 0)
    return DisplacementProblem(graph, edges, w, f, c, A, np.asarray(rhs), anchored)


@dataclass
class BoundedSolution:
    x: np.ndarray
    active: np.ndarray
    rounds: int
    multipliers: np.ndarray


def solve_bounded(A: sp.csr_matrix, b: np.ndarray, lower: np.ndarray, fixed: np.ndarray | None = None,
                  max_rounds: int = MAX_ACTIVE_SET_ROUNDS, rtol: float = RTOL,
                  tol: float = 1e-9) -> BoundedSolution:
    """Minimize ``x'Ax/2 - b'x`` subject to ``x >= lower`` (``-inf`` = unbounded).

    Active-set iteration: solve with active bounds held as equalities, add
    every violated bound, release every active bound whose multiplier is
    negative, repeat until neither happens.  ``fixed`` nodes are held at zero.

    Raises:
        SolverError: the active set is still changing after ``max_rounds``.
    """
    n = A.shape[0]
    fixed = np.zeros(n, bool) if fixed is None else fixed
    bounded = np.isfinite(lower) & ~fixed
    active = np.zeros(n, dtype=bool)
    history = []
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    for rounds in range(1, max_rounds + 1):
        hold = fixed | active
        vals = np.where(active, lower, 0.0)[hold]
        x = _solve_with_fixed(A, b, hold, vals, rtol)
        grad = A @ x - b
        viol = bounded & ~active & (x < lower - tol * max(1.0, np.abs(lower[bounded]).max(initial=1.0)))
        release = active & (grad < -tol * scale)
        history.append((int(active.sum()), int(viol.sum()), int(release.sum())))
        if not viol.any() and not release.any():
            lam = np.where(active, grad, 0.0)
            return BoundedSolution(x, active, rounds, lam)
        active = (active | viol) & ~release
    raise SolverError(
        f"active set did not settle in {max_rounds} rounds; "
        f"(active, added, released) per round: {history}"
    )


def optimize_displacement(
    state: CanonicalState,
    F_I: RasterMap,
    dP_target: RasterMap,
    part: InlierPartition,
    pose: InstrumentPose | None = None,
    margin: float = POSE_MARGIN,
    max_rounds: int = MAX_ACTIVE_SET_ROUNDS,
    rtol: float = RTOL,
) -> tuple[RasterMap, RasterMap]:
    """Deformed canonical point map and its displacement from the current one.

    With an instrument pose, occluded points under the instrument are kept at
    least ``margin`` mm deeper than its bottom surface.

    Returns:
        ``(P_deformed, displacement)`` on the canonical domain.
    """
    dom = state.domain
    prob = displacement_problem(state, F_I, dP_target, part)
    g = prob.graph
    n = g.n
    U_C = state.params.defined
    if n == 0:
        empty = RasterMap(dom, np.zeros((3,) + dom.shape), U_C)
        return empty, empty
    fixed = ~prob.anchored
    if fixed.any():
        logger.info("%d canonical points in components without inliers stay put", fixed.sum())
    delta = _solve_with_fixed(prob.A, prob.rhs, fixed, np.zeros((fixed.sum(), 3)), rtol)

    if pose is not None:
        lower = _pose_bounds(state, part, pose, margin, g)
        lower = _relax_infeasible(lower, g.node_values(state.points.values)[:, 2], delta, prob)
        if np.isfinite(lower).any():
            res = solve_bounded(prob.A, prob.rhs[:, 2], lower, fixed=fixed,
                                max_rounds=max_rounds, rtol=rtol)
            delta[:, 2] = res.x
            logger.debug("pose constraint: %d active after %d rounds", res.active.sum(), res.rounds)

    P0 = g.node_values(state.points.values.astype(np.float64))
    disp = RasterMap(dom, g.scatter(delta), U_C)
    P_new = RasterMap(dom, g.scatter(P0 + delta), U_C)
    return P_new, disp


def _pose_bounds(state, part, pose, margin, graph) -> np.ndarray:
    """Per-node lower bound on the displacement's z component (``-inf`` if none)."""
    zt = reframe(pose.z_bottom, state.domain)
    under = graph.node_mask(zt.mask & part.occluded.defined)
    z_now = graph.node_values(state.points.values)[:, 2]
    z_tool = graph.node_values(zt.values)[:, 0]
    lower = np.full(graph.n, -np.inf)
    good = under & np.isfinite(z_tool) & (z_tool > 0)
    if np.any(under & ~good):
        logger.warning("ignoring %d invalid instrument depths", int(np.sum(under & ~good)))
    lower[good] = z_tool[good] + margin - z_now[good]
    return lower


def _relax_infeasible(lower, z_now, delta, prob) -> np.ndarray:
    """Drop the constraint when the instrument sits deeper than all the data."""
    bounded = np.isfinite(lower)
    if not bounded.any():
        return lower
    data = prob.weights > 0
    if not data.any():
        return lower
    deepest = float(np.max(z_now[data] + delta[data, 2]))
    if float(np.min(z_now[bounded] + lower[bounded])) > deepest:
        logger.warning(
            "instrument bottom lies beyond all observed tissue; relaxing pose constraint"
        )
        return np.full_like(lower, -np.inf)
    return lower
