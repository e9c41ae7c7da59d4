"""Grid graphs and the Jacobi-preconditioned conjugate gradient solver."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

__all__ = ["GridGraph", "SolverError", "pcg", "solve_spd"]


class SolverError(RuntimeError):
    """Raised when an iterative solve fails to reach its tolerance."""


@dataclass
class GridGraph:
    """4-neighbour graph over the defined points of a grid mask.

    Attributes:
        mask: ``(H, W)`` boolean grid of nodes.
        index: ``(H, W)`` node number, ``-1`` off the mask.
        rows, cols: grid position of each node.
        edges: ``(E, 2)`` node pairs ``(i, j)`` with ``j`` right of or below ``i``.
        horizontal: ``(E,)`` flag, True for edges along ``u``.
    """

    mask: np.ndarray
    index: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    edges: np.ndarray
    horizontal: np.ndarray

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "GridGraph":
        mask = np.asarray(mask, dtype=bool)
        index = np.full(mask.shape, -1, dtype=np.int64)
        rows, cols = np.nonzero(mask)
        index[rows, cols] = np.arange(rows.size)
        h_ok = mask[:, :-1] & mask[:, 1:]
        v_ok = mask[:-1, :] & mask[1:, :]
        hr, hc = np.nonzero(h_ok)
        vr, vc = np.nonzero(v_ok)
        e_h = np.stack([index[hr, hc], index[hr, hc + 1]], axis=1)
        e_v = np.stack([index[vr, vc], index[vr + 1, vc]], axis=1)
        edges = np.concatenate([e_h, e_v]).reshape(-1, 2)
        horizontal = np.concatenate([np.ones(len(e_h), bool), np.zeros(len(e_v), bool)])
        return cls(mask, index, rows, cols, edges, horizontal)

    @property
    def n(self) -> int:
        return self.rows.size

    def node_values(self, grid: np.ndarray) -> np.ndarray:
        """``(C, H, W)`` grid -> ``(N, C)`` node values."""
        return grid[:, self.rows, self.cols].T

    def node_mask(self, grid_mask: np.ndarray) -> np.ndarray:
        return np.asarray(grid_mask, dtype=bool)[self.rows, self.cols]

    def scatter(self, node_vals: np.ndarray, fill=0.0) -> np.ndarray:
        """``(N, C)`` node values -> ``(C, H, W)`` grid."""
        node_vals = np.asarray(node_vals)
        out = np.full((node_vals.shape[1],) + self.mask.shape, fill, dtype=np.float64)
        out[:, self.rows, self.cols] = node_vals.T
        return out

    def incidence(self, edges: np.ndarray | None = None) -> sp.csr_matrix:
        """Signed ``(E, N)`` incidence: row ``e`` is ``x_j - x_i``."""
        edges = self.edges if edges is None else edges
        m = len(edges)
        data = np.concatenate([-np.ones(m), np.ones(m)])
        r = np.concatenate([np.arange(m), np.arange(m)])
        c = np.concatenate([edges[:, 0], edges[:, 1]])
        return sp.csr_matrix((data, (r, c)), shape=(m, self.n))

    def laplacian(self, edges: np.ndarray | None = None, weight: float = 1.0) -> sp.csr_matrix:
        B = self.incidence(edges)
        return (weight * (B.T @ B)).tocsr()

    def components(self, edges: np.ndarray | None = None) -> np.ndarray:
        edges = self.edges if edges is None else edges
        adj = sp.coo_matrix(
            (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(self.n, self.n)
        )
        _, labels = connected_components(adj, directed=False)
        return labels


def pcg(A, b: np.ndarray, x0: np.ndarray | None = None, rtol: float = 1e-10,
        maxiter: int | None = None) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned conjugate gradient on SPD ``A`` for one or more RHS.

    Columns of ``b`` are independent systems iterated in lockstep; each stops
    updating once its residual falls below ``rtol * ||b||``.

    Returns:
        ``(x, iterations)``.

    Raises:
        SolverError: some column has not converged after ``maxiter`` steps.
    """
    b = np.asarray(b, dtype=np.float64)
    vec = b.ndim == 1
    B = b[:, None] if vec else b
    n, k = B.shape
    if n == 0:
        return (np.zeros(0) if vec else np.zeros((0, k))), 0
    maxiter = 10 * n if maxiter is None else maxiter
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise SolverError("matrix has a non-positive diagonal entry")
    inv_d = (1.0 / diag)[:, None]
    X = np.zeros_like(B) if x0 is None else np.array(x0, dtype=np.float64).reshape(n, k)
    R = B - A @ X
    bnorm = np.linalg.norm(B, axis=0)
    thresh = rtol * np.where(bnorm > 0, bnorm, 1.0)
    active = np.linalg.norm(R, axis=0) > thresh
    Z = inv_d * R
    Pd = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    it = 0
    while active.any():
        if it >= maxiter:
            res = np.linalg.norm(R, axis=0) / np.where(bnorm > 0, bnorm, 1.0)
            raise SolverError(
                f"CG stopped after {it} iterations; relative residuals {res.tolist()}"
            )
        it += 1
        AP = A @ Pd
        pap = np.einsum("ij,ij->j", Pd, AP)
        step = np.where(active, rz / np.where(pap > 0, pap, 1.0), 0.0)
        X += step * Pd
        R -= step * AP
        Z = inv_d * R
        rz_new = np.einsum("ij,ij->j", R, Z)
        beta = np.where(active, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        Pd = Z + beta * Pd
        rz = rz_new
        active &= np.linalg.norm(R, axis=0) > thresh
    logger.debug("pcg converged in %d iterations (n=%d, k=%d)", it, n, k)
    return (X[:, 0] if vec else X), it


def solve_spd(A, b, rtol: float = 1e-10, maxiter: int | None = None) -> np.ndarray:
    x, _ = pcg(sp.csr_matrix(A), b, rtol=rtol, maxiter=maxiter)
    return x
