"""Fine-mesh Whitney-form operators on P1 triangles.

All element integrals are closed form: products of barycentric coordinates
integrate exactly as ``area / 12 * (1 + delta_ij)`` and their gradients are
constant per triangle, so the Whitney-1 mass matrix is exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .linalg import as_csr
from .mesh import Mesh, edges_of


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class FineOperators:
    m0: sp.csr_matrix  # N x N nodal mass
    m1: sp.csr_matrix  # E x E Whitney-1 mass
    d0: sp.csr_matrix  # E x N incidence, edge a -> b has -1 at a, +1 at b
    k: sp.csr_matrix  # N x N stiffness d0^T m1 d0
    edges: np.ndarray  # E x 2, a < b

    @property
    def n_nodes(self) -> int:
        return self.m0.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]


def barycentric_gradients(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-triangle areas ``(T,)`` and barycentric gradients ``(T, 3, 2)``."""
    p = mesh.nodes[mesh.triangles]
    areas = mesh.signed_areas()
    grads = np.empty((len(areas), 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = p[:, j, 1] - p[:, k, 1]
        grads[:, i, 1] = p[:, k, 0] - p[:, j, 0]
    grads /= (2 * areas)[:, None, None]
    return areas, grads


def _check_areas(mesh: Mesh, areas: np.ndarray) -> None:
    bbox = float(np.prod(np.ptp(mesh.nodes, axis=0)))
    if np.any(areas < 1e-14 * bbox):
        t = int(np.argmin(areas))
        raise AssemblyError(f"degenerate triangle {t}: area {areas[t]:.3e} vs bounding box {bbox:.3e}")


def edge_index(edges: np.ndarray, n_nodes: int):
    """Vectorized lookup ``(a, b) -> edge id`` for canonical sorted edges."""
    keys = edges[:, 0] * n_nodes + edges[:, 1]

    def lookup(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return np.searchsorted(keys, lo * n_nodes + hi)

    return lookup


def assemble(mesh: Mesh) -> FineOperators:
    n = mesh.n_nodes
    tris = mesh.triangles
    areas, grads = barycentric_gradients(mesh)
    _check_areas(mesh, areas)
    edges, _ = edges_of(tris)
    lookup = edge_index(edges, n)

    # nodal mass
    lm = np.full((3, 3), 1.0) + np.eye(3)
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    vals = (areas[:, None, None] / 12.0 * lm[None]).reshape(-1)
    m0 = as_csr(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)))

    # local edges follow global orientation lo -> hi
    loc_pairs = [(0, 1), (0, 2), (1, 2)]
    la = np.empty((len(tris), 3), dtype=np.int64)
    lb = np.empty((len(tris), 3), dtype=np.int64)
    eid = np.empty((len(tris), 3), dtype=np.int64)
    for q, (i, j) in enumerate(loc_pairs):
        gi, gj = tris[:, i], tris[:, j]
        swap = gi > gj
        la[:, q] = np.where(swap, j, i)
        lb[:, q] = np.where(swap, i, j)
        eid[:, q] = lookup(gi, gj)

    t_idx = np.arange(len(tris))[:, None]
    gdot = np.einsum("tid,tjd->tij", grads, grads)

    def lam_int(i, j):
        return areas[:, None, None] / 12.0 * (1.0 + (i == j))

    ia, ib = la[:, :, None], lb[:, :, None]
    ic, id_ = la[:, None, :], lb[:, None, :]
    local = (
        lam_int(ia, ic) * gdot[t_idx[:, :, None], ib, id_]
        - lam_int(ia, id_) * gdot[t_idx[:, :, None], ib, ic]
        - lam_int(ib, ic) * gdot[t_idx[:, :, None], ia, id_]
        + lam_int(ib, id_) * gdot[t_idx[:, :, None], ia, ic]
    )
    e_rows = np.repeat(eid, 3, axis=1).ravel()
    e_cols = np.tile(eid, (1, 3)).ravel()
    ne = len(edges)
    m1 = as_csr(sp.coo_matrix((local.ravel(), (e_rows, e_cols)), shape=(ne, ne)))

    d0 = incidence(edges, n)
    k = as_csr(d0.T @ m1 @ d0)
    return FineOperators(m0=m0, m1=m1, d0=d0, k=k, edges=edges)


def incidence(edges: np.ndarray, n_nodes: int) -> sp.csr_matrix:
    ne = len(edges)
    rows = np.repeat(np.arange(ne), 2)
    cols = edges.ravel()
    vals = np.tile([-1.0, 1.0], ne)
    return as_csr(sp.coo_matrix((vals, (rows, cols)), shape=(ne, n_nodes)))


def p1_stiffness(mesh: Mesh) -> sp.csr_matrix:
    """Standard P1 stiffness ``int grad phi_i . grad phi_j`` assembled directly."""
    areas, grads = barycentric_gradients(mesh)
    _check_areas(mesh, areas)
    local = areas[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    tris = mesh.triangles
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    n = mesh.n_nodes
    return as_csr(sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)))


def stiffness_identity_check(ops: FineOperators, mesh: Mesh) -> float:
    """Max deviation between ``d0^T m1 d0`` and an independent P1 stiffness."""
    diff = (ops.d0.T @ ops.m1 @ ops.d0 - p1_stiffness(mesh)).tocoo()
    return float(np.max(np.abs(diff.data))) if diff.nnz else 0.0
