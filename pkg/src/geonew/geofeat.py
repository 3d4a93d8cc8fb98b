"""Mesh-derived per-node geometry features.

The feature matrix fed to the encoder has the fixed column order
``[hks | hks_grad | harmonic | sdf | labels]``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .feec import FineOperators, barycentric_gradients
from .linalg import generalized_sym_eig, solve_spd
from .mesh import Mesh, boundary_edges

N_TIMES = 8
N_EIGS = 32
CLUSTER_GAP = 1e-8


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class GeoFeatures:
    hks: np.ndarray
    hks_grad: np.ndarray
    harmonic: np.ndarray
    sdf: np.ndarray
    labels: np.ndarray
    times: np.ndarray
    matrix: np.ndarray

    @property
    def d_in(self) -> int:
        return self.matrix.shape[1]


def interior_nodes(mesh: Mesh) -> np.ndarray:
    mask = np.ones(mesh.n_nodes, dtype=bool)
    mask[mesh.boundary_nodes()] = False
    return np.flatnonzero(mask)


def laplace_eigenpairs(ops: FineOperators, mesh: Mesh, n_eigs: int | None = None):
    """Dirichlet Laplace eigenpairs on the interior nodes, whole clusters kept.

    Returns ``(lam, phi)`` with ``phi`` of shape ``(N, k)`` (zero on boundary rows).
    """
    inner = interior_nodes(mesh)
    n_int = len(inner)
    if n_int == 0:
        raise FeatureError("mesh has no interior nodes")
    if n_eigs is None:
        n_eigs = min(N_EIGS, n_int)
    if n_eigs > n_int:
        raise FeatureError(f"n_eigs={n_eigs} exceeds the {n_int} interior nodes")
    k = ops.k[inner][:, inner].toarray()
    m = ops.m0[inner][:, inner].toarray()
    lam, vec = generalized_sym_eig(k, m)
    n = n_eigs
    # extend through a degenerate cluster so sum phi^2 is basis independent
    while n < n_int and lam[n] - lam[n - 1] <= CLUSTER_GAP * abs(lam[n]):
        n += 1
    phi = np.zeros((mesh.n_nodes, n))
    phi[inner] = vec[:, :n]
    return lam[:n], phi


def default_times(lam: np.ndarray, n_times: int = N_TIMES) -> np.ndarray:
    """Log-uniform grid over ``[4 ln 10 / lam_max, 4 ln 10 / lam_min]``."""
    lo = 4 * math.log(10) / lam[-1]
    hi = 4 * math.log(10) / lam[0]
    if n_times == 1:
        return np.array([lo])
    return np.exp(np.linspace(math.log(lo), math.log(hi), n_times))


def nodal_gradients(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Area-weighted average of per-triangle P1 gradients; ``(N, C) -> (N, 2C)``."""
    values = np.asarray(values, dtype=np.float64)
    areas, grads = barycentric_gradients(mesh)
    tris = mesh.triangles
    # per-triangle gradient of each column: (T, C, 2)
    g = np.einsum("tid,tic->tcd", grads, values[tris])
    n, c = mesh.n_nodes, values.shape[1]
    acc = np.zeros((n, c, 2))
    wsum = np.zeros(n)
    for i in range(3):
        np.add.at(acc, tris[:, i], areas[:, None, None] * g)
        np.add.at(wsum, tris[:, i], areas)
    return (acc / wsum[:, None, None]).reshape(n, 2 * c)


def heat_kernel_signature(ops: FineOperators, mesh: Mesh, times=None, n_eigs: int | None = None,
                          n_times: int = N_TIMES):
    """HKS(x, t) = sum_k phi_k(x)^2 exp(-t lam_k) and its spatial gradient.

    Returns ``(hks, hks_grad, times)``; boundary rows of ``hks`` are zero.
    """
    lam, phi = laplace_eigenpairs(ops, mesh, n_eigs)
    if times is None:
        times = default_times(lam, n_times)
    times = np.asarray(times, dtype=np.float64)
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise FeatureError("diffusion times must be nonnegative and ascending")
    hks = (phi**2) @ np.exp(-np.outer(lam, times))
    return hks, nodal_gradients(mesh, hks), times


def default_group_pairs(mesh: Mesh) -> list[tuple[str, str]]:
    return list(itertools.combinations(sorted(mesh.sidesets), 2))


def harmonic_coordinates(ops: FineOperators, mesh: Mesh, group_pairs=None) -> np.ndarray:
    """Discrete harmonic functions equal to 1 on the first group, 0 on the second."""
    if group_pairs is None:
        group_pairs = default_group_pairs(mesh)
    k = ops.k.toarray()
    out = np.zeros((mesh.n_nodes, len(group_pairs)))
    for col, (gi, gj) in enumerate(group_pairs):
        for g in (gi, gj):
            if g not in mesh.sidesets:
                raise FeatureError(f"unknown sideset {g!r}")
        ones = mesh.sidesets[gi].nodes
        zeros = mesh.sidesets[gj].nodes
        if len(ones) == 0 or len(zeros) == 0:
            raise FeatureError(f"empty boundary group in pair ({gi!r}, {gj!r})")
        if np.intersect1d(ones, zeros).size:
            raise FeatureError(f"boundary groups {gi!r} and {gj!r} overlap")
        fixed = np.zeros(mesh.n_nodes, dtype=bool)
        fixed[ones] = True
        fixed[zeros] = True
        free = np.flatnonzero(~fixed)
        psi = np.zeros(mesh.n_nodes)
        psi[ones] = 1.0
        if free.size:
            rhs = -k[np.ix_(free, ones)].sum(axis=1)
            psi[free] = solve_spd(k[np.ix_(free, free)], rhs)
        out[:, col] = psi
    return out


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise distances ``(P, S)`` from points to segments ``a[s] -> b[s]``."""
    ab = b - a
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip(np.sum(ap * ab[None], axis=2) / np.sum(ab * ab, axis=1)[None], 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def distance_field(mesh: Mesh) -> np.ndarray:
    """Unsigned distance from each node to the nearest boundary segment, ``(N, 1)``."""
    edges, _ = boundary_edges(mesh)
    a = mesh.nodes[edges[:, 0]]
    b = mesh.nodes[edges[:, 1]]
    d = point_segment_distance(mesh.nodes, a, b).min(axis=1)
    d[np.unique(edges)] = 0.0
    return d[:, None]


def standardize(cols: np.ndarray) -> np.ndarray:
    mean = cols.mean(axis=0)
    std = cols.std(axis=0)
    out = cols - mean
    ok = std > 1e-12 * np.maximum(1.0, np.abs(mean))
    out[:, ok] /= std[ok]
    out[:, ~ok] = 0.0
    return out


def assemble_features(hks, hks_grad, harmonic, sdf, labels, mu=None) -> np.ndarray:
    """Concatenate and standardize per mesh; label and ``mu`` columns stay raw."""
    blocks = [np.asarray(b, dtype=np.float64) for b in (hks, hks_grad, harmonic, sdf)]
    labels = np.asarray(labels, dtype=np.float64)
    n = labels.shape[0]
    for name, b in zip(("hks", "hks_grad", "harmonic", "sdf"), blocks):
        if b.ndim != 2 or b.shape[0] != n:
            raise FeatureError(f"{name} has shape {b.shape}, expected ({n}, ·)")
    parts = [standardize(np.concatenate(blocks, axis=1)), labels]
    if mu is not None:
        mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        parts.append(np.broadcast_to(mu, (n, mu.size)))
    out = np.concatenate(parts, axis=1)
    if not np.all(np.isfinite(out)):
        raise FeatureError("non-finite feature values")
    return out


def compute_features(mesh: Mesh, ops: FineOperators, *, n_times: int = N_TIMES, n_eigs=None,
                     group_pairs=None, mu=None) -> GeoFeatures:
    hks, hks_grad, times = heat_kernel_signature(ops, mesh, None, n_eigs, n_times)
    harmonic = harmonic_coordinates(ops, mesh, group_pairs)
    sdf = distance_field(mesh)
    labels = mesh.labels_onehot()
    matrix = assemble_features(hks, hks_grad, harmonic, sdf, labels, mu)
    return GeoFeatures(hks, hks_grad, harmonic, sdf, labels, times, matrix)
