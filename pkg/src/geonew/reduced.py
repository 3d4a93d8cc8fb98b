"""Geometry-conditioned reduced finite element spaces.

A column-stochastic partition matrix ``W`` (``P_total x N``) defines reduced
nodal functions ``psi_i = sum_j W_ij phi_j``.  The reduced Whitney-1 space is
spanned by ``psi_i grad psi_j - psi_j grad psi_i`` over all pairs ``i < j``,
so the reduced graph is complete and its incidence ``d0`` depends only on
``P_total``.

Partitions are ordered ``[free | fixed]``: the first ``P`` rows are learned
and carry unknown coefficients; the trailing rows are the boundary partitions
whose coefficients are fixed by the Dirichlet data.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Var
from .feec import FineOperators
from .mesh import Mesh


class PartitionError(ValueError):
    pass


@lru_cache(maxsize=64)
def complete_graph(p_total: int) -> tuple[np.ndarray, np.ndarray]:
    """Lexicographic pairs ``(i, j), i < j`` and the ``P1 x P`` incidence."""
    pairs = np.array([(i, j) for i in range(p_total) for j in range(i + 1, p_total)], dtype=np.int64)
    pairs = pairs.reshape(-1, 2)
    d0 = np.zeros((len(pairs), p_total))
    d0[np.arange(len(pairs)), pairs[:, 0]] = -1.0
    d0[np.arange(len(pairs)), pairs[:, 1]] = 1.0
    d0.setflags(write=False)
    pairs.setflags(write=False)
    return pairs, d0


# ------------------------------------------------------------ Dirichlet data


@dataclass(frozen=True)
class BoundaryRows:
    """Fixed boundary partitions for all fields.

    rows: ``(F, n_fixed, N)`` nonnegative partition values
    coefs: ``(n_fixed, F)`` fixed reduced coefficients
    dirichlet: ``(N,)`` mask of nodes where learned partitions vanish
    """

    rows: np.ndarray
    coefs: np.ndarray
    dirichlet: np.ndarray

    @property
    def n_fixed(self) -> int:
        return self.rows.shape[1]


def dirichlet_partitions(nodes: np.ndarray, u_b: np.ndarray, n_nodes: int) -> list[tuple[np.ndarray, float]]:
    """Boundary partitions reproducing ``u_b`` exactly on the sideset ``nodes``.

    Same-sign data gives ``psi = u_b / s`` with ``s = sum(u_b)`` and the
    complement ``1 - psi``; coefficients ``(s, 0)``.  Mixed-sign data is split
    into positive and negative parts, each normalized, plus the complement.
    Zero data uses a uniform partition with coefficient 0.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    u_b = np.asarray(u_b, dtype=np.float64).reshape(-1)
    if len(nodes) == 0:
        raise PartitionError("empty Dirichlet sideset")
    if u_b.shape != nodes.shape:
        raise PartitionError(f"u_b has {u_b.size} values for {len(nodes)} sideset nodes")
    if not np.all(np.isfinite(u_b)):
        raise PartitionError("non-finite Dirichlet data")

    def row(values):
        r = np.zeros(n_nodes)
        r[nodes] = values
        return r

    if np.all(u_b == 0):
        psi = np.full(len(nodes), 1.0 / len(nodes))
        return [(row(psi), 0.0), (row(1.0 - psi), 0.0)]
    if np.all(u_b >= 0) or np.all(u_b <= 0):
        s = float(np.sum(u_b))
        psi = u_b / s
        return [(row(psi), s), (row(1.0 - psi), 0.0)]
    pos = np.maximum(u_b, 0.0)
    neg = np.maximum(-u_b, 0.0)
    sp, sn = float(pos.sum()), float(neg.sum())
    psi_p, psi_n = pos / sp, neg / sn
    return [(row(psi_p), sp), (row(psi_n), -sn), (row(1.0 - psi_p - psi_n), 0.0)]


def build_boundary_rows(mesh: Mesh, dirichlet: dict[str, np.ndarray], n_fields: int = 1) -> BoundaryRows:
    """Assemble boundary partitions for every Dirichlet sideset and field.

    ``dirichlet`` maps sideset name to values of shape ``(n_nodes_in_set,)``
    or ``(n_nodes_in_set, F)``.
    """
    n = mesh.n_nodes
    per_field_rows = []
    per_field_coefs = []
    mask = np.zeros(n, dtype=bool)
    for name in sorted(dirichlet):
        if name not in mesh.sidesets:
            raise PartitionError(f"unknown sideset {name!r}")
        mask[mesh.sidesets[name].nodes] = True
    for f in range(n_fields):
        rows, coefs = [], []
        for name in sorted(dirichlet):
            vals = np.asarray(dirichlet[name], dtype=np.float64)
            if vals.ndim == 1:
                vals = vals[:, None]
            if vals.shape[1] != n_fields:
                raise PartitionError(f"sideset {name!r}: data has {vals.shape[1]} fields, expected {n_fields}")
            for r, c in dirichlet_partitions(mesh.sidesets[name].nodes, vals[:, f], n):
                rows.append(r)
                coefs.append(c)
        per_field_rows.append(rows)
        per_field_coefs.append(coefs)
    counts = {len(r) for r in per_field_rows}
    if len(counts) != 1:
        raise PartitionError(f"fields produce different boundary partition counts {sorted(counts)}")
    rows = np.array(per_field_rows).reshape(n_fields, -1, n)
    coefs = np.array(per_field_coefs).reshape(n_fields, -1).T
    return BoundaryRows(rows=rows, coefs=coefs, dirichlet=mask)


# ------------------------------------------------------------- W model


def init_partition_model(params: nn.ParamBundle, name: str, d_model: int, n_c: int, p_free: int,
                         n_fields: int, hidden: int, seed: int, alpha_init: float = 0.95) -> None:
    d_in = d_model + n_c * d_model
    nn.init_mlp(params, f"{name}.mlp", [d_in, hidden, hidden, n_fields * p_free], seed)
    nn.init_linear(params, f"{name}.lin", d_in, n_fields * p_free, seed)
    params[f"{name}.alpha"] = np.array(np.log(alpha_init / (1 - alpha_init)))


def partition_forward(p, name: str, z: Var, c_w: Var, boundary: BoundaryRows, p_free: int) -> list[Var]:
    """Per-field partition matrices ``(P + n_fixed) x N`` as tape variables.

    Logits ``S = MLP([z | c]) + alpha * Linear([z | c])`` are softmaxed over
    the learned partitions of each node; learned partitions are zeroed on
    Dirichlet nodes where the fixed boundary rows carry all the mass.
    """
    n = z.shape[0]
    ctx = ad.broadcast_row(ad.reshape(c_w, (1, -1)), n)
    x = ad.concat([z, ctx], axis=1)
    alpha = ad.sigmoid(p[f"{name}.alpha"])
    s = nn.mlp_forward(p, f"{name}.mlp", x, 3) + alpha * nn.linear(p, f"{name}.lin", x)
    keep = (~boundary.dirichlet).astype(np.float64)[:, None]
    out = []
    n_fields = boundary.rows.shape[0]
    for f in range(n_fields):
        logits = s if n_fields == 1 else s[:, f * p_free:(f + 1) * p_free]
        w_free = ad.softmax(logits, axis=1) * keep
        out.append(ad.concat([w_free.T, boundary.rows[f]], axis=0))
    return out


def softmax_partitions(logits: np.ndarray, boundary: BoundaryRows, field: int = 0) -> np.ndarray:
    """Numpy helper: partition matrix from ``N x P`` logits (used in tests and tools)."""
    t = Tape()
    keep = (~boundary.dirichlet).astype(np.float64)[:, None]
    w_free = ad.softmax(t.const(logits), axis=1) * keep
    return ad.concat([w_free.T, boundary.rows[field]], axis=0).value


# ---------------------------------------------------------- projection


@dataclass(frozen=True)
class ReducedSystem:
    """Reduced operators for one field (stack per field for ``F > 1``)."""

    m0: np.ndarray
    m1: np.ndarray
    d0: np.ndarray
    k: np.ndarray
    w1: np.ndarray
    p_free: int

    @property
    def p_total(self) -> int:
        return self.m0.shape[0]

    @property
    def free(self) -> np.ndarray:
        return np.arange(self.p_free)

    @property
    def k_free(self) -> np.ndarray:
        return self.k[: self.p_free, : self.p_free]


def edge_projection_t(fine: FineOperators, w: Var) -> Var:
    """``W1^T`` (``E x P1``) with ``(W1)_(ij),(ab) = W_ia W_jb - W_ib W_ja``."""
    pairs, _ = complete_graph(w.shape[0])
    wt = w.T
    wa = ad.take(wt, fine.edges[:, 0], axis=0)
    wb = ad.take(wt, fine.edges[:, 1], axis=0)
    i, j = pairs[:, 0], pairs[:, 1]
    return ad.take(wa, i, axis=1) * ad.take(wb, j, axis=1) - ad.take(wb, i, axis=1) * ad.take(wa, j, axis=1)


def project_vars(fine: FineOperators, w: Var) -> dict[str, Var]:
    """Reduced ``m0``, ``m1``, ``k`` and ``w1t`` as tape variables."""
    if w.shape[1] != fine.n_nodes:
        raise PartitionError(f"partition matrix has {w.shape[1]} columns but the mesh has {fine.n_nodes} nodes")
    _, d0 = complete_graph(w.shape[0])
    m0 = w @ ad.spmatmul(fine.m0, w.T)
    w1t = edge_projection_t(fine, w)
    m1 = w1t.T @ ad.spmatmul(fine.m1, w1t)
    k = ad.matmul(d0.T, ad.matmul(m1, d0))
    return {"m0": m0, "m1": m1, "k": k, "w1t": w1t}


def project_operators(fine: FineOperators, w: np.ndarray, p_free: int | None = None) -> ReducedSystem:
    """Numpy entry point: project fine operators through a partition matrix."""
    w = np.asarray(w, dtype=np.float64)
    t = Tape()
    out = project_vars(fine, t.const(w))
    _, d0 = complete_graph(w.shape[0])
    return ReducedSystem(
        m0=out["m0"].value,
        m1=out["m1"].value,
        d0=np.array(d0),
        k=out["k"].value,
        w1=out["w1t"].value.T,
        p_free=w.shape[0] if p_free is None else p_free,
    )


def reconstruct_field(u_reduced: np.ndarray, w) -> np.ndarray:
    """Nodal values ``W^T u`` per field; ``w`` is ``(P, N)`` or a per-field sequence."""
    u_reduced = np.asarray(u_reduced, dtype=np.float64)
    if u_reduced.ndim == 1:
        u_reduced = u_reduced[:, None]
    ws = [w] if isinstance(w, np.ndarray) and w.ndim == 2 else list(w)
    if len(ws) == 1 and u_reduced.shape[1] > 1:
        ws = ws * u_reduced.shape[1]
    return np.column_stack([ws[f].T @ u_reduced[:, f] for f in range(u_reduced.shape[1])])


def partition_of_unity_error(w: np.ndarray) -> float:
    return float(np.max(np.abs(1.0 - np.asarray(w).sum(axis=0))))
