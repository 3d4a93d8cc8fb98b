"""Lipschitz-bounded antisymmetric edge flux on the reduced graph.

The dual flux is ``Fd = H(z) F'(u, z)`` where, for every reduced edge
``(i, j)`` with ``i < j``,

    xi_ij  = [Pi^T (u_i - u_j), 1/2 Pi^T (u_i + u_j)]
    F'_ij  = Pi (beta' A xi_ij + gamma' C tanh(B xi_ij))

``A, B, C, H`` come from a hypernetwork on the context tokens ``c_F``.  Every
linear map passes through :func:`geonew.nn.bounded_weight`, so its certified
gain is at most 1, and ``||H||_2 <= 1``.  The stacked edge features have gain
``g = ||[d0; |d0|/2]||_2`` in ``u``; capping ``beta', gamma' <= zeta_eff / (2 g)``
then certifies ``C_L <= zeta_eff``.

Swapping the orientation of an edge negates ``xi`` (the mean block carries the
sign ``(-1)^[i > j]``), and every map after it is odd, so ``F'_ji = -F'_ij``.
Only canonical edges ``i < j`` are stored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Var
from .linalg import LinAlgError, op_norm_2, sym_eig
from .reduced import complete_graph


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class FluxConfig:
    d_op: int = 16
    d_hid: int = 32
    hyper_hidden: int = 32
    epsilon: float = 1.0
    eps_h: float = 1e-2
    safety: float = 0.99
    beta_init: float = 0.5
    log_gamma_init: float = -2.0
    mean_channel: bool = True

    def __post_init__(self):
        if self.d_op < 1 or self.d_hid < 1:
            raise ValueError("flux operator dimensions must be positive")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.eps_h < 1:
            raise ValueError(f"eps_h must lie in (0, 1), got {self.eps_h}")
        if not 0 < self.safety < 1:
            raise ValueError(f"safety must lie in (0, 1), got {self.safety}")
        if self.beta_init <= 0:
            raise ValueError("beta_init must be > 0")


def init_flux(params: nn.ParamBundle, name: str, cfg: FluxConfig, n_fields: int, p_total: int,
              n_c: int, d_model: int, seed: int) -> None:
    d, h = cfg.d_op, cfg.d_hid
    p1 = p_total * (p_total - 1) // 2
    pi_t = np.zeros((d, n_fields))
    pi_t[np.arange(d), np.arange(d) % n_fields] = 1.0 / math.sqrt(d)
    params[f"{name}.pi_t"] = pi_t
    params[f"{name}.a0"] = np.eye(d, 2 * d)
    params[f"{name}.b0"] = np.eye(h, 2 * d)
    params[f"{name}.c0"] = np.eye(d, h)
    nn.init_linear(params, f"{name}.trunk", n_c * d_model, cfg.hyper_hidden, seed)
    for head, size in (("a", d * 2 * d), ("b", h * 2 * d), ("c", d * h), ("h", p1 * p1)):
        nn.init_linear(params, f"{name}.head_{head}", cfg.hyper_hidden, size, seed, zero=True)
    params[f"{name}.log_beta"] = np.array(math.log(cfg.beta_init))
    params[f"{name}.log_gamma"] = np.array(cfg.log_gamma_init)


@dataclass
class FluxOperators:
    """Effective (already bounded) maps for one geometry."""

    pi_t: Var  # d_op x F
    a: Var  # d_op x 2 d_op
    b: Var  # d_hid x 2 d_op
    c: Var  # d_op x d_hid
    h: Var  # P1 x P1
    bounds: dict = field(default_factory=dict)

    def frozen(self) -> "FluxOperators":
        """Numpy snapshot (no tape), used inside Newton iterations."""
        return FluxOperators(_val(self.pi_t), _val(self.a), _val(self.b), _val(self.c), _val(self.h),
                             dict(self.bounds))


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def flux_operators(p, name: str, c_f: Var, cfg: FluxConfig, p_total: int) -> FluxOperators:
    d, hd = cfg.d_op, cfg.d_hid
    p1 = p_total * (p_total - 1) // 2
    ctx = ad.reshape(c_f, (1, -1))
    t = ad.gelu(nn.linear(p, f"{name}.trunk", ctx))

    def head(key, shape):
        return ad.reshape(nn.linear(p, f"{name}.head_{key}", t), shape)

    pi_t, b_pi = nn.bounded_weight(p[f"{name}.pi_t"])
    a, b_a = nn.bounded_weight(p[f"{name}.a0"] + head("a", (d, 2 * d)))
    b, b_b = nn.bounded_weight(p[f"{name}.b0"] + head("b", (hd, 2 * d)))
    c, b_c = nn.bounded_weight(p[f"{name}.c0"] + head("c", (d, hd)))
    h = hodge_map(head("h", (p1, p1)), cfg.eps_h)
    bounds = {"pi": b_pi, "a": b_a, "b": b_b, "c": b_c}
    return FluxOperators(pi_t=pi_t, a=a, b=b, c=c, h=h, bounds=bounds)


def hodge_map(hyper: Var, eps_h: float) -> Var:
    """SPD ``H = (1 - eps_h) Ht Ht^T + eps_h I`` with ``Ht = bounded(I + hyper)``.

    Since ``||Ht||_2 <= 1`` the spectrum of ``H`` lies in ``[eps_h, 1]``.
    """
    n = hyper.shape[0]
    ht, _ = nn.bounded_weight(hyper + np.eye(n))
    return (ht @ ht.T) * (1.0 - eps_h) + np.eye(n) * eps_h


@lru_cache(maxsize=64)
def feature_gain(p_total: int, mean_channel: bool = True) -> float:
    """``||[d0; |d0|/2]||_2`` for the complete graph (``||d0||_2`` without the mean block)."""
    _, d0 = complete_graph(p_total)
    stacked = np.vstack([d0, 0.5 * np.abs(d0)]) if mean_channel else d0
    return op_norm_2(stacked, tol=1e-13)


def edge_features(u: np.ndarray, i: int, j: int, pi_t: np.ndarray) -> np.ndarray:
    """Projected feature ``xi_ij`` for one oriented edge (numpy reference)."""
    if i == j:
        raise ValueError("edge endpoints must differ")
    u = np.asarray(u, dtype=np.float64)
    sign = -1.0 if i > j else 1.0
    diff = pi_t @ (u[i] - u[j])
    mean = sign * 0.5 * (pi_t @ (u[i] + u[j]))
    return np.concatenate([diff, mean])


def oriented_edge_flux(u: np.ndarray, i: int, j: int, ops: FluxOperators, beta_p: float, gamma_p: float,
                       mean_channel: bool = True) -> np.ndarray:
    """Primal flux for an arbitrary oriented edge ``(i, j)`` (numpy reference)."""
    ops = ops.frozen()
    pi_t = ops.pi_t
    xi = edge_features(u, i, j, pi_t)
    if not mean_channel:
        xi[pi_t.shape[0]:] = 0.0
    y = beta_p * ops.a @ xi + gamma_p * ops.c @ np.tanh(ops.b @ xi)
    return pi_t.T @ y


def edge_feature_matrix(u: Var, pi_t: Var, mean_channel: bool = True) -> Var:
    """All canonical edges at once: ``P1 x 2 d_op``."""
    _, d0 = complete_graph(u.shape[0])
    # d0 u gives u_j - u_i on edge (i, j); the feature uses u_i - u_j
    diff = ad.matmul(-d0, u) @ pi_t.T
    if mean_channel:
        mean = ad.matmul(0.5 * np.abs(d0), u) @ pi_t.T
    else:
        mean = ad.mul(diff, 0.0)
    return ad.concat([diff, mean], axis=1)


def primal_flux(u: Var, ops: FluxOperators, beta_p, gamma_p, mean_channel: bool = True) -> Var:
    """``F'`` on the canonical edges, ``P1 x F``."""
    xi = edge_feature_matrix(u, ops.pi_t, mean_channel)
    lin = (xi @ ops.a.T) * beta_p
    nonlin = (ad.tanh(xi @ ops.b.T) @ ops.c.T) * gamma_p
    return (lin + nonlin) @ ops.pi_t


def dual_flux(u: Var, ops: FluxOperators, beta_p, gamma_p, mean_channel: bool = True) -> Var:
    return ops.h @ primal_flux(u, ops, beta_p, gamma_p, mean_channel)


def amplitudes(p, name: str, zeta_eff: float, gain: float) -> tuple[Var, Var]:
    """Capped amplitudes ``beta' = rho min(1, beta)``, ``gamma' = rho min(1, gamma)``.

    ``beta = exp(log_beta)`` and ``rho = zeta_eff / (2 g)``, so
    ``beta' + gamma' <= zeta_eff / g`` always holds.
    """
    rho = zeta_eff / (2.0 * gain)
    beta = ad.minimum(ad.exp(p[f"{name}.log_beta"]), 1.0) * rho
    gamma = ad.minimum(ad.exp(p[f"{name}.log_gamma"]), 1.0) * rho
    return beta, gamma


def certified_lipschitz(beta_p: float, gamma_p: float, gain: float, bounds: dict | None = None) -> float:
    """Certified ``C_L`` of ``u -> H F'(u)``; ``bounds`` are the per-map certified gains."""
    b = {"pi": 1.0, "a": 1.0, "b": 1.0, "c": 1.0} if bounds is None else bounds
    return b["pi"] ** 2 * gain * (beta_p * b["a"] + gamma_p * b["b"] * b["c"])


# ------------------------------------------------------------- Lipschitz budget


def compute_zeta(k_free: np.ndarray, d0_free: np.ndarray, epsilon: float = 1.0, safety: float = 0.99) -> float:
    """Largest admissible flux Lipschitz constant times ``safety``.

    For ``G = eps K u + d0^T Fd(u)`` the fixed-point map
    ``u -> -(eps K)^{-1} d0^T Fd(u)`` contracts when
    ``C_L ||K^{-1}|| ||d0|| / eps < 1``.
    """
    lam, _ = sym_eig(np.asarray(k_free, dtype=np.float64))
    if lam[0] <= 1e-12 * max(1.0, abs(lam[-1])):
        raise LinAlgError(f"free-restricted stiffness is singular (lambda_min = {lam[0]:.3e})")
    d0_norm = op_norm_2(d0_free, tol=1e-13)
    return safety * epsilon * lam[0] / d0_norm


def tau(c_l: float, k_free: np.ndarray, d0_free: np.ndarray, epsilon: float = 1.0) -> float:
    """Contraction factor ``C_L ||K^{-1}|| ||d0|| / eps`` (must be < 1)."""
    lam, _ = sym_eig(np.asarray(k_free, dtype=np.float64))
    return c_l * op_norm_2(d0_free, tol=1e-13) / (epsilon * lam[0])


@dataclass
class LipschitzBudget:
    """Running estimate of ``zeta``.

    ``mode="sample"`` uses the per-sample value (guarantees ``tau < 1``);
    ``mode="tracked"`` uses an exponential moving average refreshed every
    ``refresh`` steps from a random subset of a batch.
    """

    epsilon: float = 1.0
    safety: float = 0.99
    mode: str = "tracked"
    decay: float = 0.9
    refresh: int = 10
    zeta: float | None = None
    n_updates: int = 0

    def __post_init__(self):
        if self.mode not in ("tracked", "sample"):
            raise ValueError(f"unknown zeta mode {self.mode!r}")

    def observe(self, zetas) -> float:
        z = float(np.mean(zetas))
        self.zeta = z if self.zeta is None else self.decay * self.zeta + (1 - self.decay) * z
        self.n_updates += 1
        return self.zeta

    def due(self, step: int) -> bool:
        return self.zeta is None or step % self.refresh == 0

    def effective(self, sample_zeta: float | None = None) -> float:
        """``zeta_eff = zeta / 2`` for the current mode."""
        if self.mode == "sample":
            if sample_zeta is None:
                raise BudgetError("per-sample mode needs the sample's zeta")
            return 0.5 * sample_zeta
        if self.zeta is None:
            if sample_zeta is None:
                raise BudgetError("budget not initialized")
            return 0.5 * sample_zeta
        return 0.5 * self.zeta

    def state(self) -> dict:
        return {"zeta": self.zeta, "n_updates": self.n_updates}


def empirical_lipschitz(ops: FluxOperators, beta_p: float, gamma_p: float, p_total: int, n_fields: int,
                        n_pairs: int, rng: np.random.Generator, mean_channel: bool = True,
                        scale: float = 1.0) -> float:
    """Largest ``||Fd(u1) - Fd(u2)|| / ||u1 - u2||`` over random pairs (Frobenius norms)."""
    ops = ops.frozen()
    beta_p, gamma_p = float(_val(beta_p)), float(_val(gamma_p))
    t = ad.Tape()
    best = 0.0
    for _ in range(n_pairs):
        u1 = rng.standard_normal((p_total, n_fields)) * scale
        # mix far-apart and nearby pairs
        du = rng.standard_normal((p_total, n_fields)) * scale * (10.0 ** rng.uniform(-4, 0))
        u2 = u1 + du
        f1 = dual_flux(t.const(u1), ops, beta_p, gamma_p, mean_channel).value
        f2 = dual_flux(t.const(u2), ops, beta_p, gamma_p, mean_channel).value
        best = max(best, float(np.linalg.norm(f1 - f2) / np.linalg.norm(du)))
        t.nodes.clear()
    return best
