"""Newton solves of the learned reduced system and adjoint gradients.

The residual over the free partitions is

    G(u) = eps K u + d0^T Fd(u) - b

evaluated with the fixed Dirichlet coefficients appended to ``u``.  The
Jacobian is exact: one reverse sweep per residual component.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from . import autodiff as ad
from .autodiff import Tape, Var
from .flux import FluxOperators, dual_flux
from .reduced import complete_graph

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolveConfig:
    tol: float = 1e-6
    max_iter: int = 200
    threshold: float = 0.8
    line_search: bool = True
    max_halvings: int = 8
    retries: int = 0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if not 0 < self.threshold <= 1:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class SolveResult:
    u_star: np.ndarray  # P_free x F
    converged: bool
    iterations: int
    residual_norm: float
    attempts: int = 1
    history: list = field(default_factory=list)


@dataclass
class ReducedProblem:
    """Everything the residual needs for one sample.

    ``k`` has shape ``(F, P_total, P_total)``; ``u_fixed`` is ``(n_fixed, F)``;
    ``load`` (optional) is ``(P_total, F)``.  Entries may be numpy arrays or
    tape variables (the latter when differentiating w.r.t. parameters).
    """

    k: object
    flux: FluxOperators | None
    beta: object
    gamma: object
    u_fixed: np.ndarray
    p_free: int
    epsilon: float = 1.0
    mean_channel: bool = True
    load: object = None

    @property
    def n_fields(self) -> int:
        return self.u_fixed.shape[1]

    @property
    def p_total(self) -> int:
        return self.p_free + self.u_fixed.shape[0]

    @property
    def n_unknowns(self) -> int:
        return self.p_free * self.n_fields


def full_state(u_free, problem: ReducedProblem):
    """Append the fixed coefficients: ``(P_total, F)``."""
    if isinstance(u_free, Var):
        return ad.concat([u_free, u_free.tape.const(problem.u_fixed)], axis=0)
    return np.vstack([u_free, problem.u_fixed])


def residual_graph(u_free: Var, problem: ReducedProblem) -> Var:
    """Residual rows over the free partitions as a tape variable, ``(P_free, F)``."""
    tape = u_free.tape
    u = full_state(u_free, problem)
    _, d0 = complete_graph(problem.p_total)
    cols = []
    for f in range(problem.n_fields):
        k_f = problem.k[f]
        uf = u[:, f:f + 1] if problem.n_fields > 1 else u
        cols.append(ad.matmul(k_f, uf) if isinstance(k_f, Var) else ad.matmul(tape.const(k_f), uf))
    g = cols[0] if len(cols) == 1 else ad.concat(cols, axis=1)
    g = g * problem.epsilon
    if problem.flux is not None:
        fd = dual_flux(u, problem.flux, problem.beta, problem.gamma, problem.mean_channel)
        g = g + ad.matmul(d0.T, fd)
    if problem.load is not None:
        g = g - problem.load
    return g[: problem.p_free]


def all_partition_divergence(u_free, problem: ReducedProblem) -> np.ndarray:
    """``d0^T Fd`` over every partition (free and fixed), ``(P_total, F)``."""
    t = Tape()
    u = t.const(full_state(np.asarray(u_free, dtype=np.float64), problem))
    _, d0 = complete_graph(problem.p_total)
    fd = dual_flux(u, problem.flux, problem.beta, problem.gamma, problem.mean_channel)
    return d0.T @ fd.value


def residual(u_free: np.ndarray, problem: ReducedProblem) -> np.ndarray:
    t = Tape()
    u = t.const(np.asarray(u_free, dtype=np.float64).reshape(problem.p_free, problem.n_fields))
    return residual_graph(u, problem).value.copy()


def residual_and_jacobian(u_free: np.ndarray, problem: ReducedProblem) -> tuple[np.ndarray, np.ndarray]:
    """Residual (flattened row-major) and its exact Jacobian, one reverse pass per row."""
    t = Tape()
    u = t.leaf(np.asarray(u_free, dtype=np.float64).reshape(problem.p_free, problem.n_fields))
    g = residual_graph(u, problem)
    n = problem.n_unknowns
    jac = np.empty((n, n))
    seed = np.zeros(g.shape)
    flat = seed.reshape(-1)
    for r in range(n):
        flat[r] = 1.0
        (row,) = t.backward(g, seed=seed, wrt=[u])
        jac[r] = row.reshape(-1)
        flat[r] = 0.0
    return g.value.reshape(-1).copy(), jac


def jacobian(u_free: np.ndarray, problem: ReducedProblem) -> np.ndarray:
    return residual_and_jacobian(u_free, problem)[1]


def _newton(problem: ReducedProblem, cfg: SolveConfig, u0: np.ndarray) -> SolveResult:
    u = u0.reshape(-1).copy()
    shape = (problem.p_free, problem.n_fields)
    history = []
    g, jac = residual_and_jacobian(u.reshape(shape), problem)
    rnorm = float(np.linalg.norm(g))
    for it in range(cfg.max_iter + 1):
        history.append(rnorm)
        if not np.isfinite(rnorm):
            return SolveResult(u.reshape(shape), False, it, rnorm, history=history)
        if rnorm <= cfg.tol:
            return SolveResult(u.reshape(shape), True, it, rnorm, history=history)
        if it == cfg.max_iter:
            break
        try:
            with np.errstate(divide="ignore", invalid="ignore"):
                step = sla.solve(jac, g, check_finite=True)
            if not np.all(np.isfinite(step)):
                raise sla.LinAlgError("non-finite Newton step")
        except (sla.LinAlgError, ValueError):
            log.debug("singular Jacobian at iteration %d", it)
            return SolveResult(u.reshape(shape), False, it, rnorm, history=history)
        t = 1.0
        u_new = u - step
        g_new, jac_new = residual_and_jacobian(u_new.reshape(shape), problem)
        r_new = float(np.linalg.norm(g_new))
        if cfg.line_search:
            halvings = 0
            while not (r_new < rnorm) and halvings < cfg.max_halvings:
                t *= 0.5
                halvings += 1
                u_new = u - t * step
                g_new, jac_new = residual_and_jacobian(u_new.reshape(shape), problem)
                r_new = float(np.linalg.norm(g_new))
        u, g, jac, rnorm = u_new, g_new, jac_new, r_new
    return SolveResult(u.reshape(shape), False, cfg.max_iter, rnorm, history=history)


def newton_solve(problem: ReducedProblem, cfg: SolveConfig = SolveConfig(),
                 rng: np.random.Generator | None = None, u0: np.ndarray | None = None) -> SolveResult:
    """Newton iteration from ``u0`` (default: standard normal draw from ``rng``).

    On failure the solve is retried ``cfg.retries`` times from fresh draws.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    shape = (problem.p_free, problem.n_fields)
    result = None
    for attempt in range(cfg.retries + 1):
        start = rng.standard_normal(shape) if (u0 is None or attempt > 0) else np.asarray(u0, dtype=np.float64)
        result = _newton(problem, cfg, start.reshape(shape))
        result.attempts = attempt + 1
        if result.converged:
            return result
        log.info("Newton failed (attempt %d, |G|=%.3e after %d iterations)",
                 attempt + 1, result.residual_norm, result.iterations)
    return result


def adjoint_multiplier(u_star: np.ndarray, loss_grad_u: np.ndarray, problem: ReducedProblem) -> np.ndarray:
    """Solve ``J(u*)^T lam = dL/du*``; returns ``lam`` shaped like ``u*``."""
    jac = jacobian(u_star, problem)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = sla.solve(jac.T, np.asarray(loss_grad_u, dtype=np.float64).reshape(-1))
    except (sla.LinAlgError, ValueError) as exc:
        raise SolverError("transposed Jacobian is singular at the solution") from exc
    if not np.all(np.isfinite(lam)):
        raise SolverError("transposed Jacobian is singular at the solution")
    return lam.reshape(problem.p_free, problem.n_fields)


def adjoint_gradient(u_star: np.ndarray, loss_grad_u: np.ndarray, problem: ReducedProblem,
                     build, explicit=None):
    """Parameter gradient of a loss through the implicit solution.

    ``build(tape, u_star)`` must return ``(leaves, G)`` where ``leaves`` are
    the parameter variables and ``G`` the residual graph at the fixed
    ``u_star``.  ``explicit(tape, leaves)`` optionally returns a scalar with
    the direct parameter dependence of the loss.  Both parts are swept in one
    reverse pass: ``dL/dtheta = dL_explicit/dtheta - lam^T dG/dtheta``.
    """
    lam = adjoint_multiplier(u_star, loss_grad_u, problem)
    tape = Tape()
    leaves, g = build(tape, u_star)
    total = ad.sum(g * (-lam))
    if explicit is not None:
        total = total + explicit(tape, leaves)
    return tape.backward(total, wrt=leaves)


# ------------------------------------------------------------------ batches


@dataclass
class BatchReport:
    results: list
    accepted: bool
    fraction: float

    @property
    def converged_mask(self) -> np.ndarray:
        return np.array([r.converged for r in self.results], dtype=bool)

    @property
    def mean_iterations(self) -> float:
        its = [r.iterations for r in self.results if r.converged]
        return float(np.mean(its)) if its else float("nan")


def accept_batch(converged, threshold: float = 0.8) -> tuple[bool, float]:
    """A batch is accepted when at least ``threshold`` of its solves converged."""
    flags = np.asarray(converged, dtype=bool)
    if flags.size == 0:
        return False, 0.0
    frac = float(flags.mean())
    return frac >= threshold, frac


def solve_batch(problems, cfg: SolveConfig = SolveConfig(), rng: np.random.Generator | None = None,
                solve=newton_solve) -> BatchReport:
    """Independent solves in a fixed order; ``solve`` is injectable for testing."""
    rng = np.random.default_rng(0) if rng is None else rng
    results = [solve(p, cfg, rng) for p in problems]
    accepted, frac = accept_batch([r.converged for r in results], cfg.threshold)
    return BatchReport(results, accepted, frac)


def with_tol(cfg: SolveConfig, tol: float) -> SolveConfig:
    return replace(cfg, tol=tol)
