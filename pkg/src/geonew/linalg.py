"""Dense and sparse linear-algebra kernels shared by the rest of the package.

Dense matrices are plain float64 ``numpy`` arrays; sparse matrices are
``scipy.sparse.csr_matrix`` with sorted indices.  Everything here is a pure
function of its inputs.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sp


class LinAlgError(ValueError):
    """Raised when a matrix violates the structural precondition of a kernel."""


def as_csr(a) -> sp.csr_matrix:
    """Convert to canonical CSR (sorted column indices, duplicates summed)."""
    m = sp.csr_matrix(a, dtype=np.float64)
    m.sum_duplicates()
    m.sort_indices()
    if not np.all(np.isfinite(m.data)):
        raise LinAlgError("sparse matrix has non-finite values")
    return m


def _check_symmetric(a: np.ndarray, name: str = "matrix") -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LinAlgError(f"{name} must be square, got shape {a.shape}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > 1e-12 * max(scale, np.finfo(float).tiny):
        raise LinAlgError(f"{name} is not symmetric (max |A - A^T| = {asym:.3e}, max |A| = {scale:.3e})")


def sym_eig(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix, eigenvalues ascending.

    Returns ``(lam, v)`` with ``a @ v == v * lam`` and orthonormal ``v``.
    """
    a = np.asarray(a, dtype=np.float64)
    _check_symmetric(a)
    a = 0.5 * (a + a.T)
    lam, v = np.linalg.eigh(a)
    norm = np.linalg.norm(a, 2) if a.size else 0.0
    res = np.max(np.abs(a @ v - v * lam)) if a.size else 0.0
    if not np.isfinite(res) or res > 1e-10 * max(norm, 1.0):
        raise LinAlgError(f"eigensolve did not converge for {a.shape[0]}x{a.shape[0]} matrix (residual {res:.3e})")
    return lam, v


def cholesky(m) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`LinAlgError` if ``m`` is not SPD."""
    m = np.asarray(m, dtype=np.float64)
    _check_symmetric(m, "mass matrix")
    try:
        return scipy.linalg.cholesky(m, lower=True)
    except np.linalg.LinAlgError as exc:
        raise LinAlgError(f"matrix of size {m.shape[0]} is not SPD: {exc}") from None


def generalized_sym_eig(k, m) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``k phi = lam m phi`` for symmetric ``k`` and SPD ``m``.

    Reduced to standard form through ``m = L L^T``; the returned eigenvectors
    are ``m``-orthonormal.
    """
    k = np.asarray(k, dtype=np.float64)
    _check_symmetric(k, "stiffness matrix")
    ell = cholesky(m)
    # C = L^{-1} K L^{-T}
    tmp = scipy.linalg.solve_triangular(ell, k, lower=True)
    c = scipy.linalg.solve_triangular(ell, tmp.T, lower=True).T
    lam, y = sym_eig(0.5 * (c + c.T))
    phi = scipy.linalg.solve_triangular(ell.T, y, lower=False)
    return lam, phi


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a x = b`` for SPD ``a`` by Cholesky factorization."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise LinAlgError(f"shape mismatch: A is {a.shape}, b is {b.shape}")
    ell = cholesky(a)
    return scipy.linalg.cho_solve((ell, True), b)


def op_norm_2(a, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``a^T a``.

    The start vector comes from a fixed-seed generator so repeated calls are
    bit-identical.
    """
    if sp.issparse(a):
        a = a.tocsr()
    else:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 1:
            a = a[:, None]
    n = a.shape[1]
    if n == 0 or a.shape[0] == 0:
        return 0.0
    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.linalg.norm(x)
    prev = 0.0
    for _ in range(max_iter):
        y = a.T @ (a @ x)
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            return 0.0
        x = y / lam
        if abs(lam - prev) <= tol * lam:
            break
        prev = lam
    # Rayleigh quotient with the converged direction is a lower bound that
    # converges quadratically; refine with one more product.
    ax = a @ x
    return float(np.sqrt(max(float(ax @ ax), lam)))
