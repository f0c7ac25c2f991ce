"""Small dense linear-algebra kernel.

Matrices are plain 2-D float64 ``numpy`` arrays.  Everything here is pure:
inputs are never modified in place.

The module also carries :func:`spectral_norm_diff`, a JAX-differentiable
largest-singular-value function used by the parametrizations during
training.
"""

import warnings
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
import scipy.linalg as sla

from .errors import (ConvergenceError, DimensionError, NotPositiveDefinite,
                     Singular, SymmetryError)

__all__ = [
    "SymEigSummary",
    "as_matrix",
    "sym_eig_extremes",
    "cholesky",
    "spectral_norm",
    "solve",
    "spectral_norm_diff",
]

SYMMETRY_TOL = 1e-9
SINGULAR_TOL = 1e-14


@dataclass(frozen=True)
class SymEigSummary:
    lambda_min: float
    lambda_max: float


def as_matrix(M, name="matrix"):
    """Return ``M`` as a finite 2-D float64 array (scalars and vectors promoted)."""
    M = np.array(M, dtype=float)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    elif M.ndim == 1:
        M = M.reshape(-1, 1)
    if M.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


def _require_square(M, name):
    if M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")


def _symmetrized(M, tol):
    _require_square(M, "M")
    scale = max(np.linalg.norm(M, 2), 1.0) if M.size else 1.0
    if np.max(np.abs(M - M.T), initial=0.0) > tol * scale:
        raise SymmetryError("matrix is not symmetric within tolerance")
    return 0.5 * (M + M.T)


def sym_eig_extremes(M, tol=SYMMETRY_TOL):
    """Smallest and largest eigenvalue of a symmetric matrix.

    The matrix is symmetrized as ``(M + M.T) / 2`` after the symmetry check.
    """
    M = _symmetrized(as_matrix(M), tol)
    w = np.linalg.eigvalsh(M)
    return SymEigSummary(float(w[0]), float(w[-1]))


def cholesky(M):
    """Lower-triangular ``L`` with ``M = L @ L.T``.

    Raises
    ------
    NotPositiveDefinite
        If a pivot is not strictly positive.
    """
    M = _symmetrized(as_matrix(M), SYMMETRY_TOL)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.diag(L) > 0):
        raise NotPositiveDefinite("non-positive pivot")
    return L


_RESTART_BLOCK = 4


def spectral_norm(M, tol=1e-10, max_iters=10_000, seed=0):
    """Largest singular value by power iteration on ``M.T @ M``.

    Starts from the normalized all-ones vector (a seeded random vector if that
    start is annihilated).  Convergence requires the eigen-residual
    ``||G v - rho v|| <= tol * rho``.  If the iteration stagnates for
    ``max_iters // 4`` steps, which happens when the top singular values are
    nearly tied, it restarts as a block iteration with Rayleigh-Ritz
    extraction on the current vector plus seeded random vectors.
    """
    M = as_matrix(M)
    if M.size == 0:
        return 0.0
    G = M.T @ M
    g_scale = np.linalg.norm(G)
    if g_scale == 0.0:
        return 0.0
    n = G.shape[0]
    rng = np.random.default_rng(seed)

    v = np.ones(n) / np.sqrt(n)
    if np.linalg.norm(G @ v) <= 1e-12 * g_scale:
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)

    stall = max(max_iters // 4, 1)
    rho = 0.0
    for _ in range(stall):
        w = G @ v
        rho = float(v @ w)
        if np.linalg.norm(w - rho * v) <= tol * abs(rho):
            return float(np.sqrt(max(rho, 0.0)))
        v = w / np.linalg.norm(w)

    block = min(n, _RESTART_BLOCK)
    V, _ = np.linalg.qr(np.column_stack([v, rng.standard_normal((n, block - 1))]))
    for _ in range(max_iters - stall):
        W = G @ V
        theta, Y = np.linalg.eigh(V.T @ W)
        rho = float(theta[-1])
        x = V @ Y[:, -1]
        if np.linalg.norm(G @ x - rho * x) <= tol * abs(rho):
            return float(np.sqrt(max(rho, 0.0)))
        V, _ = np.linalg.qr(W)
    raise ConvergenceError("power iteration did not converge",
                           last=float(np.sqrt(max(rho, 0.0))))


def solve(M, rhs):
    """Solve ``M X = rhs`` by LU with partial pivoting.

    Raises
    ------
    Singular
        If a pivot falls below ``1e-14 * ||M||``.
    """
    M = as_matrix(M, "M")
    rhs = as_matrix(rhs, "rhs")
    _require_square(M, "M")
    if rhs.shape[0] != M.shape[0]:
        raise DimensionError("rhs rows must match M")
    scale = np.linalg.norm(M, np.inf)
    if scale == 0:
        raise Singular("matrix is zero")
    with warnings.catch_warnings():
        # exact zero pivots are reported below as Singular
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(M, check_finite=False)
    if np.min(np.abs(np.diag(lu))) <= SINGULAR_TOL * scale:
        raise Singular("matrix is numerically singular")
    return sla.lu_solve((lu, piv), rhs, check_finite=False)


@jax.custom_jvp
def spectral_norm_diff(M):
    """Largest singular value, differentiable in JAX.

    The tangent is ``u1.T @ dM @ v1`` with the top singular pair, which stays
    finite when the top singular value is repeated (a valid subgradient).
    """
    return jnp.linalg.svd(M, compute_uv=False)[0]


@spectral_norm_diff.defjvp
def _spectral_norm_diff_jvp(primals, tangents):
    (M,), (dM,) = primals, tangents
    U, s, Vt = jnp.linalg.svd(M, full_matrices=False)
    u, v = U[:, 0], Vt[0]
    return s[0], u @ dM @ v
