"""Free and complete parametrization of square LTI systems with a given L2 bound.

``psi_matrices`` maps unconstrained parameters to ``(A, B, C, D, P)`` where
``P`` certifies the bound through the bounded-real inequality.  It is written
with ``jax.numpy`` so the training code can differentiate through it;
``psi_gamma`` is the checked, numpy-facing entry point.
"""

from dataclasses import dataclass, fields
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular

from .errors import DegenerateParameters
from .lti import GainCertificate, LtiSystem
from .numerics import spectral_norm_diff

__all__ = [
    "PsiFreeParams",
    "PsiIntermediates",
    "cayley",
    "psi_intermediates",
    "psi_matrices",
    "psi_gamma",
    "init_long_memory",
    "random_psi_params",
    "long_memory_modulus",
]

DEFAULT_EPS = -30.0
H12_COND_LIMIT = 1e12


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class PsiFreeParams:
    alpha: jax.Array
    eps: jax.Array
    X11: jax.Array
    X21: jax.Array
    X22: jax.Array
    Ctil: jax.Array
    Dtil: jax.Array
    S: jax.Array

    @property
    def n(self):
        return np.shape(self.S)[0]

    def to_dict(self):
        return {f.name: np.asarray(getattr(self, f.name)).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: np.asarray(d[f.name], dtype=float) for f in fields(cls)})


class PsiIntermediates(NamedTuple):
    Q: jax.Array
    Z: jax.Array
    beta: jax.Array
    H11: jax.Array
    H12: jax.Array
    V: jax.Array
    R: jax.Array


def cayley(S):
    """Special orthogonal ``(I - K)(I + K)^{-1}`` with ``K = S - S.T``."""
    S = jnp.asarray(S)
    K = S - S.T
    eye = jnp.eye(S.shape[0], dtype=S.dtype)
    # (I - K)(I + K)^{-1} = ((I + K)^{-T} (I - K)^T)^T and (I + K)^T = I - K.
    return jnp.linalg.solve(eye - K, eye + K).T


def _sym(M):
    return 0.5 * (M + M.T)


def psi_intermediates(params, gamma):
    """Orthogonal factor, rescaled Gram matrix and the blocks of ``H``."""
    p = params
    n = p.S.shape[0]
    eye = jnp.eye(n)
    e_eps = jnp.exp(p.eps)
    Q = cayley(p.S)
    # D~^T D~ (not D~ D~^T) is what makes the (2,2) block of H equal beta*Z.
    Z = _sym(p.X21 @ p.X21.T + p.X22 @ p.X22.T + p.Dtil.T @ p.Dtil + e_eps * eye)
    beta = gamma**2 * jax.nn.sigmoid(p.alpha) / spectral_norm_diff(Z)
    H11 = _sym(p.X11 @ p.X11.T + p.Ctil.T @ p.Ctil + beta * e_eps * eye)
    H12 = jnp.sqrt(beta) * (p.X11 @ p.X21.T + p.Ctil.T @ p.Dtil)
    V = _sym(beta * Z - gamma**2 * eye)
    R = _sym(H12 @ jnp.linalg.solve(V.T, H12.T))
    return PsiIntermediates(Q, Z, beta, H11, H12, V, R)


def psi_matrices(params, gamma):
    """``(A, B, C, D, P)`` as JAX arrays; traceable, no validity checks."""
    Q, Z, beta, H11, H12, V, R = psi_intermediates(params, gamma)
    L_R = jnp.linalg.cholesky(-R)
    L_RH = jnp.linalg.cholesky(_sym(H11 - R))
    A = solve_triangular(L_RH.T, Q @ L_R.T, lower=False)
    B = A @ jnp.linalg.solve(H12.T, V.T)
    C = params.Ctil
    D = params.Dtil * jnp.sqrt(beta)
    AinvT_H12 = jnp.linalg.solve(A.T, H12)
    P = _sym(-jnp.linalg.solve(B.T, AinvT_H12.T).T)
    return A, B, C, D, P


_intermediates_jit = jax.jit(psi_intermediates)
_matrices_jit = jax.jit(psi_matrices)


def psi_gamma(params, gamma):
    """Build a square system with L2 bound ``gamma`` and its certificate.

    Raises
    ------
    DegenerateParameters
        If ``H12`` is numerically singular or the factorizations break down.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    params = jax.tree_util.tree_map(jnp.asarray, params)
    gamma_arr = jnp.asarray(gamma, dtype=jnp.float64)
    inter = _intermediates_jit(params, gamma_arr)
    cond = np.linalg.cond(np.asarray(inter.H12))
    if not np.isfinite(cond) or cond > H12_COND_LIMIT:
        raise DegenerateParameters(f"H12 is singular (condition {cond:.3g})")
    A, B, C, D, P = (np.asarray(M) for M in _matrices_jit(params, gamma_arr))
    if not all(np.all(np.isfinite(M)) for M in (A, B, C, D, P)):
        raise DegenerateParameters("construction produced non-finite matrices")
    return LtiSystem(A, B, C, D), GainCertificate(P, float(gamma))


def long_memory_modulus(alpha):
    """Eigenvalue modulus of ``A`` under :func:`init_long_memory`."""
    s = 1.0 / (1.0 + np.exp(-alpha))
    return float(np.sqrt(2.0 * s / (3.0 - s)))


def init_long_memory(alpha, S, eps=DEFAULT_EPS):
    """Parameters whose ``A`` is a scaled rotation with prescribed eigenvalue modulus.

    All of ``X11, X21, X22, Ctil, Dtil`` are the identity, so as ``eps`` goes
    to minus infinity ``A`` tends to ``long_memory_modulus(alpha) * cayley(S)``,
    independently of ``gamma``.
    """
    S = np.asarray(S, dtype=float)
    eye = np.eye(S.shape[0])
    return PsiFreeParams(alpha=np.float64(alpha), eps=np.float64(eps), X11=eye.copy(),
                         X21=eye.copy(), X22=eye.copy(), Ctil=eye.copy(),
                         Dtil=eye.copy(), S=S)


def random_psi_params(n, rng, scale=1.0):
    """Entries, ``alpha`` and ``eps`` drawn i.i.d. from ``N(0, scale^2)``."""
    draw = lambda *shape: scale * rng.standard_normal(shape)  # noqa: E731
    return PsiFreeParams(alpha=np.float64(draw()), eps=np.float64(draw()),
                         X11=draw(n, n), X21=draw(n, n), X22=draw(n, n),
                         Ctil=draw(n, n), Dtil=draw(n, n), S=draw(n, n))
