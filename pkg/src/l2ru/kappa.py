"""Free parametrization of general (non-square) LTI systems with a given L2 bound.

The state matrix is block-diagonal: each eigenvalue ``exp(-exp(mu) + i exp(theta))``
is realized together with its conjugate as a real 2x2 rotation-scaling block,
so all matrices stay real and the state recursion can be evaluated by a
parallel scan.  With an odd state dimension the last block is a real 1x1
block holding the modulus.

The input/output matrices come from a masked free matrix, rescaled so that
the off-diagonal blocks of the four-block bounded-real matrix are dominated
by its diagonal blocks.  Every constructed system is re-verified; if the
check fails the off-diagonal block is halved until it passes.
"""

import logging
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConstructionError
from .lti import GainCertificate, LtiSystem, bounded_real_check_strict
from .numerics import spectral_norm_diff

__all__ = [
    "KappaFreeParams",
    "EigenInitRanges",
    "KappaConstruction",
    "sample_eigen_params",
    "realify",
    "kappa_matrices",
    "kappa_construct",
    "kappa_gamma",
    "random_kappa_params",
]

log = logging.getLogger(__name__)

MAX_SHRINKS = 60


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class KappaFreeParams:
    mu: jax.Array
    theta: jax.Array
    Dtil: jax.Array
    Ybar: jax.Array
    eps: float = field(default=1e-3, metadata=dict(static=True))
    eps_margin: float = field(default=1e-6, metadata=dict(static=True))

    @property
    def n_h(self):
        return np.shape(self.Ybar)[0] // 2

    @property
    def n_d(self):
        return np.shape(self.Dtil)[1]

    @property
    def n_z(self):
        return np.shape(self.Dtil)[0]

    def __post_init__(self):
        if isinstance(self.Ybar, jax.core.Tracer):
            return
        n_h = np.shape(self.Ybar)[0]
        if n_h % 2:
            raise ValueError("Ybar must have 2*n_h rows")
        if np.shape(self.Ybar)[1] != self.n_d + self.n_z:
            raise ValueError("Ybar must have n_d + n_z columns")
        if np.shape(self.mu) != ((n_h // 2 + 1) // 2,) or np.shape(self.theta) != np.shape(self.mu):
            raise ValueError("mu and theta need ceil(n_h / 2) entries")
        if not (self.eps > 0 and self.eps_margin > 0):
            raise ValueError("eps and eps_margin must be positive")

    def to_dict(self):
        d = {f.name: np.asarray(getattr(self, f.name)).tolist() for f in fields(self)}
        d["eps"], d["eps_margin"] = float(self.eps), float(self.eps_margin)
        return d

    @classmethod
    def from_dict(cls, d):
        arrays = {k: np.asarray(d[k], dtype=float) for k in ("mu", "theta", "Dtil", "Ybar")}
        arrays["Dtil"] = arrays["Dtil"].reshape(np.shape(d["Dtil"]))
        return cls(**arrays, eps=float(d["eps"]), eps_margin=float(d["eps_margin"]))


@dataclass(frozen=True)
class EigenInitRanges:
    r_min: float = 0.0
    r_max: float = 0.99
    phase_min: float = 0.0
    phase_max: float = np.pi

    def __post_init__(self):
        if not (0.0 <= self.r_min <= self.r_max < 1.0):
            raise ValueError("need 0 <= r_min <= r_max < 1")
        if not (0.0 <= self.phase_min <= self.phase_max <= np.pi):
            raise ValueError("need 0 <= phase_min <= phase_max <= pi")


# Keeps log(-log r) and log(phase) finite at the closed ends of the ranges.
_TINY = 1e-300


def sample_eigen_params(ranges, n_half, seed=None):
    """Draw ``(mu, theta)`` for ``n_half`` eigenvalues within ``ranges``.

    ``mu`` is uniform on ``[log(-log r_max), log(-log r_min)]``; the realized
    phase ``exp(theta)`` is uniform on ``[phase_min, phase_max]``.
    """
    rng = np.random.default_rng(seed)
    mu_lo = np.log(-np.log(ranges.r_max)) if ranges.r_max > 0 else np.log(-np.log(_TINY))
    mu_hi = np.log(-np.log(max(ranges.r_min, _TINY)))
    mu = rng.uniform(mu_lo, mu_hi, n_half) if mu_hi > mu_lo else np.full(n_half, mu_lo)
    phase = rng.uniform(ranges.phase_min, ranges.phase_max, n_half)
    theta = np.log(np.maximum(phase, 1e-12))
    return mu, theta


def realify(mu, theta, n_h=None):
    """Real block-diagonal matrix with 2x2 blocks ``r [[cos, -sin], [sin, cos]]``.

    ``r = exp(-exp(mu))`` and the angle is ``exp(theta)``.  With odd ``n_h``
    the last block is the 1x1 matrix ``[r]``.
    """
    mu, theta = jnp.asarray(mu), jnp.asarray(theta)
    nb = mu.shape[0]
    if n_h is None:
        n_h = 2 * nb
    if (n_h + 1) // 2 != nb:
        raise ValueError("n_h is inconsistent with the number of eigenvalue parameters")
    r = jnp.exp(-jnp.exp(mu))
    phi = jnp.exp(theta)
    c, s = r * jnp.cos(phi), r * jnp.sin(phi)
    blocks = jnp.stack([jnp.stack([c, -s], -1), jnp.stack([s, c], -1)], -2)
    A = jax.scipy.linalg.block_diag(*blocks) if nb else jnp.zeros((0, 0))
    return A[:n_h, :n_h].at[n_h - 1, n_h - 1].set(r[-1]) if n_h % 2 else A


def _mask(n_h, n_d, n_z):
    M = np.zeros((2 * n_h, n_d + n_z))
    M[:n_h, :n_d] = 1.0
    M[n_h:, n_d:] = 1.0
    return M


class _KappaArrays(NamedTuple):
    A: jax.Array
    B: jax.Array
    C: jax.Array
    D: jax.Array
    P6: jax.Array
    eta: jax.Array


def kappa_matrices(params, gamma, shrink=1.0):
    """Traceable construction; ``P6`` certifies the four-block inequality.

    ``shrink`` scales the normalized off-diagonal block (1 for the plain map).
    """
    p = params
    n_h, n_d, n_z = p.n_h, p.n_d, p.n_z
    A = realify(p.mu, p.theta, n_h)
    r2 = jnp.sum(A * A, axis=0)  # A^T A is diagonal for this block structure
    P6 = jnp.diag(r2 + p.eps)
    d_norm = spectral_norm_diff(p.Dtil) if p.Dtil.size else 0.0
    D = gamma / (d_norm + p.eps) * p.Dtil
    Ytil = _mask(n_h, n_d, n_z) * p.Ybar
    W = jnp.block([[P6, P6 @ A], [A.T @ P6, P6]])
    G22 = jnp.block([[gamma * jnp.eye(n_d), D.T], [D, gamma * jnp.eye(n_z)]])
    left = spectral_norm_diff(jnp.linalg.solve(W, Ytil))
    right = spectral_norm_diff(jnp.linalg.solve(G22.T, Ytil.T).T)
    eta = jnp.maximum(1.0, (1.0 + p.eps_margin) * jnp.maximum(left, right))
    Y = shrink * Ytil / eta
    B = jnp.linalg.solve(P6, Y[:n_h, :n_d])
    C = Y[n_h:, n_d:].T
    return _KappaArrays(A, B, C, D, P6, eta)


@dataclass(frozen=True, eq=False)
class KappaConstruction:
    system: LtiSystem
    certificate: GainCertificate
    P6: np.ndarray
    eta: float
    shrinks: int


def kappa_construct(params, gamma):
    """Construct, verify, and if needed shrink the off-diagonal block."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    params = jax.tree_util.tree_map(jnp.asarray, params)
    shrink = 1.0
    for k in range(MAX_SHRINKS + 1):
        A, B, C, D, P6, eta = (np.asarray(x) for x in kappa_matrices(params, gamma, shrink))
        sys = LtiSystem(A, B, C, D)
        P = gamma * P6
        if bounded_real_check_strict(sys, P, gamma, margin=0.0):
            if k:
                log.info("kappa construction needed %d shrink step(s)", k)
            return KappaConstruction(sys, GainCertificate(P, float(gamma)), P6, float(eta), k)
        shrink *= 0.5
    raise ConstructionError("four-block inequality still violated after shrinking")


def kappa_gamma(params, gamma):
    """Build a system with L2 bound ``gamma`` and its certificate."""
    out = kappa_construct(params, gamma)
    return out.system, out.certificate


def random_kappa_params(n_h, n_d, n_z, rng, ranges=None, scale=1.0, eps=1e-3):
    """Eigenvalues from ``ranges`` (default: whole unit disc), Gaussian ``Dtil`` and ``Ybar``."""
    ranges = ranges or EigenInitRanges()
    mu, theta = sample_eigen_params(ranges, (n_h + 1) // 2, rng)
    return KappaFreeParams(mu=mu, theta=theta,
                           Dtil=scale * rng.standard_normal((n_z, n_d)),
                           Ybar=scale * rng.standard_normal((2 * n_h, n_d + n_z)), eps=eps)
