"""Discrete-time LTI systems: simulation, bounded-real checks and gain estimates.

Trajectories are arrays of shape ``(T, dim)``; a 1-D array is read as a
single-channel trajectory.
"""

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import DimensionError, StructureError, Unstable
from .numerics import as_matrix, sym_eig_extremes

__all__ = [
    "LtiSystem",
    "GainCertificate",
    "HinfResult",
    "as_trajectory",
    "simulate_recursive",
    "simulate_scan",
    "block_structure",
    "bounded_real_matrix",
    "bounded_real_residual",
    "bounded_real_check_strict",
    "hinf_norm",
    "hinf_norm_report",
    "lmi_feasible",
    "lmi_gain",
    "trajectory_gain_ratio",
    "spectral_radius",
]

LMI_MARGIN = 1e-9


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """State-space matrices of ``h+ = A h + B d``, ``z = C h + D d``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A, B = as_matrix(self.A, "A"), as_matrix(self.B, "B")
        C, D = as_matrix(self.C, "C"), as_matrix(self.D, "D")
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape[0] != n or C.shape[1] != n:
            raise DimensionError("B rows and C columns must match A")
        if D.shape != (C.shape[0], B.shape[1]):
            raise DimensionError(f"D must be {(C.shape[0], B.shape[1])}, got {D.shape}")
        for name, M in zip("ABCD", (A, B, C, D)):
            M.setflags(write=False)
            object.__setattr__(self, name, M)

    @property
    def n_h(self):
        return self.A.shape[0]

    @property
    def n_d(self):
        return self.B.shape[1]

    @property
    def n_z(self):
        return self.C.shape[0]

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in "ABCD"}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.array(d[k], dtype=float) for k in "ABCD"))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class GainCertificate:
    """Storage matrix ``P`` proving the L2 bound ``gamma``.

    ``P`` follows the two-block convention, i.e. it makes
    :func:`bounded_real_residual` negative.
    """

    P: np.ndarray
    gamma: float

    def to_dict(self):
        return {"P": np.asarray(self.P).tolist(), "gamma": float(self.gamma)}


def as_trajectory(u, dim=None, name="trajectory"):
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.ndim != 2:
        raise DimensionError(f"{name} must have shape (T, dim), got {u.shape}")
    if dim is not None and u.shape[1] != dim:
        raise DimensionError(f"{name} has dim {u.shape[1]}, expected {dim}")
    return u


def _initial_state(sys, h0):
    if h0 is None:
        return np.zeros(sys.n_h)
    h0 = np.asarray(h0, dtype=float).reshape(-1)
    if h0.shape != (sys.n_h,):
        raise DimensionError(f"h0 must have size {sys.n_h}")
    return h0


def simulate_recursive(sys, u, h0=None):
    """Output trajectory by direct state recursion."""
    u = as_trajectory(u, sys.n_d, "u")
    h = _initial_state(sys, h0)
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    z = np.empty((u.shape[0], sys.n_z))
    for k, uk in enumerate(u):
        z[k] = C @ h + D @ uk
        h = A @ h + B @ uk
    return z


def block_structure(A, tol=0.0):
    """Sizes of the diagonal blocks of a 1x1/2x2 block-diagonal matrix.

    Raises ``StructureError`` if ``A`` has entries outside such blocks.
    """
    A = as_matrix(A)
    n = A.shape[0]
    sizes, i = [], 0
    while i < n:
        if i + 1 < n and (abs(A[i + 1, i]) > tol or abs(A[i, i + 1]) > tol):
            sizes.append(2)
            i += 2
        else:
            sizes.append(1)
            i += 1
    mask = np.zeros_like(A, dtype=bool)
    i = 0
    for s in sizes:
        mask[i:i + s, i:i + s] = True
        i += s
    if np.any(np.abs(A[~mask]) > tol):
        raise StructureError("A is not block-diagonal with 1x1/2x2 blocks")
    return sizes


def _blocks_as_2x2(A, sizes):
    """Embed each block in a 2x2 slot; returns (m, 2, 2) and a state index map."""
    m = len(sizes)
    Ab = np.zeros((m, 2, 2))
    index = np.full((m, 2), -1)
    i = 0
    for j, s in enumerate(sizes):
        Ab[j, :s, :s] = A[i:i + s, i:i + s]
        index[j, :s] = np.arange(i, i + s)
        i += s
    return Ab, index


def _inclusive_scan(M, x):
    """Hillis-Steele scan of affine maps ``h -> M h + x`` along axis 0.

    ``M`` has shape (T, m, 2, 2), ``x`` (T, m, 2).  Element ``k`` of the
    result is the composition of maps ``0..k`` (applied in order).
    """
    M, x = M.copy(), x.copy()
    T = M.shape[0]
    step = 1
    while step < T:
        M_prev, x_prev = M[:-step], x[:-step]
        M_cur, x_cur = M[step:], x[step:]
        x_new = (M_cur @ x_prev[..., None])[..., 0] + x_cur
        M_new = M_cur @ M_prev
        M[step:], x[step:] = M_new, x_new
        step *= 2
    return M, x


def simulate_scan(sys, u, h0=None, workers=4):
    """Output trajectory by a chunked associative scan.

    Requires ``A`` block-diagonal with 1x1 and 2x2 blocks.  The sequence is
    split into ``workers`` chunks scanned concurrently; chunk carries are then
    propagated sequentially and applied in a second concurrent pass.
    """
    u = as_trajectory(u, sys.n_d, "u")
    h0 = _initial_state(sys, h0)
    T = u.shape[0]
    if T == 0:
        return np.empty((0, sys.n_z))
    sizes = block_structure(sys.A)
    Ab, index = _blocks_as_2x2(sys.A, sizes)
    m = len(sizes)
    valid = index >= 0

    bu = u @ sys.B.T
    x = np.zeros((T, m, 2))
    x[:, valid] = bu[:, index[valid]]
    h0b = np.zeros((m, 2))
    h0b[valid] = h0[index[valid]]

    workers = max(1, min(int(workers), T))
    bounds = np.linspace(0, T, workers + 1).astype(int)
    chunks = [(bounds[c], bounds[c + 1]) for c in range(workers) if bounds[c + 1] > bounds[c]]

    def local(chunk):
        a, b = chunk
        M = np.broadcast_to(Ab, (b - a, m, 2, 2))
        return _inclusive_scan(M, x[a:b])

    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        partial = list(pool.map(local, chunks))

    carries, s = [], h0b
    for M, xs in partial:
        carries.append(s)
        s = np.einsum("mij,mj->mi", M[-1], s) + xs[-1]

    def fixup(args):
        (M, xs), carry = args
        return (M @ carry[..., None])[..., 0] + xs

    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        after = np.concatenate(list(pool.map(fixup, zip(partial, carries))))

    # after[k] is the state following input k; shift to get h_k.
    states_b = np.concatenate([h0b[None], after[:-1]])
    h = np.zeros((T, sys.n_h))
    h[:, index[valid]] = states_b[:, valid]
    return h @ sys.C.T + u @ sys.D.T


def _check_gamma(gamma):
    if not gamma > 0:
        raise ValueError("gamma must be positive")


def _check_P(sys, P):
    P = as_matrix(P, "P")
    if P.shape != (sys.n_h, sys.n_h):
        raise DimensionError(f"P must be {(sys.n_h, sys.n_h)}, got {P.shape}")
    return 0.5 * (P + P.T)


def bounded_real_matrix(sys, P, gamma):
    """The symmetric two-block bounded-real matrix (negative definite iff certified)."""
    _check_gamma(gamma)
    P = _check_P(sys, P)
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    top_left = A.T @ P @ A - P + C.T @ C
    top_right = A.T @ P @ B + C.T @ D
    bottom = B.T @ P @ B + D.T @ D - gamma**2 * np.eye(sys.n_d)
    M = np.block([[top_left, top_right], [top_right.T, bottom]])
    return 0.5 * (M + M.T)


def bounded_real_residual(sys, P, gamma):
    """Largest eigenvalue of :func:`bounded_real_matrix`; negative certifies ``gamma``."""
    return sym_eig_extremes(bounded_real_matrix(sys, P, gamma)).lambda_max


def _four_block_matrix(sys, P, gamma):
    # The four-block form certifies with P/gamma what the two-block form
    # certifies with P (Schur complements of the four-block matrix).
    P6 = P / gamma
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    n, m, p = sys.n_h, sys.n_d, sys.n_z
    G = np.zeros((2 * n + m + p,) * 2)
    r1, r2, r3 = n, 2 * n, 2 * n + m
    G[:r1, :r1] = P6
    G[:r1, r1:r2] = P6 @ A
    G[:r1, r2:r3] = P6 @ B
    G[r1:r2, r1:r2] = P6
    G[r1:r2, r3:] = C.T
    G[r2:r3, r2:r3] = gamma * np.eye(m)
    G[r2:r3, r3:] = D.T
    G[r3:, r3:] = gamma * np.eye(p)
    G = np.triu(G)
    return G + np.triu(G, 1).T


def bounded_real_check_strict(sys, P, gamma, margin=LMI_MARGIN):
    """True iff the four-block bounded-real matrix has ``lambda_min > margin``.

    ``P`` is given in the two-block convention (as in :class:`GainCertificate`);
    it is divided by ``gamma`` before assembling the four-block matrix.
    """
    _check_gamma(gamma)
    P = _check_P(sys, P)
    return sym_eig_extremes(_four_block_matrix(sys, P, gamma)).lambda_min > margin


def spectral_radius(A):
    A = as_matrix(A)
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


_MODAL_COND_LIMIT = 1e4


def _modal_form(sys):
    """``(lam, C V, V^{-1} B)`` when the eigenbasis of ``A`` is well conditioned."""
    lam, V = np.linalg.eig(sys.A)
    if not np.all(np.isfinite(V)) or np.linalg.cond(V) > _MODAL_COND_LIMIT:
        return None
    return lam, sys.C @ V, np.linalg.solve(V, sys.B)


def _sigma_max_at(sys, omegas, modal=None):
    omegas = np.asarray(omegas, dtype=float)
    if sys.n_h == 0:
        s = np.linalg.norm(sys.D, 2) if sys.D.size else 0.0
        return np.full(omegas.shape, s)
    z = np.exp(1j * omegas)
    if modal is not None:
        lam, CV, VinvB = modal
        G = (CV * (1.0 / (z[:, None] - lam))[:, None, :]) @ VinvB + sys.D
    else:
        M = z[:, None, None] * np.eye(sys.n_h) - sys.A
        G = sys.C @ np.linalg.solve(M, np.broadcast_to(sys.B, (len(omegas),) + sys.B.shape)) + sys.D
    if G.shape[1] == 0 or G.shape[2] == 0:
        return np.zeros(omegas.shape)
    if min(G.shape[1:]) == 1:
        return np.linalg.norm(G.reshape(len(omegas), -1), axis=1)
    # the top eigenvalue of the smaller Gram matrix is relatively well conditioned
    gram = G @ G.conj().swapaxes(1, 2) if G.shape[1] <= G.shape[2] else G.conj().swapaxes(1, 2) @ G
    return np.sqrt(np.maximum(np.linalg.eigvalsh(gram)[:, -1], 0.0))


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _golden_max(sys, lo, hi, iters=40, modal=None):
    """Vectorized golden-section maximization over several brackets."""
    a, b = lo.copy(), hi.copy()
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = _sigma_max_at(sys, c, modal), _sigma_max_at(sys, d, modal)
    for _ in range(iters):
        left = fc >= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - _GOLDEN * (b - a)
        new_d = a + _GOLDEN * (b - a)
        # Reuse the surviving interior point; evaluate one new point per bracket.
        probe = np.where(left, new_c, new_d)
        fp = _sigma_max_at(sys, probe, modal)
        c, d, fc, fd = (np.where(left, new_c, d), np.where(left, c, new_d),
                        np.where(left, fp, fd), np.where(left, fc, fp))
    return np.maximum(fc, fd)


def _sweep(sys, grid_points=2048, top_k=8):
    grid = np.linspace(0.0, np.pi, grid_points)
    modal = None
    if sys.n_h:
        modal = _modal_form(sys)
        lam = modal[0] if modal is not None else np.linalg.eigvals(sys.A)
        grid = np.unique(np.concatenate([grid, np.abs(np.angle(lam))]))
    vals = _sigma_max_at(sys, grid, modal)
    best = float(vals.max())
    # Local maxima (endpoints included) are refined inside their neighbours' bracket.
    left = np.concatenate([[-np.inf], vals[:-1]])
    right = np.concatenate([vals[1:], [-np.inf]])
    peaks = np.flatnonzero((vals >= left) & (vals >= right))
    peaks = peaks[np.argsort(vals[peaks])[::-1][:top_k]]
    lo = grid[np.maximum(peaks - 1, 0)]
    hi = grid[np.minimum(peaks + 1, len(grid) - 1)]
    return max(best, float(_golden_max(sys, lo, hi, modal=modal).max()))


def lmi_feasible(sys, gamma, reg=1e-10):
    """Search for ``P`` certifying ``gamma``; returns ``P`` or ``None``.

    ``P`` is the stabilizing solution of the bounded-real Riccati equation of
    the system with its output augmented by ``sqrt(reg) * I``, which makes the
    bounded-real matrix strictly negative when ``gamma`` exceeds the gain.
    When rounding swamps that margin (large ``P``, lightly damped poles) the
    augmentation is raised by factors of 100, up to ``1e6 * reg``.
    The candidate is accepted only if :func:`bounded_real_residual` is negative.
    """
    _check_gamma(gamma)
    n, m = sys.n_h, sys.n_d
    if m and np.linalg.norm(sys.D, 2) >= gamma:
        return None
    if n == 0:
        return np.zeros((0, 0))
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    scale = max(1.0, np.linalg.norm(C, 2) ** 2)
    R = D.T @ D - gamma**2 * np.eye(m)
    for k in range(4):
        Q = C.T @ C + reg * 100.0**k * scale * np.eye(n)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                P = sla.solve_discrete_are(A, B, Q, R, s=C.T @ D)
        except (np.linalg.LinAlgError, ValueError):
            return None
        if not np.all(np.isfinite(P)):
            return None
        P = 0.5 * (P + P.T)
        if sym_eig_extremes(P).lambda_min <= 0:
            return None
        if bounded_real_residual(sys, P, gamma) < 0:
            return P
    return None


_TINY_GAIN = 1e-300


def _zero_transfer(sys):
    return not sys.D.any() and (not sys.B.any() or not sys.C.any())


def lmi_gain(sys, tol=1e-8, lo=None, hi=None):
    """L2 gain by bisection on ``gamma`` with :func:`lmi_feasible`.

    Returns the smallest feasible ``gamma`` found, to relative accuracy ``tol``.
    """
    _require_schur(sys)
    if sys.n_d == 0 or sys.n_z == 0 or _zero_transfer(sys):
        return 0.0
    d_norm = np.linalg.norm(sys.D, 2)
    if hi is None:
        hi = max(d_norm, 1e-12) * 2.0 + 1.0
        while lmi_feasible(sys, hi) is None:
            hi *= 2.0
            if hi > 1e15:
                raise Unstable("no feasible gamma found")
    if lo is None:
        lo = d_norm
    lo = max(lo, 0.0)
    while hi - lo > tol * hi and hi > _TINY_GAIN:
        mid = 0.5 * (lo + hi) if lo == 0 else np.sqrt(lo * hi)
        if lmi_feasible(sys, mid) is not None:
            hi = mid
        else:
            lo = mid
    return float(hi)


def _require_schur(sys, slack=1e-9):
    rho = spectral_radius(sys.A)
    if rho >= 1.0 - slack:
        raise Unstable(f"spectral radius {rho:.12g} is not below 1")


@dataclass(frozen=True)
class HinfResult:
    value: float
    sweep: float
    certified: bool
    source: str  # "sweep", "lmi" or "sweep-unverified"


def hinf_norm_report(sys, tol=1e-6, grid_points=2048, validate=True):
    """H-infinity norm with provenance.

    The frequency sweep (dense grid plus golden-section refinement of the
    best local maxima) is a lower bound on the gain.  When ``validate`` is
    set, the bound ``sweep * (1 + tol)`` is confirmed with
    :func:`lmi_feasible`; if that fails, LMI bisection supplies the value.
    """
    _require_schur(sys)
    if sys.n_d == 0 or sys.n_z == 0:
        return HinfResult(0.0, 0.0, True, "sweep")
    sweep = _sweep(sys, grid_points)
    if sweep == 0.0 and grid_points > sys.n_h:
        # a nonzero transfer matrix of McMillan degree n_h has at most n_h zeros
        # per entry on the circle, so vanishing on the grid means it is zero
        return HinfResult(0.0, 0.0, True, "sweep")
    if not validate:
        return HinfResult(sweep, sweep, False, "sweep-unverified")
    if lmi_feasible(sys, sweep * (1.0 + tol) + 1e-300) is not None:
        return HinfResult(sweep, sweep, True, "sweep")
    try:
        gain = lmi_gain(sys, tol=tol * 0.5, lo=sweep)
    except Unstable:
        gain = None
    if gain is None or not np.isfinite(gain):
        return HinfResult(sweep, sweep, False, "sweep-unverified")
    return HinfResult(gain, sweep, True, "lmi")


def hinf_norm(sys, tol=1e-6, grid_points=2048, validate=True):
    """``sup_w sigma_max(D + C (e^{iw} I - A)^{-1} B)``; see :func:`hinf_norm_report`."""
    return hinf_norm_report(sys, tol, grid_points, validate).value


def trajectory_gain_ratio(f, u):
    """``||f(u)||_2 / ||u||_2`` over the finite horizon.

    ``f`` is an :class:`LtiSystem` (simulated from rest) or any callable
    mapping a trajectory to a trajectory.
    """
    u = as_trajectory(u, name="u")
    nu = np.linalg.norm(u)
    if nu == 0:
        raise ValueError("input has zero norm")
    y = simulate_recursive(f, u) if isinstance(f, LtiSystem) else np.asarray(f(u))
    return float(np.linalg.norm(y) / nu)
