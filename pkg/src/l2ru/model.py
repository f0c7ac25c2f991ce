"""L2RU model: encoder, gain-bounded state-space layers with skips, rescaled decoder.

Each layer computes ``y_i = mu_i(g_i(y_{i-1})) + y_{i-1}`` where ``g_i`` is an
LTI system with L2 bound ``|gamma_tilde_i|`` and ``mu_i`` is
``|zeta_tilde_i|``-Lipschitz.  The decoder is rescaled so that

    ||E|| * ||H|| * prod_i (gamma_i * zeta_i + 1) = gamma_hat,

which bounds the L2 gain of the whole model by ``gamma_hat``.

Two builders share this logic: :func:`build` (numpy, checked, keeps every
layer's certificate) and :func:`model_arrays` (JAX-traceable, used for
training).  :func:`forward_arrays` evaluates either.
"""

import json
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .errors import DegenerateParameters, DimensionError
from .kappa import (EigenInitRanges, KappaFreeParams, kappa_construct, kappa_matrices,
                    random_kappa_params)
from .lti import GainCertificate, LtiSystem, as_trajectory, simulate_recursive, simulate_scan
from .mlp import MlpParams, lipschitz_bound, mlp_forward, random_mlp_params
from .numerics import spectral_norm, spectral_norm_diff
from .psi import (PsiFreeParams, init_long_memory, psi_gamma, psi_matrices,
                  random_psi_params)

__all__ = [
    "LayerParams",
    "L2ruFreeParams",
    "ModelLayer",
    "L2ruModel",
    "build",
    "forward",
    "certified_gain",
    "model_arrays",
    "forward_arrays",
    "init_l2ru_params",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1
# Floor on |gamma_tilde| handed to the LTI constructions (a zero bound is degenerate).
GAMMA_FLOOR = 1e-12


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class LayerParams:
    lti: object  # PsiFreeParams | KappaFreeParams
    gamma_tilde: jax.Array
    mlp: MlpParams


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class L2ruFreeParams:
    layers: list
    E_tilde: jax.Array
    H_tilde: jax.Array
    gamma_hat: float = field(default=1.0, metadata=dict(static=True))
    kind: str = field(default="psi", metadata=dict(static=True))

    def __post_init__(self):
        if self.kind not in ("psi", "kappa"):
            raise ValueError("kind must be 'psi' or 'kappa'")
        if not self.gamma_hat > 0:
            raise ValueError("gamma_hat must be positive")
        if not self.layers:
            raise ValueError("need at least one layer")
        if isinstance(self.E_tilde, jax.core.Tracer):
            return
        width = np.shape(self.E_tilde)[0]
        for layer in self.layers:
            lti = layer.lti
            n_d, n_z = (lti.n, lti.n) if self.kind == "psi" else (lti.n_d, lti.n_z)
            if n_d != width or n_z != width:
                raise DimensionError("layer width must match the encoder output (skip connection)")
            if layer.mlp.layer_widths[0] != n_z or layer.mlp.layer_widths[-1] != n_d:
                raise DimensionError("nonlinearity must map R^{n_z} to R^{n_d}")
        if np.shape(self.H_tilde)[1] != width:
            raise DimensionError("decoder input width must match the layer width")

    @property
    def n_u(self):
        return np.shape(self.E_tilde)[1]

    @property
    def n_y(self):
        return np.shape(self.H_tilde)[0]

    def to_dict(self):
        return {
            "l2ru_schema": SCHEMA_VERSION,
            "gamma_hat": float(self.gamma_hat),
            "kind": self.kind,
            "E_tilde": np.asarray(self.E_tilde).tolist(),
            "H_tilde": np.asarray(self.H_tilde).tolist(),
            "layers": [{"lti": layer.lti.to_dict(),
                        "gamma_tilde": float(layer.gamma_tilde),
                        "mlp": layer.mlp.to_dict()} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        lti_cls = PsiFreeParams if d["kind"] == "psi" else KappaFreeParams
        layers = [LayerParams(lti_cls.from_dict(layer["lti"]), np.float64(layer["gamma_tilde"]),
                              MlpParams.from_dict(layer["mlp"])) for layer in d["layers"]]
        return cls(layers, np.asarray(d["E_tilde"], dtype=float),
                   np.asarray(d["H_tilde"], dtype=float), float(d["gamma_hat"]), d["kind"])


@dataclass(frozen=True, eq=False)
class ModelLayer:
    system: LtiSystem
    certificate: GainCertificate
    mlp: MlpParams


@dataclass(frozen=True, eq=False)
class L2ruModel:
    E: np.ndarray
    layers: list
    H: np.ndarray
    gamma_hat: float
    kind: str
    per_layer_budget: list  # (gamma_i, zeta_i)

    def to_dict(self):
        return {
            "l2ru_schema": SCHEMA_VERSION,
            "gamma_hat": float(self.gamma_hat),
            "kind": self.kind,
            "E": self.E.tolist(),
            "H": self.H.tolist(),
            "layers": [dict(layer.system.to_dict(), P=np.asarray(layer.certificate.P).tolist(),
                            gamma=float(layer.certificate.gamma), mlp=layer.mlp.to_dict())
                       for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("l2ru_schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema {d.get('l2ru_schema')!r}")
        layers, budget = [], []
        for entry in d["layers"]:
            mlp = MlpParams.from_dict(entry["mlp"])
            cert = GainCertificate(np.asarray(entry["P"], dtype=float), float(entry["gamma"]))
            layers.append(ModelLayer(LtiSystem.from_dict(entry), cert, mlp))
            budget.append((cert.gamma, abs(float(mlp.zeta_tilde))))
        return cls(np.asarray(d["E"], dtype=float), layers, np.asarray(d["H"], dtype=float),
                   float(d["gamma_hat"]), d["kind"], budget)

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _layer_gamma(gamma_tilde):
    return jnp.maximum(jnp.abs(gamma_tilde), GAMMA_FLOOR)


def build(params):
    """Checked construction of an :class:`L2ruModel` from free parameters."""
    E = np.array(params.E_tilde, dtype=float)
    H_tilde = np.array(params.H_tilde, dtype=float)
    e_norm, h_norm = spectral_norm(E), spectral_norm(H_tilde)
    if e_norm == 0 or h_norm == 0:
        raise DegenerateParameters("encoder and decoder parameters must be nonzero")
    layers, budget, product = [], [], 1.0
    for layer in params.layers:
        gamma_i = float(_layer_gamma(layer.gamma_tilde))
        zeta_i = float(lipschitz_bound(layer.mlp))
        if params.kind == "psi":
            system, cert = psi_gamma(layer.lti, gamma_i)
        else:
            out = kappa_construct(layer.lti, gamma_i)
            system, cert = out.system, out.certificate
        mlp = jax.tree_util.tree_map(np.asarray, layer.mlp)
        layers.append(ModelLayer(system, cert, mlp))
        budget.append((gamma_i, zeta_i))
        product *= gamma_i * zeta_i + 1.0
    H = H_tilde * params.gamma_hat / (h_norm * e_norm * product)
    return L2ruModel(E, layers, H, float(params.gamma_hat), params.kind, budget)


def certified_gain(model):
    """``||E|| * ||H|| * prod(gamma_i * zeta_i + 1)`` from the stored factors."""
    g = spectral_norm(model.E) * spectral_norm(model.H)
    for gamma_i, zeta_i in model.per_layer_budget:
        g *= gamma_i * zeta_i + 1.0
    return float(g)


def forward(model, u, h0=None):
    """Model output for one input trajectory ``u`` of shape ``(T, n_u)`` from rest."""
    u = as_trajectory(u, model.E.shape[1], "u")
    y = u @ model.E.T
    for layer in model.layers:
        if model.kind == "kappa":
            z = simulate_scan(layer.system, y)
        else:
            z = simulate_recursive(layer.system, y)
        y = np.asarray(mlp_forward(layer.mlp, z)) + y
    return y @ model.H.T


def model_arrays(params):
    """Traceable counterpart of :func:`build`.

    Returns ``(E, layers, H)`` with ``layers`` a list of ``((A, B, C, D), mlp)``.
    """
    e_norm = spectral_norm_diff(params.E_tilde)
    h_norm = spectral_norm_diff(params.H_tilde)
    product = 1.0
    layers = []
    for layer in params.layers:
        gamma_i = _layer_gamma(layer.gamma_tilde)
        if params.kind == "psi":
            A, B, C, D, _ = psi_matrices(layer.lti, gamma_i)
        else:
            A, B, C, D = kappa_matrices(layer.lti, gamma_i)[:4]
        layers.append(((A, B, C, D), layer.mlp))
        product = product * (gamma_i * lipschitz_bound(layer.mlp) + 1.0)
    H = params.H_tilde * params.gamma_hat / (h_norm * e_norm * product)
    return params.E_tilde, layers, H


def _lti_scan(A, B, C, D, u, h0):
    """Batched LTI simulation; ``u`` is (batch, T, n_d), ``h0`` (batch, n_h)."""
    bu = jnp.swapaxes(u @ B.T, 0, 1)

    def step(h, b):
        return h @ A.T + b, h

    h_last, states = jax.lax.scan(step, h0, bu)
    z = jnp.swapaxes(states, 0, 1) @ C.T + u @ D.T
    return z, h_last


def forward_arrays(arrays, u, states=None):
    """Batched forward pass on arrays from :func:`model_arrays`.

    ``u`` has shape (batch, T, n_u).  ``states`` optionally holds each layer's
    initial state (batch, n_h); the final states are returned alongside the
    output so long sequences can be processed window by window.
    """
    E, layers, H = arrays
    y = u @ E.T
    finals = []
    for i, ((A, B, C, D), mlp) in enumerate(layers):
        h0 = states[i] if states is not None else jnp.zeros(y.shape[:1] + A.shape[:1])
        z, h_last = _lti_scan(A, B, C, D, y, h0)
        y = mlp_forward(mlp, z) + y
        finals.append(h_last)
    return y @ H.T, finals


def init_l2ru_params(kind, n_u, n_y, n, r, rng, gamma_hat=1.0, init="long_memory",
                     alpha=4.1, s_scale=0.1, gamma_tilde=1.0, zeta_tilde=1.0,
                     ranges=None, mlp_hidden=None, activation="tanh", n_h=None):
    """Initial free parameters for an ``r``-layer model of internal width ``n``.

    ``init="long_memory"`` places the eigenvalues of every state matrix close
    to the unit circle (for ``psi`` through ``alpha``: ``sigmoid(4.1) ~ 0.9837``;
    for ``kappa`` through ``ranges``).  ``init="random"`` draws every free
    parameter from a standard normal.
    """
    if init not in ("long_memory", "random"):
        raise ValueError("init must be 'long_memory' or 'random'")
    n_h = n if n_h is None else n_h
    layers = []
    for _ in range(r):
        if kind == "psi":
            if init == "long_memory":
                lti = init_long_memory(alpha, s_scale * rng.standard_normal((n, n)))
            else:
                lti = random_psi_params(n, rng)
        else:
            if init == "long_memory":
                rg = ranges or EigenInitRanges(0.9, 0.999, 0.0, np.pi / 10)
                lti = random_kappa_params(n_h, n, n, rng, rg, scale=1.0 / np.sqrt(n))
            else:
                lti = random_kappa_params(n_h, n, n, rng)
                lti = KappaFreeParams(rng.standard_normal(lti.mu.shape),
                                      rng.standard_normal(lti.theta.shape), lti.Dtil, lti.Ybar)
        mlp = random_mlp_params(n, n, rng, mlp_hidden, zeta_tilde, activation)
        layers.append(LayerParams(lti, np.float64(gamma_tilde), mlp))
    E_tilde = rng.standard_normal((n, n_u)) / np.sqrt(n_u)
    H_tilde = rng.standard_normal((n_y, n)) / np.sqrt(n)
    return L2ruFreeParams(layers, E_tilde, H_tilde, float(gamma_hat), kind)
