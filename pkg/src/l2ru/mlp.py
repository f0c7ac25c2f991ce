"""Static nonlinearity with a freely parametrized Lipschitz bound.

``mu(x) = |zeta_tilde| * (g(x) - g(0))`` where ``g`` is an MLP whose weights
are divided by their spectral norms and whose activation is 1-Lipschitz.
Hence ``mu(0) = 0`` exactly and ``mu`` is ``|zeta_tilde|``-Lipschitz for every
parameter value.
"""

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .errors import DimensionError
from .numerics import spectral_norm_diff

__all__ = ["MlpParams", "mlp_forward", "mlp_lipschitz_lower_bound", "random_mlp_params",
           "lipschitz_bound"]

_ACTIVATIONS = {
    "tanh": jnp.tanh,
    "relu": jax.nn.relu,
    "identity": lambda x: x,
}


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class MlpParams:
    weights: list
    biases: list
    zeta_tilde: jax.Array
    activation: str = field(default="tanh", metadata=dict(static=True))

    @property
    def layer_widths(self):
        return [np.shape(self.weights[0])[1]] + [np.shape(W)[0] for W in self.weights]

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        if any(isinstance(W, jax.core.Tracer) for W in self.weights):
            return
        widths = [np.shape(self.weights[0])[1]]
        for W, b in zip(self.weights, self.biases):
            if np.shape(W)[1] != widths[-1] or np.shape(b) != (np.shape(W)[0],):
                raise DimensionError("inconsistent layer widths")
            widths.append(np.shape(W)[0])

    def to_dict(self):
        return {
            "layer_widths": self.layer_widths,
            "weights": [np.asarray(W).tolist() for W in self.weights],
            "biases": [np.asarray(b).tolist() for b in self.biases],
            "zeta_tilde": float(self.zeta_tilde),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d):
        widths = d["layer_widths"]
        weights = [np.asarray(W, dtype=float).reshape(widths[i + 1], widths[i])
                   for i, W in enumerate(d["weights"])]
        biases = [np.asarray(b, dtype=float).reshape(-1) for b in d["biases"]]
        return cls(weights, biases, np.float64(d["zeta_tilde"]), d.get("activation", "tanh"))


def lipschitz_bound(params):
    return jnp.abs(params.zeta_tilde)


def _raw(params, x):
    act = _ACTIVATIONS[params.activation]
    n_layers = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ (W / spectral_norm_diff(W)).T + b
        if i < n_layers - 1:
            x = act(x)
    return x


def mlp_forward(params, x):
    """Evaluate ``mu`` on ``x`` of shape ``(..., n_in)``."""
    x = jnp.asarray(x)
    n_in = params.layer_widths[0]
    if x.shape[-1:] != (n_in,):
        raise DimensionError(f"input width must be {n_in}, got {x.shape}")
    # g(0) is evaluated with the same shape as x so that zero rows cancel bit for bit
    g0 = _raw(params, jnp.zeros_like(x))
    return lipschitz_bound(params) * (_raw(params, x) - g0)


def mlp_lipschitz_lower_bound(params, trials=1000, seed=0):
    """Largest ``||mu(a) - mu(b)|| / ||a - b||`` over sampled pairs.

    Half of the pairs are far apart, half are tiny perturbations (which probe
    the local Jacobian norm).
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    n = params.layer_widths[0]
    a = rng.standard_normal((trials, n))
    far = rng.standard_normal((trials, n))
    near = a + 1e-4 * rng.standard_normal((trials, n))
    b = np.where((np.arange(trials) % 2 == 0)[:, None], far, near)
    num = np.linalg.norm(np.asarray(mlp_forward(params, a) - mlp_forward(params, b)), axis=1)
    den = np.linalg.norm(a - b, axis=1)
    return float(np.max(num / den))


def random_mlp_params(n_in, n_out, rng, hidden=None, zeta_tilde=1.0, activation="tanh"):
    """Gaussian weights scaled by ``1/sqrt(fan_in)``; default two hidden layers of ``2*n_in``."""
    hidden = [2 * n_in, 2 * n_in] if hidden is None else list(hidden)
    widths = [n_in] + hidden + [n_out]
    weights = [rng.standard_normal((o, i)) / np.sqrt(i) for i, o in zip(widths[:-1], widths[1:])]
    biases = [0.1 * rng.standard_normal(o) for o in widths[1:]]
    return MlpParams(weights, biases, np.float64(zeta_tilde), activation)
