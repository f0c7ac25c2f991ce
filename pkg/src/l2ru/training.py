"""Unconstrained gradient training of L2RU free parameters.

Gradients come from JAX reverse-mode differentiation through the whole
pipeline (parametrizations, simulation, nonlinearities, decoder rescaling).
Long sequences are trained with truncated backpropagation: windows are
visited in time order and each starts from the states reached at the end of
the previous one, so the state is never reset mid-sequence.
"""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from .errors import DegenerateParameters, NaNLossError
from .lti import bounded_real_check_strict
from .model import build, certified_gain, forward_arrays, model_arrays

__all__ = [
    "TrainConfig",
    "TrainReport",
    "Scaling",
    "loss_mse",
    "nrmse",
    "gradient",
    "fd_audit",
    "audit_certificates",
    "train",
    "predict",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1500
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 0          # sequences per step; 0 means all
    truncation_length: int = 200
    seed: int = 0
    grad_check_interval: int = 0  # epochs between finite-difference audits; 0 disables
    grad_check_coords: int = 10
    audit_interval: int = 1
    scale_data: bool = True
    output_headroom: float = 1.0  # outputs divided by headroom * training RMS

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.truncation_length < 2:
            raise ValueError("truncation_length must be at least 2")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not self.output_headroom > 0:
            raise ValueError("output_headroom must be positive")


def loss_mse(pred, target):
    """Mean squared error over time and channels."""
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("empty trajectories")
    return float(np.mean((pred - target) ** 2))


def nrmse(pred, target):
    """Per-channel RMS error divided by the target's standard deviation."""
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("empty trajectories")
    p2 = pred.reshape(-1, pred.shape[-1]) if pred.ndim > 1 else pred[:, None]
    t2 = target.reshape(-1, target.shape[-1]) if target.ndim > 1 else target[:, None]
    std = t2.std(axis=0)
    if np.any(std == 0):
        raise ValueError("target channel is constant")
    return np.sqrt(np.mean((p2 - t2) ** 2, axis=0)) / std


@dataclass(frozen=True)
class Scaling:
    """Per-channel division by the training RMS (no centering).

    Centering would remove the mean inflow that drives integrating plants.
    ``headroom > 1`` shrinks the scaled outputs further, which lowers the
    input-output gain the model needs relative to its prescribed bound.
    """

    u_scale: np.ndarray
    y_scale: np.ndarray

    @classmethod
    def fit(cls, dataset, headroom=1.0):
        rms = lambda x: np.sqrt(np.mean(x.reshape(-1, x.shape[-1]) ** 2, axis=0))  # noqa: E731
        u, y = rms(dataset.train_inputs), rms(dataset.train_outputs)
        return cls(np.where(u > 0, u, 1.0), headroom * np.where(y > 0, y, 1.0))

    @classmethod
    def identity(cls, n_u, n_y):
        return cls(np.ones(n_u), np.ones(n_y))

    def to_dict(self):
        return {"u_scale": self.u_scale.tolist(), "y_scale": self.y_scale.tolist()}


def _mse_fn(unravel):
    def loss(flat, u, y, states):
        arrays = model_arrays(unravel(flat))
        pred, finals = forward_arrays(arrays, u, states)
        return jnp.mean((pred - y) ** 2), [jax.lax.stop_gradient(h) for h in finals]
    return loss


def _batch_arrays(batch):
    u, y = batch
    u, y = np.asarray(u, dtype=float), np.asarray(y, dtype=float)
    if u.ndim == 2:
        u, y = u[None], y[None]
    if u.shape[0] == 0 or u.shape[1] == 0:
        raise ValueError("batch is empty")
    return jnp.asarray(u), jnp.asarray(y)


def gradient(params, batch, states=None):
    """Flat gradient of the MSE loss with respect to every free scalar.

    ``batch`` is ``(u, y)`` with shapes (batch, T, n_u) and (batch, T, n_y)
    (a single (T, n) pair is accepted).  If the gradient is not finite the
    parameters are perturbed by 1e-12 noise and the computation retried once.
    """
    u, y = _batch_arrays(batch)
    flat, unravel = ravel_pytree(params)
    grad_fn = jax.grad(lambda f: _mse_fn(unravel)(f, u, y, states)[0])
    g = np.asarray(grad_fn(flat))
    if not np.all(np.isfinite(g)):
        jitter = 1e-12 * np.random.default_rng(0).standard_normal(flat.shape)
        g = np.asarray(grad_fn(flat + jitter))
        if not np.all(np.isfinite(g)):
            raise DegenerateParameters("gradient is not finite even after jitter")
    return g


def fd_audit(params, batch, n_coords=50, seed=0, step=1e-5):
    """Compare the analytic gradient with central differences on random coordinates.

    The step for coordinate ``p`` is ``step * (1 + |p|)``.  Returns
    ``(coords, analytic, finite_difference, relative_error)``; the relative
    error is ``|a - f| / max(|a|, |f|)`` (zero when both vanish).
    """
    u, y = _batch_arrays(batch)
    flat, unravel = ravel_pytree(params)
    loss = jax.jit(lambda f: _mse_fn(unravel)(f, u, y, None)[0])
    g = gradient(params, batch)
    rng = np.random.default_rng(seed)
    coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    flat_np = np.asarray(flat)
    fd = np.empty(len(coords))
    for j, c in enumerate(coords):
        h = step * (1.0 + abs(flat_np[c]))
        e = np.zeros_like(flat_np)
        e[c] = h
        fd[j] = (float(loss(flat_np + e)) - float(loss(flat_np - e))) / (2 * h)
    a = g[coords]
    den = np.maximum(np.abs(a), np.abs(fd))
    rel = np.where(den > 0, np.abs(a - fd) / np.where(den > 0, den, 1.0), 0.0)
    return coords, a, fd, rel


def audit_certificates(params):
    """Rebuild the model and check every layer's certificate plus the gain budget."""
    try:
        model = build(params)
    except Exception as exc:  # any construction failure is an audit failure
        log.warning("certificate audit could not build the model: %s", exc)
        return False
    ok = all(bounded_real_check_strict(layer.system, layer.certificate.P,
                                       layer.certificate.gamma, margin=0.0)
             for layer in model.layers)
    return ok and certified_gain(model) <= model.gamma_hat * (1 + 1e-9)


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    scaling: Scaling = None

    @property
    def train_loss(self):
        return np.array([r["train_loss"] for r in self.rows])

    @property
    def val_loss(self):
        return np.array([r["val_loss"] for r in self.rows])

    @property
    def cert_ok(self):
        return np.array([r["cert_ok"] for r in self.rows], dtype=bool)

    def to_csv(self, path):
        n_ch = len(self.rows[0]["nrmse"]) if self.rows else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss",
                        *[f"nrmse_{i}" for i in range(n_ch)], "cert_ok", "grad_check", "wall_time"])
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]),
                            *map(repr, r["nrmse"]), int(r["cert_ok"]),
                            "" if r["grad_check"] is None else repr(r["grad_check"]),
                            repr(r["wall_time"])])

    def summary(self):
        last = self.rows[-1] if self.rows else {}
        return {
            "epochs": len(self.rows) - 1,
            "initial_val_loss": self.rows[0]["val_loss"] if self.rows else None,
            "final_train_loss": last.get("train_loss"),
            "final_val_loss": last.get("val_loss"),
            "final_nrmse": list(last.get("nrmse", [])),
            "all_certified": bool(self.cert_ok.all()) if self.rows else None,
            "wall_time": last.get("wall_time"),
            "scaling": self.scaling.to_dict() if self.scaling else None,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def _windows(T, length):
    starts = list(range(0, T, length))
    return [(s, min(s + length, T)) for s in starts if min(s + length, T) - s >= 1]


def predict(params, u):
    """Model output for inputs of shape (batch, T, n_u) from rest (JAX path)."""
    u = jnp.asarray(np.asarray(u, dtype=float))
    return np.asarray(jax.jit(lambda p, x: forward_arrays(model_arrays(p), x)[0])(params, u))


def train(params, dataset, config=None):
    """Optimize free parameters on ``dataset``; returns ``(params, TrainReport)``.

    Epoch 0 of the report holds the metrics of the initial parameters.
    Losses are mean squared errors on the scaled data; the validation loss and
    NRMSE are computed on the samples after ``dataset.split_index`` from a
    full-length simulation started at rest.
    """
    config = config or TrainConfig()
    u_all = np.asarray(dataset.inputs, dtype=float)
    y_all = np.asarray(dataset.outputs, dtype=float)
    scaling = (Scaling.fit(dataset, config.output_headroom) if config.scale_data
               else Scaling.identity(u_all.shape[-1], y_all.shape[-1]))
    u_all = u_all / scaling.u_scale
    y_all = y_all / scaling.y_scale
    split = dataset.split_index
    n_seq = u_all.shape[0]
    has_val = split < u_all.shape[1]

    flat, unravel = ravel_pytree(params)
    flat = jnp.asarray(flat)
    loss_fn = _mse_fn(unravel)
    step_fn = jax.jit(jax.value_and_grad(loss_fn, has_aux=True))
    full_fn = jax.jit(lambda f, u: forward_arrays(model_arrays(unravel(f)), u)[0])
    rng = np.random.default_rng(config.seed)

    def metrics(f):
        pred = np.asarray(full_fn(f, jnp.asarray(u_all)))
        train_loss = float(np.mean((pred[:, :split] - y_all[:, :split]) ** 2))
        if has_val:
            val_loss = float(np.mean((pred[:, split:] - y_all[:, split:]) ** 2))
            scores = nrmse(pred[:, split:], y_all[:, split:]).tolist()
        else:
            val_loss, scores = float("nan"), []
        return train_loss, val_loss, scores

    b1, b2 = config.adam_betas
    m = jnp.zeros_like(flat)
    v = jnp.zeros_like(flat)
    t = 0
    report = TrainReport(scaling=scaling)
    start = time.perf_counter()

    def record(epoch, f, grad_check=None):
        tr, va, sc = metrics(f)
        if not np.isfinite(tr):
            raise NaNLossError(f"non-finite loss at epoch {epoch}",
                               snapshot={"epoch": epoch, "params": unravel(f)})
        cert = True
        if config.audit_interval and epoch % config.audit_interval == 0:
            cert = audit_certificates(unravel(f))
        report.rows.append({"epoch": epoch, "train_loss": tr, "val_loss": va, "nrmse": sc,
                            "cert_ok": cert, "grad_check": grad_check,
                            "wall_time": time.perf_counter() - start})
        log.info("epoch %d train %.6g val %.6g cert %s", epoch, tr, va, cert)

    record(0, flat)
    batch = config.batch_size or n_seq
    windows = _windows(split, config.truncation_length)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_seq)
        for b0 in range(0, n_seq, batch):
            idx = np.sort(order[b0:b0 + batch])
            u_b = jnp.asarray(u_all[idx, :split])
            y_b = jnp.asarray(y_all[idx, :split])
            states = None
            for s, e in windows:
                (loss, states), g = step_fn(flat, u_b[:, s:e], y_b[:, s:e], states)
                if not np.isfinite(float(loss)):
                    raise NaNLossError(f"non-finite loss at epoch {epoch}",
                                       snapshot={"epoch": epoch, "params": unravel(flat)})
                t += 1
                if config.optimizer == "adam":
                    m = b1 * m + (1 - b1) * g
                    v = b2 * v + (1 - b2) * g * g
                    m_hat = m / (1 - b1**t)
                    v_hat = v / (1 - b2**t)
                    flat = flat - config.learning_rate * m_hat / (jnp.sqrt(v_hat) + config.adam_eps)
                else:
                    flat = flat - config.learning_rate * g
        grad_check = None
        if config.grad_check_interval and epoch % config.grad_check_interval == 0:
            w_end = min(split, config.truncation_length)
            _, _, _, rel = fd_audit(unravel(flat), (u_all[:, :w_end], y_all[:, :w_end]),
                                    n_coords=config.grad_check_coords, seed=epoch)
            grad_check = float(rel.max())
        record(epoch, flat, grad_check)

    trained = jax.tree_util.tree_map(np.asarray, unravel(flat))
    return trained, report


def config_to_dict(config):
    d = asdict(config)
    d["adam_betas"] = list(config.adam_betas)
    return d
