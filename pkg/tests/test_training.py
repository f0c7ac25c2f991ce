import csv
import json

import numpy as np
import pytest

from l2ru.errors import NaNLossError
from l2ru.model import L2ruFreeParams, build, forward, init_l2ru_params
from l2ru.threetank import Dataset
from l2ru.training import (Scaling, TrainConfig, audit_certificates, fd_audit, gradient, loss_mse,
                           nrmse, predict, train)
from jax.flatten_util import ravel_pytree


def toy_dataset(rng, n_seq=2, T=60, gain=0.5, split=42):
    u = rng.standard_normal((n_seq, T, 1))
    return Dataset(u, gain * u, split)


# -- metrics ---------------------------------------------------------------------------

def test_loss_mse_examples(rng):
    y = rng.standard_normal((10, 2))
    assert loss_mse(y, y) == 0.0
    assert loss_mse(y + 1.0, y) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        loss_mse(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        loss_mse(np.zeros((3, 2)), np.zeros((3, 1)))


def test_nrmse_examples(rng):
    y = rng.standard_normal((200, 2))
    np.testing.assert_array_equal(nrmse(y, y), [0.0, 0.0])
    np.testing.assert_allclose(nrmse(np.broadcast_to(y.mean(0), y.shape), y), [1.0, 1.0])
    sym = np.sin(np.linspace(0, 2 * np.pi, 101))[:, None]
    value = nrmse(sym[::-1], sym)[0]
    assert 0 < value <= 2
    with pytest.raises(ValueError):
        nrmse(y[:, :1], np.ones((200, 1)))


def test_scaling_fit(rng):
    ds = toy_dataset(rng)
    s = Scaling.fit(ds, headroom=4.0)
    rms_u = np.sqrt(np.mean(ds.inputs[:, :42] ** 2))
    assert s.u_scale[0] == pytest.approx(rms_u)
    assert s.y_scale[0] == pytest.approx(4.0 * 0.5 * rms_u)
    np.testing.assert_array_equal(Scaling.identity(2, 3).y_scale, np.ones(3))


# -- gradients ---------------------------------------------------------------------------

def test_zero_target_zero_gain_gradient_vanishes_on_decoder(rng):
    p = init_l2ru_params("psi", 1, 1, 2, 1, rng, gamma_tilde=0.0, zeta_tilde=0.0)
    # zero encoder output means the model output is identically zero
    p = L2ruFreeParams(p.layers, p.E_tilde, p.H_tilde, 1.0, "psi")
    u = np.zeros((1, 20, 1))
    g = gradient(p, (u, np.zeros((1, 20, 1))))
    assert not g.any()


def test_scalar_probe_fd_agreement(rng):
    p = init_l2ru_params("psi", 1, 1, 1, 1, rng, gamma_hat=1.0, init="random")
    u = rng.standard_normal((30, 1))
    y = np.tanh(u)
    _, a, fd, rel = fd_audit(p, (u, y), n_coords=10_000, seed=0)
    assert len(a) == ravel_pytree(p)[0].size
    big = np.abs(a) > 1e-8
    assert np.all(rel[big] <= 1e-4)
    assert np.all(np.abs(a - fd)[~big] <= 1e-9)


@pytest.mark.parametrize("kind", ["psi", "kappa"])
def test_fd_audit_seed_11(kind):
    rng = np.random.default_rng(11)
    p = init_l2ru_params(kind, 2, 2, 3, 2, rng, gamma_hat=2.0, init="random")
    u = rng.standard_normal((2, 40, 2))
    y = rng.standard_normal((2, 40, 2))
    _, a, fd, rel = fd_audit(p, (u, y), n_coords=50, seed=11)
    assert len(rel) == 50
    # below ~1e-8 the central difference itself is dominated by rounding of the loss
    big = np.maximum(np.abs(a), np.abs(fd)) > 1e-8
    assert big.sum() >= 35  # masked kappa entries have exactly zero gradient
    assert rel[big].max() <= 1e-4
    assert np.abs(a - fd)[~big].max(initial=0.0) <= 1e-10
    if kind == "psi":
        assert rel.max() <= 1e-4


def test_gradient_rejects_empty_batch(rng):
    p = init_l2ru_params("psi", 1, 1, 2, 1, rng)
    with pytest.raises(ValueError):
        gradient(p, (np.zeros((0, 5, 1)), np.zeros((0, 5, 1))))


# -- configuration -----------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(learning_rate=0.0), dict(truncation_length=1),
                                dict(optimizer="rmsprop"), dict(epochs=-1), dict(output_headroom=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- training loop -----------------------------------------------------------------------

def test_zero_epochs_leaves_params_unchanged(rng):
    p = init_l2ru_params("psi", 1, 1, 2, 1, rng)
    out, report = train(p, toy_dataset(rng), TrainConfig(epochs=0))
    assert np.array_equal(np.asarray(ravel_pytree(p)[0]), np.asarray(ravel_pytree(out)[0]))
    assert len(report.rows) == 1 and report.rows[0]["epoch"] == 0
    assert np.isfinite(report.rows[0]["train_loss"]) and report.cert_ok.all()


@pytest.mark.parametrize("optimizer, lr", [("adam", 1e-2), ("sgd", 0.2)])
def test_linear_target_is_learned(optimizer, lr):
    rng = np.random.default_rng(3)
    p = init_l2ru_params("psi", 1, 1, 2, 1, rng, gamma_hat=2.0)
    cfg = TrainConfig(epochs=200, learning_rate=lr, optimizer=optimizer, truncation_length=20,
                      scale_data=False)
    _, report = train(p, toy_dataset(rng), cfg)
    assert report.train_loss[-1] < 0.1 * report.train_loss[0]
    assert report.cert_ok.all()


def test_training_is_deterministic(rng):
    p = init_l2ru_params("kappa", 1, 1, 2, 1, rng)
    ds = toy_dataset(rng)
    cfg = TrainConfig(epochs=5, learning_rate=1e-2, batch_size=1, seed=4)
    out1, r1 = train(p, ds, cfg)
    out2, r2 = train(p, ds, cfg)
    assert np.array_equal(r1.train_loss, r2.train_loss)
    assert np.array_equal(r1.val_loss, r2.val_loss)
    assert np.array_equal(np.asarray(ravel_pytree(out1)[0]), np.asarray(ravel_pytree(out2)[0]))


def test_every_epoch_is_certified_and_grad_checked(rng):
    p = init_l2ru_params("psi", 1, 1, 2, 2, rng, gamma_hat=3.0, init="random")
    cfg = TrainConfig(epochs=4, learning_rate=5e-2, grad_check_interval=2, grad_check_coords=10)
    _, report = train(p, toy_dataset(rng), cfg)
    assert report.cert_ok.all() and len(report.rows) == 5
    checks = [r["grad_check"] for r in report.rows]
    assert checks[1] is None and checks[3] is None
    assert checks[2] <= 1e-4 and checks[4] <= 1e-4


def test_trained_model_keeps_gain_bound(rng):
    p = init_l2ru_params("psi", 1, 1, 2, 2, rng, gamma_hat=0.8)
    out, _ = train(p, toy_dataset(rng, gain=3.0), TrainConfig(epochs=20, learning_rate=5e-2))
    assert audit_certificates(out)
    model = build(out)
    u = rng.standard_normal((300, 1))
    assert np.linalg.norm(forward(model, u)) <= 0.8 * np.linalg.norm(u) * (1 + 1e-9)


def test_predict_matches_numpy_forward(rng):
    p = init_l2ru_params("psi", 1, 2, 3, 2, rng)
    u = rng.standard_normal((2, 50, 1))
    pred = predict(p, u)
    model = build(p)
    for b in range(2):
        np.testing.assert_allclose(pred[b], forward(model, u[b]), atol=1e-10)


def test_nan_loss_aborts_with_snapshot(rng):
    p = init_l2ru_params("psi", 1, 1, 2, 1, rng)
    ds = toy_dataset(rng)
    ds.outputs[0, 3, 0] = np.nan
    with pytest.raises(NaNLossError) as info:
        train(p, ds, TrainConfig(epochs=2, scale_data=False))
    assert info.value.snapshot["epoch"] == 0
    assert isinstance(info.value.snapshot["params"], L2ruFreeParams)


def test_report_files(rng, tmp_path):
    p = init_l2ru_params("psi", 1, 1, 2, 1, rng)
    _, report = train(p, toy_dataset(rng), TrainConfig(epochs=2))
    report.to_csv(tmp_path / "r.csv")
    report.to_json(tmp_path / "r.json")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
    assert set(rows[0]) == {"epoch", "train_loss", "val_loss", "nrmse_0", "cert_ok", "grad_check",
                            "wall_time"}
    assert float(rows[2]["train_loss"]) == report.train_loss[2]
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["epochs"] == 2 and summary["all_certified"] is True
