"""The ten acceptance criteria, each at its stated tolerance.

Every test records a PASS/FAIL line that is repeated in the terminal summary.
Criterion 8 is slow (several minutes on one core).
"""

import time

import numpy as np
import pytest

from l2ru.errors import DegenerateParameters
from l2ru.kappa import kappa_construct, random_kappa_params
from l2ru.lti import (LtiSystem, bounded_real_check_strict, bounded_real_residual, hinf_norm,
                      lmi_gain, simulate_recursive, simulate_scan, spectral_radius)
from l2ru.model import build, certified_gain, forward, init_l2ru_params
from l2ru.psi import init_long_memory, long_memory_modulus, psi_gamma, random_psi_params
from l2ru.threetank import generate_dataset
from l2ru.training import TrainConfig, fd_audit, train
from test_psi import tightness_params


def test_1_psi_feasibility(acceptance):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    total = degenerate = bad = 0
    for _ in range(500):
        params = random_psi_params(6, rng)
        for gamma in (0.1, 1.0, 10.0):
            total += 1
            try:
                s, cert = psi_gamma(params, gamma)
            except DegenerateParameters:
                degenerate += 1
                continue
            ok = bounded_real_residual(s, cert.P, gamma) < 0 and hinf_norm(s) <= gamma * (1 + 1e-6)
            bad += not ok
    elapsed = time.perf_counter() - start
    ok = bad == 0 and degenerate < 0.01 * total and elapsed < 60
    acceptance(1, ok, f"{total - degenerate - bad}/{total - degenerate} certified, "
                      f"degenerate {degenerate}/{total}, {elapsed:.1f} s")
    assert ok


def test_2_psi_tightness(acceptance):
    s, _ = psi_gamma(tightness_params(3), 2.0)
    g = hinf_norm(s)
    ok = 1.9 <= g <= 2.0
    acceptance(2, ok, f"hinf_norm {g:.6f} in [1.9, 2.0]")
    assert ok


def test_3_kappa_feasibility(acceptance):
    rng = np.random.default_rng(2025)
    total = bad = shrunk = 0
    for _ in range(500):
        n_h = int(rng.integers(1, 7))
        n_d, n_z = (int(k) for k in rng.integers(1, 5, 2))
        params = random_kappa_params(n_h, n_d, n_z, rng)
        draw_shrunk = False
        for gamma in (0.5, 1.0, 5.0):
            total += 1
            out = kappa_construct(params, gamma)
            draw_shrunk |= out.shrinks > 0
            ok = (bounded_real_check_strict(out.system, out.certificate.P, gamma)
                  and hinf_norm(out.system) <= gamma * (1 + 1e-6))
            bad += not ok
        shrunk += draw_shrunk
    ok = bad == 0 and shrunk < 5
    acceptance(3, ok, f"{total - bad}/{total} certified, shrink fallback in {shrunk}/500 draws")
    assert ok


def test_4_long_memory_initialization(acceptance):
    rng = np.random.default_rng(4)
    worst = 0.0
    for alpha in (-2.0, 0.0, 2.0, 5.0):
        s, _ = psi_gamma(init_long_memory(alpha, rng.standard_normal((6, 6))), 1.0)
        moduli = np.abs(np.linalg.eigvals(s.A))
        worst = max(worst, np.max(np.abs(moduli - long_memory_modulus(alpha))))
    ok = worst <= 1e-5
    acceptance(4, ok, f"max modulus error {worst:.2e}")
    assert ok


def test_5_scan_equivalence(acceptance):
    rng = np.random.default_rng(5)
    worst, t_scan, t_rec = 0.0, 0.0, 0.0
    for _ in range(100):
        n_h = int(rng.integers(2, 9))
        s = kappa_construct(random_kappa_params(n_h, 2, 2, rng), 1.0).system
        u = rng.standard_normal((4096, 2))
        t0 = time.perf_counter()
        a = simulate_scan(s, u, workers=4)
        t1 = time.perf_counter()
        b = simulate_recursive(s, u)
        t2 = time.perf_counter()
        t_scan += t1 - t0
        t_rec += t2 - t1
        worst = max(worst, np.max(np.abs(a - b)))
    ok = worst < 1e-10 and t_scan < t_rec
    acceptance(5, ok, f"max |scan - recursive| {worst:.2e}; scan {t_scan:.2f} s vs recursive {t_rec:.2f} s")
    assert ok


def test_6_model_gain_bound(acceptance):
    rng = np.random.default_rng(6)
    worst_ratio, worst_cert, violations = 0.0, 0.0, 0
    for i in range(50):
        kind = ("psi", "kappa")[i % 2]
        r = 1 + i % 3
        gamma_hat = float(rng.uniform(0.2, 5.0))
        init = ("long_memory", "random")[(i // 2) % 2]
        params = init_l2ru_params(kind, 2, 3, 4, r, rng, gamma_hat=gamma_hat, init=init,
                                  gamma_tilde=rng.uniform(0.1, 3.0), zeta_tilde=rng.uniform(0.1, 2.0))
        model = build(params)
        worst_cert = max(worst_cert, abs(certified_gain(model) - gamma_hat) / gamma_hat)
        for _ in range(20):
            u = rng.standard_normal((500, 2)) * rng.uniform(0.1, 10.0)
            ratio = np.linalg.norm(forward(model, u)) / (gamma_hat * np.linalg.norm(u))
            worst_ratio = max(worst_ratio, ratio)
            violations += ratio > 1 + 1e-9
    ok = violations == 0 and worst_cert <= 1e-9
    acceptance(6, ok, f"1000 trials, max ||y||/(gamma_hat ||u||) {worst_ratio:.4f}, "
                      f"max certified-gain error {worst_cert:.1e}")
    assert ok


def test_7_gradient_correctness(acceptance):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    params = init_l2ru_params("psi", 2, 2, 4, 2, rng, gamma_hat=2.0, init="random")
    u = rng.standard_normal((2, 100, 2))
    y = np.tanh(rng.standard_normal((2, 100, 2)))
    _, a, fd, rel = fd_audit(params, (u, y), n_coords=50, seed=7, step=1e-5)
    elapsed = time.perf_counter() - start
    ok = rel.max() <= 1e-4 and elapsed < 120
    acceptance(7, ok, f"max relative error {rel.max():.2e} over 50 coordinates, {elapsed:.1f} s")
    assert ok


# Scaled-down identification run.  Several 2000-sample sequences with one
# sequence per update give far more optimizer steps in 300 epochs.
THREE_TANK = dict(n_sequences=30, kind="psi", layers=2, width=8, gamma_hat=5.0, alpha=7.0,
                  epochs=300, learning_rate=1e-3, truncation_length=1400, batch_size=1,
                  output_headroom=8.0)


def test_8_three_tank_identification(acceptance):
    c = THREE_TANK
    start = time.perf_counter()
    ds = generate_dataset(seed=0, n_sequences=c["n_sequences"], length=2000, noise_std=0.1)
    params = init_l2ru_params(c["kind"], 1, 3, c["width"], c["layers"], np.random.default_rng(0),
                              gamma_hat=c["gamma_hat"], alpha=c["alpha"])
    cfg = TrainConfig(epochs=c["epochs"], learning_rate=c["learning_rate"],
                      truncation_length=c["truncation_length"], batch_size=c["batch_size"],
                      output_headroom=c["output_headroom"], audit_interval=1)
    _, report = train(params, ds, cfg)
    elapsed = time.perf_counter() - start
    scores = np.array(report.rows[-1]["nrmse"])
    mse_ratio = report.val_loss[-1] / report.val_loss[0]
    checks = {
        "nrmse<=0.25": bool(np.all(scores <= 0.25)),
        "val_mse<=0.2x": bool(mse_ratio <= 0.2),
        "all_certified": bool(report.cert_ok.all()),
        "runtime<15min": elapsed < 900,
    }
    ok = all(checks.values())
    acceptance(8, ok, f"val NRMSE {np.round(scores, 3).tolist()}, val MSE ratio {mse_ratio:.3f}, "
                      f"certified {int(report.cert_ok.sum())}/{len(report.rows)} epochs, "
                      f"{elapsed:.0f} s; " + ", ".join(f"{k}={v}" for k, v in checks.items()))
    assert ok


def test_9_initialization_ablation(acceptance):
    ds = generate_dataset(seed=0)
    losses = {"long_memory": [], "random": []}
    for init in losses:
        for seed in range(5):
            params = init_l2ru_params("psi", 1, 3, 8, 2, np.random.default_rng(seed), gamma_hat=5.0,
                                      init=init, alpha=4.1)
            _, report = train(params, ds, TrainConfig(epochs=100, seed=seed, output_headroom=8.0,
                                                      audit_interval=0))
            losses[init].append(report.train_loss[100])
    med = {k: float(np.median(v)) for k, v in losses.items()}
    ok = med["long_memory"] < med["random"]
    acceptance(9, ok, f"median epoch-100 training loss: long-memory {med['long_memory']:.4g} "
                      f"vs random {med['random']:.4g}")
    assert ok


def test_10_oracle_cross_check(acceptance):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 7))
        m, p = (int(k) for k in rng.integers(1, 4, 2))
        A = rng.standard_normal((n, n))
        A *= rng.uniform(0.1, 0.95) / max(spectral_radius(A), 1e-12)
        s = LtiSystem(A, rng.standard_normal((n, m)), rng.standard_normal((p, n)),
                      rng.standard_normal((p, m)))
        sweep = hinf_norm(s, validate=False)
        lmi = lmi_gain(s)
        worst = max(worst, abs(sweep - lmi) / lmi)
    ok = worst <= 1e-4
    acceptance(10, ok, f"max relative gap sweep vs LMI bisection {worst:.2e}")
    assert ok
