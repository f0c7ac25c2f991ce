import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from l2ru.cli import OPTIONS, main
from l2ru.lti import LtiSystem
from l2ru.model import L2ruFreeParams, L2ruModel, build, certified_gain, forward
from l2ru.threetank import read_dataset


def write_system(path, A, B, C, D, **extra):
    path.write_text(json.dumps(dict(LtiSystem(A, B, C, D).to_dict(), **extra)))
    return str(path)


@pytest.fixture
def small_data(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["gen-data", "--out", str(out), "--length", "120", "--n-sequences", "2",
                 "--seed", "1"]) == 0
    return out


def run_train(tmp_path, data, *extra):
    argv = ["train", "--data", str(data), "--out-model", str(tmp_path / "m.json"),
            "--out-params", str(tmp_path / "p.json"), "--report", str(tmp_path / "r.csv"),
            "--layers", "1", "--width", "2", "--truncation-length", "40", *extra]
    return main(argv)


# -- gen-data ------------------------------------------------------------------------------

def test_gen_data_defaults(tmp_path, capsys):
    out = tmp_path / "tt.csv"
    assert main(["gen-data", "--out", str(out)]) == 0
    ds = read_dataset(out)
    assert ds.inputs.shape == (1, 2000, 1) and ds.outputs.shape == (1, 2000, 3)
    assert "2000" in capsys.readouterr().out


def test_gen_data_seed_determinism(tmp_path):
    paths = []
    for name, seed in (("a", "3"), ("b", "3"), ("c", "4")):
        p = tmp_path / f"{name}.csv"
        assert main(["gen-data", "--out", str(p), "--length", "50", "--seed", seed]) == 0
        paths.append(p.read_text())
    assert paths[0] == paths[1] and paths[0] != paths[2]


def test_gen_data_invalid_range(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "x.csv"), "--v-min", "90", "--v-max", "10"]) == 64


# -- train ---------------------------------------------------------------------------------

def test_train_zero_epochs_equals_initialization(tmp_path, small_data):
    assert run_train(tmp_path, small_data, "--epochs", "0", "--seed", "2") == 0
    params = L2ruFreeParams.from_dict(json.loads((tmp_path / "p.json").read_text()))
    from l2ru.model import init_l2ru_params
    fresh = init_l2ru_params("psi", 1, 3, 2, 1, np.random.default_rng(2), gamma_hat=5.0)
    assert json.dumps(params.to_dict()) == json.dumps(fresh.to_dict())
    assert (tmp_path / "r.csv").exists() and (tmp_path / "r.json").exists()


@pytest.mark.parametrize("kind", ["psi", "kappa"])
def test_train_smoke(tmp_path, small_data, kind):
    assert run_train(tmp_path, small_data, "--epochs", "8", "--kind", kind, "--lr", "1e-2") == 0
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    losses = [float(r["train_loss"]) for r in rows]
    assert len(losses) == 9 and all(r["cert_ok"] == "1" for r in rows)
    assert losses[5] < losses[0]
    saved = json.loads((tmp_path / "m.json").read_text())
    assert saved["kind"] == kind and "input_scale" in saved and "output_scale" in saved
    model = L2ruModel.from_dict(saved)
    assert certified_gain(model) == pytest.approx(5.0, rel=1e-9)
    params = L2ruFreeParams.from_dict(json.loads((tmp_path / "p.json").read_text()))
    u = np.random.default_rng(0).standard_normal((20, 1))
    np.testing.assert_allclose(forward(build(params), u), forward(model, u), atol=1e-12)


def test_train_missing_data_and_bad_setting(tmp_path, small_data):
    assert run_train(tmp_path, tmp_path / "none.csv", "--epochs", "0") == 64
    assert run_train(tmp_path, small_data, "--epochs", "0", "--kind", "other") == 64
    assert main(["train"]) == 64


def test_train_nan_abort(tmp_path, small_data):
    text = small_data.read_text().splitlines()
    cols = text[5].split(",")
    cols[2] = "nan"
    text[5] = ",".join(cols)
    small_data.write_text("\n".join(text) + "\n")
    assert run_train(tmp_path, small_data, "--epochs", "1") == 2
    assert list(tmp_path.glob("*snapshot*"))


def test_train_config_file_and_override(tmp_path, small_data):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nepochs = 3\nwidth = 3\n")
    assert run_train(tmp_path, small_data, "--config", str(ini), "--width", "2") == 0
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["epochs"] == 3
    params = json.loads((tmp_path / "p.json").read_text())
    assert np.shape(params["E_tilde"]) == (2, 1)
    ini.write_text("[train]\nepoch = 3\n")
    assert run_train(tmp_path, small_data, "--config", str(ini)) == 64
    ini.write_text("[trian]\nepochs = 3\n")
    assert run_train(tmp_path, small_data, "--config", str(ini)) == 64
    ini.write_text("[train]\nepochs = three\n")
    assert run_train(tmp_path, small_data, "--config", str(ini)) == 64


# -- certify ---------------------------------------------------------------------------

def test_certify_fresh_model(tmp_path, small_data, capsys):
    run_train(tmp_path, small_data, "--epochs", "0")
    capsys.readouterr()
    assert main(["certify", str(tmp_path / "m.json")]) == 0
    out = capsys.readouterr().out
    assert "CERTIFIED" in out and "layer 0" in out


def test_certify_tampered_model(tmp_path, small_data):
    run_train(tmp_path, small_data, "--epochs", "0")
    d = json.loads((tmp_path / "m.json").read_text())
    d["H"] = (10 * np.asarray(d["H"])).tolist()
    (tmp_path / "bad.json").write_text(json.dumps(d))
    assert main(["certify", str(tmp_path / "bad.json")]) == 1


def test_certify_systems(tmp_path):
    unstable = write_system(tmp_path / "u.json", [[1.1]], [[1.0]], [[1.0]], [[0.0]])
    assert main(["certify", unstable, "--gamma", "10"]) == 1
    stable = write_system(tmp_path / "s.json", [[0.5]], [[1.0]], [[1.0]], [[0.0]])
    assert main(["certify", stable, "--gamma", "2.1"]) == 0
    assert main(["certify", stable, "--gamma", "1.9"]) == 1
    stored = write_system(tmp_path / "p.json", [[0.5]], [[1.0]], [[1.0]], [[0.0]], P=[[3.0]], gamma=2.5)
    assert main(["certify", stored]) == 0
    assert main(["certify", str(tmp_path / "missing.json")]) == 64
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["certify", str(tmp_path / "junk.json")]) == 64


# -- gain ------------------------------------------------------------------------------

def test_gain_examples(tmp_path, capsys):
    f = write_system(tmp_path / "a.json", [[0.5]], [[1.0]], [[1.0]], [[0.0]])
    assert main(["gain", f]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(2.0, rel=1e-6)
    f = write_system(tmp_path / "d.json", np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), [[-1.5]])
    assert main(["gain", f]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(1.5, rel=1e-6)
    f = write_system(tmp_path / "u.json", [[1.2]], [[1.0]], [[1.0]], [[0.0]])
    assert main(["gain", f]) == 1


# -- simulate / export -------------------------------------------------------------------

def test_simulate_system_and_model(tmp_path, small_data):
    f = write_system(tmp_path / "s.json", [[0.5]], [[1.0]], [[1.0]], [[0.0]])
    (tmp_path / "u.csv").write_text("u\n1\n0\n0\n0\n")
    assert main(["simulate", f, "--input", str(tmp_path / "u.csv"), "--out", str(tmp_path / "y.csv")]) == 0
    with open(tmp_path / "y.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["y0"]) for r in rows] == [0.0, 1.0, 0.5, 0.25]
    run_train(tmp_path, small_data, "--epochs", "0")
    assert main(["simulate", str(tmp_path / "m.json"), "--input", str(small_data),
                 "--out", str(tmp_path / "ym.csv")]) == 0
    with open(tmp_path / "ym.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 240 and set(rows[0]) == {"sequence", "k", "y0", "y1", "y2"}


def test_export(tmp_path, small_data):
    run_train(tmp_path, small_data, "--epochs", "0", "--kind", "kappa", "--width", "2")
    assert main(["export", str(tmp_path / "p.json"), "--out", str(tmp_path / "e.json")]) == 0
    assert main(["certify", str(tmp_path / "e.json")]) == 0
    assert main(["export", str(tmp_path / "p.json"), "--out", str(tmp_path / "l.json"), "--layer", "0"]) == 0
    layer = json.loads((tmp_path / "l.json").read_text())
    assert {"A", "B", "C", "D", "P", "gamma"} <= set(layer)
    assert main(["certify", str(tmp_path / "l.json")]) == 0
    assert main(["export", str(tmp_path / "p.json"), "--out", str(tmp_path / "x.json"), "--layer", "5"]) == 64


# -- usage -----------------------------------------------------------------------------

def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as info:
        main(["gain", "--bogus"])
    assert info.value.code == 64
    assert main([]) == 64


@pytest.mark.parametrize("command", list(OPTIONS))
def test_help_lists_every_flag(command, capsys):
    with pytest.raises(SystemExit) as info:
        main([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for flag, *_ in OPTIONS[command]:
        assert flag in text


def test_module_entry_point(tmp_path):
    f = write_system(tmp_path / "a.json", [[0.5]], [[1.0]], [[1.0]], [[0.0]])
    out = subprocess.run([sys.executable, "-m", "l2ru", "gain", f], capture_output=True, text=True)
    assert out.returncode == 0 and float(out.stdout) == pytest.approx(2.0)
