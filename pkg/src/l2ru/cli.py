"""Command-line entry point: ``python -m l2ru <command>``.

Commands: gen-data, train, certify, gain, simulate, export.  Every flag can
also be set in an INI file passed with ``--config``; the section name is the
command name and keys are flag names without leading dashes (``-`` or ``_``).
Flags given on the command line override file values.

Exit codes: 0 success, 1 property violation, 2 numerical abort,
64 usage error or missing file.
"""

import argparse
import configparser
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_VIOLATION, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2, 64

log = logging.getLogger("l2ru")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# Per-command options: (flag, type, default, help).  Types are used both for
# argparse and for values read from the config file.

OPTIONS = {
    "gen-data": [
        ("out", str, "threetank.csv", "output CSV path (a .json sidecar is written next to it)"),
        ("seed", int, 0, "random seed"),
        ("n-sequences", int, 1, "number of independent sequences"),
        ("length", int, 2000, "samples per sequence"),
        ("ts", float, 0.1, "sampling time in seconds"),
        ("noise-std", float, 0.1, "measurement noise standard deviation (cm)"),
        ("v-min", float, 10.0, "lowest inflow level"),
        ("v-max", float, 100.0, "highest inflow level"),
        ("hold-min", int, 10, "shortest hold of the piecewise-constant input (samples)"),
        ("hold-max", int, 50, "longest hold (samples)"),
        ("train-fraction", float, 0.7, "leading fraction of each sequence used for training"),
    ],
    "train": [
        ("data", str, None, "dataset CSV (with .json sidecar)"),
        ("out-model", str, "model.json", "built model with certificates"),
        ("out-params", str, "params.json", "trained free parameters"),
        ("report", str, "report.csv", "per-epoch report CSV (summary JSON next to it)"),
        ("init-params", str, None, "start from this free-parameter file instead of a fresh init"),
        ("kind", str, "psi", "LTI parametrization: psi (square) or kappa (block-diagonal)"),
        ("layers", int, 2, "number of state-space layers"),
        ("width", int, 8, "internal width n"),
        ("gamma-hat", float, 5.0, "prescribed L2 bound of the whole model"),
        ("init", str, "long_memory", "long_memory or random"),
        ("alpha", float, 4.1, "long-memory eigenvalue parameter (psi)"),
        ("activation", str, "tanh", "MLP activation: tanh, relu or identity"),
        ("epochs", int, 300, "training epochs"),
        ("lr", float, 1e-3, "learning rate"),
        ("optimizer", str, "adam", "adam or sgd"),
        ("batch-size", int, 0, "sequences per step (0 = all)"),
        ("truncation-length", int, 200, "window length of truncated backpropagation"),
        ("output-headroom", float, 1.0, "extra output scaling factor"),
        ("grad-check-interval", int, 0, "epochs between finite-difference audits (0 = off)"),
        ("seed", int, 0, "seed for initialization and shuffling"),
    ],
    "certify": [
        ("file", str, None, "model or system JSON"),
        ("gamma", float, None, "bound to certify (systems: required unless the file stores one)"),
    ],
    "gain": [
        ("file", str, None, "system JSON"),
        ("tol", float, 1e-6, "relative tolerance"),
    ],
    "simulate": [
        ("file", str, None, "model or system JSON"),
        ("input", str, None, "input CSV (dataset with sidecar, or plain numeric columns)"),
        ("out", str, "simulation.csv", "output CSV"),
        ("method", str, "auto", "system simulation: auto, scan or recursive"),
    ],
    "export": [
        ("file", str, None, "free-parameter JSON (from train) or model JSON"),
        ("out", str, None, "output JSON"),
        ("layer", int, None, "export only this layer's system and certificate"),
    ],
}

POSITIONAL = {"certify": "file", "gain": "file", "simulate": "file", "export": "file"}
REQUIRED = {"train": ["data"], "certify": ["file"], "gain": ["file"],
            "simulate": ["file", "input"], "export": ["file", "out"]}


def build_parser():
    parser = _Parser(prog="l2ru", description="L2-bounded state-space models.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or "").strip().splitlines()[0])
        p.add_argument("--config", help="INI file; section [%s]" % name)
        for flag, typ, _, help_text in opts:
            dest = flag.replace("-", "_")
            if POSITIONAL.get(name) == flag:
                p.add_argument(dest, nargs="?", default=None, help=help_text)
            else:
                p.add_argument("--" + flag, dest=dest, type=typ, default=None, help=help_text)
    return parser


def resolve_config(command, args):
    """Merge defaults, the config file section, and explicit flags."""
    opts = {flag.replace("-", "_"): (typ, default) for flag, typ, default, _ in OPTIONS[command]}
    values = {k: d for k, (_, d) in opts.items()}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        cp.read(path)
        unknown_sections = [s for s in cp.sections() if s not in OPTIONS]
        if unknown_sections:
            raise UsageError(f"unknown config sections: {unknown_sections}")
        if cp.has_section(command):
            for key, raw in cp.items(command):
                dest = key.replace("-", "_")
                if dest not in opts:
                    raise UsageError(f"unknown key {key!r} in section [{command}]")
                try:
                    values[dest] = opts[dest][0](raw)
                except ValueError:
                    raise UsageError(f"bad value for {key!r}: {raw!r}") from None
    for dest in opts:
        v = getattr(args, dest, None)
        if v is not None:
            values[dest] = v
    missing = [k for k in REQUIRED.get(command, []) if values.get(k) is None]
    if missing:
        raise UsageError(f"missing required settings: {', '.join(missing)}")
    return argparse.Namespace(**values)


def _read_json(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


def _load_system_or_model(path):
    from .lti import LtiSystem
    from .model import L2ruModel
    d = _read_json(path)
    try:
        if "layers" in d:
            return "model", L2ruModel.from_dict(d), d
        return "system", LtiSystem.from_dict(d), d
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"malformed file {path}: {exc}") from None


def cmd_gen_data(cfg):
    """Generate a three-tank dataset (CSV plus JSON sidecar)."""
    from .threetank import generate_dataset, write_dataset
    if cfg.v_min > cfg.v_max:
        raise UsageError("v-min must not exceed v-max")
    if cfg.hold_min < 1 or cfg.hold_min > cfg.hold_max:
        raise UsageError("need 1 <= hold-min <= hold-max")
    if not 0 < cfg.train_fraction < 1:
        raise UsageError("train-fraction must lie in (0, 1)")
    ds = generate_dataset(n_sequences=cfg.n_sequences, length=cfg.length, Ts=cfg.ts,
                          noise_std=cfg.noise_std, v_range=(cfg.v_min, cfg.v_max),
                          seed=cfg.seed, hold=(cfg.hold_min, cfg.hold_max),
                          train_fraction=cfg.train_fraction)
    csv_path, meta_path = write_dataset(ds, cfg.out)
    n_seq, T, _ = ds.inputs.shape
    print(f"wrote {csv_path} and {meta_path}: {n_seq} sequence(s) x {T} samples, "
          f"3 outputs, split at {ds.split_index}, seed {cfg.seed}")
    return EXIT_OK


def cmd_train(cfg):
    """Train an L2RU model on a dataset."""
    from .errors import NaNLossError
    from .model import L2ruFreeParams, build, init_l2ru_params
    from .threetank import read_dataset
    from .training import TrainConfig, train

    if not Path(cfg.data).is_file():
        raise FileNotFoundError(f"dataset not found: {cfg.data}")
    if cfg.kind not in ("psi", "kappa"):
        raise UsageError("kind must be psi or kappa")
    ds = read_dataset(cfg.data)
    n_u, n_y = ds.inputs.shape[-1], ds.outputs.shape[-1]
    if cfg.init_params:
        params = L2ruFreeParams.from_dict(_read_json(cfg.init_params))
    else:
        try:
            params = init_l2ru_params(cfg.kind, n_u, n_y, cfg.width, cfg.layers,
                                      np.random.default_rng(cfg.seed), gamma_hat=cfg.gamma_hat,
                                      init=cfg.init, alpha=cfg.alpha, activation=cfg.activation)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    try:
        config = TrainConfig(epochs=cfg.epochs, learning_rate=cfg.lr, optimizer=cfg.optimizer,
                             batch_size=cfg.batch_size, truncation_length=cfg.truncation_length,
                             seed=cfg.seed, grad_check_interval=cfg.grad_check_interval,
                             output_headroom=cfg.output_headroom)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        trained, report = train(params, ds, config)
    except NaNLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        snap = Path(cfg.out_params).with_suffix(".nan_snapshot.json")
        snap.write_text(json.dumps({"epoch": exc.snapshot.get("epoch"),
                                    "params": exc.snapshot["params"].to_dict()}))
        print(f"diagnostic snapshot written to {snap}", file=sys.stderr)
        return EXIT_NUMERICAL

    model = build(trained)
    model_dict = model.to_dict()
    model_dict["input_scale"] = report.scaling.u_scale.tolist()
    model_dict["output_scale"] = report.scaling.y_scale.tolist()
    Path(cfg.out_model).write_text(json.dumps(model_dict))
    Path(cfg.out_params).write_text(json.dumps(trained.to_dict()))
    report.to_csv(cfg.report)
    report.to_json(Path(cfg.report).with_suffix(".json"))
    s = report.summary()
    print(f"trained {s['epochs']} epochs: val loss {s['initial_val_loss']:.6g} -> "
          f"{s['final_val_loss']:.6g}, certified at every epoch: {s['all_certified']}")
    return EXIT_OK if s["all_certified"] else EXIT_VIOLATION


def _certify_model(model, gamma):
    from .lti import bounded_real_check_strict, bounded_real_residual
    from .model import certified_gain
    ok = True
    for i, layer in enumerate(model.layers):
        cert = layer.certificate
        res = bounded_real_residual(layer.system, cert.P, cert.gamma)
        strict = bounded_real_check_strict(layer.system, cert.P, cert.gamma, margin=0.0)
        ok &= strict
        print(f"layer {i}: gamma {cert.gamma:.6g}, LMI residual {res:.3e}, "
              f"{'certified' if strict else 'NOT certified'}")
    bound = certified_gain(model)
    budget_ok = bound <= model.gamma_hat * (1 + 1e-9)
    print(f"budget product {bound:.12g} vs gamma_hat {model.gamma_hat:.12g}: "
          f"{'ok' if budget_ok else 'VIOLATED'}")
    ok &= budget_ok
    if gamma is not None:
        target_ok = model.gamma_hat <= gamma * (1 + 1e-9)
        print(f"requested bound {gamma:.6g}: {'ok' if target_ok else 'VIOLATED'}")
        ok &= target_ok
    return ok


def _certify_system(sys_, d, gamma):
    from .lti import bounded_real_check_strict, bounded_real_residual, lmi_feasible, spectral_radius
    rho = spectral_radius(sys_.A) if sys_.n_h else 0.0
    print(f"spectral radius {rho:.6g}")
    if gamma is None:
        gamma = d.get("gamma")
    if gamma is None:
        raise UsageError("a system file needs --gamma unless it stores one")
    if gamma <= 0:
        raise UsageError("gamma must be positive")
    if rho >= 1.0:
        print(f"not Schur stable: no finite L2 bound, gamma {gamma:.6g} NOT certified")
        return False
    P = np.asarray(d["P"], dtype=float) if "P" in d else lmi_feasible(sys_, gamma)
    if P is None:
        print(f"no storage matrix found: gamma {gamma:.6g} NOT certified")
        return False
    res = bounded_real_residual(sys_, P, gamma)
    ok = bounded_real_check_strict(sys_, P, gamma, margin=0.0)
    print(f"LMI residual {res:.3e}: gamma {gamma:.6g} {'certified' if ok else 'NOT certified'}")
    return ok


def cmd_certify(cfg):
    """Audit the L2-bound certificate of a model or system file."""
    what, obj, d = _load_system_or_model(cfg.file)
    if what == "model":
        ok = _certify_model(obj, cfg.gamma)
    else:
        ok = _certify_system(obj, d, cfg.gamma)
    print("CERTIFIED" if ok else "NOT CERTIFIED")
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_gain(cfg):
    """Print the H-infinity norm (L2 gain) of a system file."""
    from .errors import Unstable
    from .lti import hinf_norm_report
    what, sys_, _ = _load_system_or_model(cfg.file)
    if what != "system":
        raise UsageError("gain expects a system file; use export --layer for model layers")
    try:
        rep = hinf_norm_report(sys_, tol=cfg.tol)
    except Unstable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    print(f"{rep.value:.12g}")
    log.info("sweep %.12g, certified %s (%s)", rep.sweep, rep.certified, rep.source)
    return EXIT_OK


def _read_input_csv(path, n_in):
    from .threetank import read_dataset
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input not found: {path}")
    if path.with_suffix(".json").is_file():
        return read_dataset(path).inputs
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float)
    except ValueError:
        raise UsageError(f"{path}: expected numeric columns after a header row") from None
    if data.ndim != 2 or data.shape[1] != n_in:
        raise UsageError(f"{path}: expected {n_in} input column(s)")
    return data[None]


def cmd_simulate(cfg):
    """Simulate a model or system on an input CSV."""
    from .errors import StructureError
    from .lti import simulate_recursive, simulate_scan
    from .model import forward
    what, obj, d = _load_system_or_model(cfg.file)
    if cfg.method not in ("auto", "scan", "recursive"):
        raise UsageError("method must be auto, scan or recursive")
    n_in = obj.E.shape[1] if what == "model" else obj.n_d
    inputs = _read_input_csv(cfg.input, n_in)
    outs = []
    for u in inputs:
        if what == "model":
            u_s = u / np.asarray(d.get("input_scale", np.ones(n_in)))
            y = forward(obj, u_s) * np.asarray(d.get("output_scale", np.ones(obj.H.shape[0])))
        elif cfg.method == "recursive":
            y = simulate_recursive(obj, u)
        elif cfg.method == "scan":
            y = simulate_scan(obj, u)
        else:
            try:
                y = simulate_scan(obj, u)
            except StructureError:
                y = simulate_recursive(obj, u)
        outs.append(y)
    n_out = outs[0].shape[1]
    with open(cfg.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "k", *[f"y{i}" for i in range(n_out)]])
        for s, y in enumerate(outs):
            for k, row in enumerate(y):
                w.writerow([s, k, *map(repr, row.tolist())])
    print(f"wrote {cfg.out}: {len(outs)} sequence(s) x {outs[0].shape[0]} samples x {n_out} outputs")
    return EXIT_OK


def cmd_export(cfg):
    """Build a model from free parameters, or extract one layer's system."""
    from .model import L2ruFreeParams, L2ruModel, build
    d = _read_json(cfg.file)
    try:
        model = L2ruModel.from_dict(d) if "l2ru_schema" in d and "E" in d else \
            build(L2ruFreeParams.from_dict(d))
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"malformed file {cfg.file}: {exc}") from None
    if cfg.layer is None:
        out = model.to_dict()
        for key in ("input_scale", "output_scale"):
            if key in d:
                out[key] = d[key]
    else:
        if not 0 <= cfg.layer < len(model.layers):
            raise UsageError(f"layer must be in [0, {len(model.layers) - 1}]")
        layer = model.layers[cfg.layer]
        out = dict(layer.system.to_dict(), P=np.asarray(layer.certificate.P).tolist(),
                   gamma=layer.certificate.gamma)
    Path(cfg.out).write_text(json.dumps(out))
    print(f"wrote {cfg.out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "certify": cmd_certify,
    "gain": cmd_gain,
    "simulate": cmd_simulate,
    "export": cmd_export,
}


def main(argv=None):
    from .errors import ConvergenceError, DegenerateParameters, L2ruError
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceError, DegenerateParameters, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except L2ruError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except ValueError as exc:
        print(f"invalid setting: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
