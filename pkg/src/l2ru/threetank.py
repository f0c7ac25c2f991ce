"""Three-tank system with recirculation: simulator and dataset generator.

Levels are in cm, cross-sections in cm^2, time in s.  Samples are levels at
the start of each sampling interval, so the first sample equals ``h0``.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TankParams",
    "Dataset",
    "tank_derivative",
    "simulate_tanks",
    "excitation",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
]


@dataclass(frozen=True)
class TankParams:
    A1: float = 38.0
    A2: float = 32.0
    A3: float = 21.0
    a1: float = 0.05
    a2: float = 0.03
    a3: float = 0.06
    k1: float = 0.32
    k2: float = 0.23
    k3: float = 0.52
    kc: float = 50.0
    g: float = 981.0

    def __post_init__(self):
        bad = [k for k, v in asdict(self).items() if not v > 0]
        if bad:
            raise ValueError(f"tank parameters must be positive: {bad}")


def tank_derivative(p, h, v):
    """Right-hand side of the level dynamics; ``h`` must be nonnegative."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("tank levels must be nonnegative (clamp before calling)")
    q1, q2, q3 = np.sqrt(2.0 * p.g * h)
    return np.array([
        -p.a1 / p.A1 * q1 + p.k1 * p.a3 / p.A1 * q3 + p.kc * v / p.A1,
        -p.a2 / p.A2 * q2 + p.k2 * p.a1 / p.A2 * q1,
        -p.a3 / p.A3 * q3 + p.k3 * p.a2 / p.A3 * q2,
    ])


def simulate_tanks(p, v, Ts=0.1, h0=None, substeps=4):
    """Sampled levels under the piecewise-constant inflow ``v``.

    Classical RK4 with ``substeps`` steps per sample; levels are clamped at
    zero after every substep (and stage arguments are clamped as well).
    """
    if not Ts > 0:
        raise ValueError("Ts must be positive")
    v = np.asarray(v, dtype=float).reshape(-1)
    h = np.zeros(3) if h0 is None else np.asarray(h0, dtype=float).copy()
    dt = Ts / substeps
    f = lambda x, vk: tank_derivative(p, np.maximum(x, 0.0), vk)  # noqa: E731
    out = np.empty((len(v), 3))
    for k, vk in enumerate(v):
        out[k] = h
        for _ in range(substeps):
            k1 = f(h, vk)
            k2 = f(h + 0.5 * dt * k1, vk)
            k3 = f(h + 0.5 * dt * k2, vk)
            k4 = f(h + dt * k3, vk)
            h = np.maximum(h + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0)
    return out


def excitation(length, rng, v_range=(10.0, 100.0), hold=(10, 50)):
    """Piecewise-constant random signal: hold lengths and levels uniform."""
    v = np.empty(length)
    k = 0
    while k < length:
        n = int(rng.integers(hold[0], hold[1] + 1))
        v[k:k + n] = rng.uniform(*v_range)
        k += n
    return v


@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray        # (n_sequences, T, n_u)
    outputs: np.ndarray       # (n_sequences, T, n_y)
    split_index: int
    noise_std: float = 0.0
    seed: int = None
    Ts: float = 0.1
    meta: dict = field(default_factory=dict)

    @property
    def train_inputs(self):
        return self.inputs[:, :self.split_index]

    @property
    def train_outputs(self):
        return self.outputs[:, :self.split_index]


def generate_dataset(p=None, n_sequences=1, length=2000, Ts=0.1, noise_std=0.1,
                     v_range=(10.0, 100.0), seed=0, hold=(10, 50), train_fraction=0.7):
    """Noisy input/output sequences with a contiguous train/validation split."""
    p = p or TankParams()
    if v_range[0] > v_range[1]:
        raise ValueError("v_range must satisfy min <= max")
    if length < 2 or n_sequences < 1:
        raise ValueError("need at least one sequence of length >= 2")
    children = np.random.SeedSequence(seed).spawn(n_sequences)
    inputs, outputs = [], []
    for child in children:
        rng = np.random.default_rng(child)
        v = excitation(length, rng, v_range, hold)
        h = simulate_tanks(p, v, Ts)
        if noise_std > 0:
            h = h + noise_std * rng.standard_normal(h.shape)
        inputs.append(v[:, None])
        outputs.append(h)
    meta = {"params": asdict(p), "v_range": list(v_range), "hold": list(hold),
            "train_fraction": train_fraction}
    return Dataset(np.stack(inputs), np.stack(outputs), int(round(train_fraction * length)),
                   float(noise_std), seed, float(Ts), meta)


def write_dataset(ds, csv_path, input_names=("v",), output_names=("h1", "h2", "h3")):
    """Write ``csv_path`` and a ``.json`` metadata sidecar next to it."""
    csv_path = Path(csv_path)
    n_seq, T, _ = ds.inputs.shape
    header = ["t", *input_names, *output_names, "split_tag", "sequence"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in range(n_seq):
            for k in range(T):
                tag = "train" if k < ds.split_index else "val"
                w.writerow([repr(round(k * ds.Ts, 12)), *map(repr, ds.inputs[s, k].tolist()),
                            *map(repr, ds.outputs[s, k].tolist()), tag, s])
    meta = dict(ds.meta, seed=ds.seed, noise_std=ds.noise_std, Ts=ds.Ts,
                length=T, n_sequences=n_seq, split_index=ds.split_index,
                time_column="t", input_columns=list(input_names),
                output_columns=list(output_names), split_column="split_tag",
                sequence_column="sequence")
    meta_path = csv_path.with_suffix(".json")
    meta_path.write_text(json.dumps(meta, indent=2))
    return csv_path, meta_path


def read_dataset(csv_path, meta_path=None):
    """Read any CSV whose column roles are declared in the metadata sidecar.

    Required metadata keys: ``input_columns`` and ``output_columns``.
    Optional: ``split_column`` (rows tagged ``train`` come first),
    ``split_index``, ``sequence_column``, ``Ts``, ``noise_std``, ``seed``.
    """
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".json")
    meta = json.loads(meta_path.read_text())
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError("empty dataset")
    seq_col = meta.get("sequence_column")
    groups = {}
    for row in rows:
        groups.setdefault(row[seq_col] if seq_col and seq_col in row else "0", []).append(row)
    ins, outs = [], []
    for rows_s in groups.values():
        ins.append([[float(r[c]) for c in meta["input_columns"]] for r in rows_s])
        outs.append([[float(r[c]) for c in meta["output_columns"]] for r in rows_s])
    first = next(iter(groups.values()))
    split = meta.get("split_index")
    split_col = meta.get("split_column")
    if split is None and split_col and split_col in first[0]:
        split = sum(1 for r in first if r[split_col] == "train")
    if split is None:
        split = int(round(0.7 * len(first)))
    known = {"seed", "noise_std", "Ts", "split_index"}
    return Dataset(np.array(ins, dtype=float), np.array(outs, dtype=float), int(split),
                   float(meta.get("noise_std", 0.0)), meta.get("seed"), float(meta.get("Ts", 1.0)),
                   {k: v for k, v in meta.items() if k not in known})
