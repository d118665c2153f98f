"""Feed-forward regression of the channel angle from process matrices.

The network is a dense trunk with one forked head per parameter to
estimate (a single fork for the control-phase channel).  Inputs are
flattened 16x16x2 normalized images; outputs are in degrees.  The
regressor is trained separately from the denoiser: it consumes the
denoiser's outputs (and theoretical matrices) but no gradients ever flow
between the two networks.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .autoencoder import TrainingLog, denoise_records
from .quantum import ProcessMatrix, fmt17
from .tomography import Dataset, chi_to_image, normalize_components

RESIDUE_GATE_DEGREES = 7.0


@dataclass
class FfnnSpec:
    input_dim: int = 512
    trunk_widths: tuple = (256, 128)
    head_widths: tuple = (64,)
    forks: int = 1
    epochs: int = 400
    batch_size: int = 64
    patience: int = 40
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.forks < 1:
            raise ValueError("fork count must be >= 1")


class ForkedRegressor:
    """Dense trunk feeding per-parameter head networks; outputs (B, forks)."""

    def __init__(self, trunk: nn.Model, heads: list):
        self.trunk = trunk
        self.heads = list(heads)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        h = self.trunk.forward(x, train=train)
        return np.concatenate([head.forward(h, train=train) for head in self.heads], axis=1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        dh = None
        for i, head in enumerate(self.heads):
            g = head.backward(grad[:, i : i + 1])
            dh = g if dh is None else dh + g
        return self.trunk.backward(dh)

    def _named(self, method: str) -> dict:
        out = {f"trunk.{k}": v for k, v in getattr(self.trunk, method)().items()}
        for i, head in enumerate(self.heads):
            out.update({f"head{i}.{k}": v for k, v in getattr(head, method)().items()})
        return out

    def parameters(self) -> dict:
        return self._named("parameters")

    def gradients(self) -> dict:
        return self._named("gradients")

    def state_arrays(self) -> dict:
        return self._named("state_arrays")

    def copy_state(self) -> dict:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def load_state(self, state: dict) -> None:
        self.trunk.load_state({k[len("trunk.") :]: v for k, v in state.items() if k.startswith("trunk.")})
        for i, head in enumerate(self.heads):
            prefix = f"head{i}."
            head.load_state({k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)})


def build_ffnn(spec: FfnnSpec) -> ForkedRegressor:
    rng = np.random.default_rng(spec.seed)
    trunk_layers = []
    width = spec.input_dim
    for w in spec.trunk_widths:
        trunk_layers.append(nn.Dense(width, w, rng=rng))
        trunk_layers.append(nn.ReLU())
        width = w
    heads = []
    for _ in range(spec.forks):
        head_layers = []
        hw = width
        for w in spec.head_widths:
            head_layers.append(nn.Dense(hw, w, rng=rng))
            head_layers.append(nn.ReLU())
            hw = w
        head_layers.append(nn.Dense(hw, 1, rng=rng))  # linear output, degrees
        heads.append(nn.Model(head_layers))
    return ForkedRegressor(nn.Model(trunk_layers), heads)


def _flatten_images(mats, stats) -> np.ndarray:
    return np.stack([normalize_components(chi_to_image(m), stats).reshape(-1) for m in mats])


def train_ffnn(spec: FfnnSpec, dataset: Dataset, ae_model) -> tuple:
    """Train the regressor on a 50/50 per-batch mix of theoretical and denoised inputs.

    The denoiser must already be trained; its weights are never touched.
    Early stopping tracks the MSE on denoised validation records.
    """
    if dataset.stats is None:
        raise ValueError("dataset must be normalized")
    train_records = dataset.split_records("train")
    val_records = dataset.split_records("val")
    denoised_train = denoise_records(ae_model, train_records, dataset.stats)
    denoised_val = denoise_records(ae_model, val_records, dataset.stats)
    x_den = _flatten_images([d.chi for d in denoised_train], dataset.stats)
    y_den = np.array([[np.degrees(r.phi)] for r in train_records])
    x_theory = _flatten_images([r.target.chi for r in train_records], dataset.stats)
    y_theory = y_den.copy()
    x_val = _flatten_images([d.chi for d in denoised_val], dataset.stats)
    y_val = np.array([[np.degrees(r.phi)] for r in val_records])

    model = build_ffnn(spec)
    optimizer = nn.Adam(model.parameters(), lr=spec.learning_rate)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1,)))
    log = TrainingLog()
    best_state = model.copy_state()
    half = max(1, spec.batch_size // 2)
    start_time = time.perf_counter()
    since_best = 0
    for epoch in range(1, spec.epochs + 1):
        den_order = shuffle_rng.permutation(len(x_den))
        theory_order = shuffle_rng.permutation(len(x_theory))
        losses = []
        for start in range(0, len(den_order), half):
            di = den_order[start : start + half]
            ti = theory_order[start : start + half]
            if len(di) == 0:
                continue
            xb = np.concatenate([x_den[di], x_theory[ti]])
            yb = np.concatenate([y_den[di], y_theory[ti]])
            losses.append(nn.train_step(model, xb, yb, optimizer))
        pred_val = model.forward(x_val, train=False)
        val_mse = float(np.mean((pred_val - y_val) ** 2))
        log.epochs.append((epoch, float(np.mean(losses)), val_mse))
        if val_mse < log.best_val_mse:
            log.best_val_mse = val_mse
            log.best_epoch = epoch
            best_state = model.copy_state()
            since_best = 0
        else:
            since_best += 1
            if since_best >= spec.patience:
                break
    log.stopped_epoch = log.epochs[-1][0]
    log.wall_seconds = time.perf_counter() - start_time
    model.load_state(best_state)
    return model, log


def predict_phi(model: ForkedRegressor, mats, stats) -> np.ndarray:
    """Predicted angles in degrees for a list of process matrices."""
    x = _flatten_images([m.chi if isinstance(m, ProcessMatrix) else m for m in mats], stats)
    return model.forward(x, train=False)[:, 0]


def extract_phi(model: ForkedRegressor, chi, stats) -> float:
    """Deterministic single-matrix angle estimate in degrees."""
    return float(predict_phi(model, [chi], stats)[0])


def snap_to_grid(value_deg: float, grid_deg) -> float:
    grid_deg = np.asarray(grid_deg, dtype=float)
    return float(grid_deg[np.argmin(np.abs(grid_deg - value_deg))])


# ---------------------------------------------------------------------------
# residue evaluation

@dataclass
class ResidueReport:
    rows: list  # (phi_true_deg, phi_pred_deg, residue_deg, signal_ratio, success)
    gate: float = RESIDUE_GATE_DEGREES
    success_rate: float = 0.0
    per_ratio: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "gate_degrees": self.gate,
            "success_rate": self.success_rate,
            "per_ratio_success": {f"{k:g}": v for k, v in self.per_ratio.items()},
            "n_records": len(self.rows),
        }

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("phi_true_deg,phi_pred_deg,residue_deg,signal_ratio,success_flag\n")
            for true, pred, res, ratio, ok in self.rows:
                fh.write(f"{fmt17(true)},{fmt17(pred)},{fmt17(res)},{fmt17(ratio)},{int(ok)}\n")

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def residue_report(model: ForkedRegressor, mats, stats, gate: float = RESIDUE_GATE_DEGREES) -> ResidueReport:
    """Residues (predicted minus true, degrees) for matrices carrying phi metadata."""
    mats = list(mats)
    if not mats:
        raise ValueError("empty slice")
    preds = predict_phi(model, mats, stats)
    rows = []
    for m, pred in zip(mats, preds):
        if m.phi is None:
            raise ValueError("matrix lacks phi metadata")
        true = float(np.degrees(m.phi))
        res = float(pred - true)
        ratio = float(m.signal_ratio) if m.signal_ratio is not None else float("nan")
        rows.append((true, float(pred), res, ratio, abs(res) <= gate))
    report = ResidueReport(rows=rows, gate=gate)
    report.success_rate = float(np.mean([r[4] for r in rows]))
    ratios = sorted({r[3] for r in rows})
    for ratio in ratios:
        sub = [r[4] for r in rows if r[3] == ratio]
        report.per_ratio[ratio] = float(np.mean(sub))
    return report


# ---------------------------------------------------------------------------
# serialization

def save_ffnn(model: ForkedRegressor, path, meta: dict | None = None) -> None:
    obj = {
        "schema_version": nn.SCHEMA_VERSION,
        "kind": "forked_regressor",
        "trunk": nn.model_to_dict(model.trunk),
        "heads": [nn.model_to_dict(h) for h in model.heads],
    }
    if meta:
        obj["meta"] = meta
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def load_ffnn(path) -> tuple:
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("kind") != "forked_regressor":
        raise ValueError("not a forked-regressor model file")
    trunk, _ = nn.model_from_dict(obj["trunk"])
    heads = [nn.model_from_dict(h)[0] for h in obj["heads"]]
    return ForkedRegressor(trunk, heads), obj.get("meta", {})
