"""Denoising convolutional autoencoder over 16x16x2 process-matrix images.

The encoder stacks three stride-2 convolutions (128, 64, 32 filters), each
followed by ReLU and batch normalization; the decoder mirrors it with
transposed convolutions (64, 128 filters and a 2-channel output) and a
sigmoid output so predictions live in the normalized [0, 1] range.  Spatial
sizes run 16 -> 8 -> 4 -> 2 -> 4 -> 8 -> 16.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .quantum import ProcessMatrix, hermitize, process_fidelity
from .tomography import (
    Dataset,
    chi_to_image,
    image_to_chi,
    normalize_components,
    records_to_arrays,
    rescale_components,
)


@dataclass
class AutoencoderSpec:
    kernel: int = 3
    encoder_filters: tuple = (128, 64, 32)
    decoder_filters: tuple = (64, 128)
    out_channels: int = 2
    stride: int = 2
    epochs: int = 200
    batch_size: int = 64
    patience: int = 20
    learning_rate: float = 1e-3
    lr_decay: float = 0.5  # applied when validation stalls for lr_patience epochs
    lr_patience: int = 5
    min_lr: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.kernel <= 7:
            raise ValueError("kernel must be in 1..7")
        mirror = tuple(reversed(self.encoder_filters[:-1]))
        if tuple(self.decoder_filters) != mirror:
            raise ValueError(f"decoder filters {self.decoder_filters} must mirror encoder {mirror}")


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)  # (epoch, train_mse, val_mse)
    best_epoch: int = -1
    best_val_mse: float = float("inf")
    stopped_epoch: int = -1
    wall_seconds: float = 0.0

    def summary(self) -> dict:
        return {
            "n_epochs": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_val_mse": self.best_val_mse,
            "stopped_epoch": self.stopped_epoch,
            "wall_seconds": round(self.wall_seconds, 3),
        }


def build(spec: AutoencoderSpec) -> nn.Model:
    """Assemble the conv/tconv stack of the denoiser (weights seeded by spec)."""
    rng = np.random.default_rng(spec.seed)
    layers = []
    channels = spec.out_channels
    for filters in spec.encoder_filters:
        layers.append(nn.Conv2D(spec.kernel, channels, filters, stride=spec.stride, rng=rng))
        layers.append(nn.ReLU())
        layers.append(nn.BatchNorm(filters))
        channels = filters
    for filters in spec.decoder_filters:
        layers.append(nn.ConvTranspose2D(spec.kernel, channels, filters, stride=spec.stride, rng=rng))
        layers.append(nn.ReLU())
        layers.append(nn.BatchNorm(filters))
        channels = filters
    layers.append(nn.ConvTranspose2D(spec.kernel, channels, spec.out_channels, stride=spec.stride, rng=rng))
    layers.append(nn.Sigmoid())
    return nn.Model(layers)


def _evaluate_mse(model: nn.Model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    for start in range(0, len(x), batch_size):
        pred = model.forward(x[start : start + batch_size], train=False)
        diff = pred - y[start : start + batch_size]
        total += float(np.sum(diff * diff))
    return total / y.size


def train(spec: AutoencoderSpec, dataset: Dataset) -> tuple:
    """Train on the normalized train split with early stopping on validation MSE.

    Returns ``(model, log)`` with the model restored to its best-validation
    checkpoint.  Fully deterministic for a fixed spec and dataset.
    """
    if dataset.stats is None:
        raise ValueError("dataset must be normalized before training")
    x_train, y_train = records_to_arrays(dataset.split_records("train"), dataset.stats)
    x_val, y_val = records_to_arrays(dataset.split_records("val"), dataset.stats)
    if len(x_val) == 0:
        raise ValueError("dataset has no validation records")
    model = build(spec)
    optimizer = nn.Adam(model.parameters(), lr=spec.learning_rate)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1,)))
    log = TrainingLog()
    best_state = model.copy_state()
    start_time = time.perf_counter()
    epochs_since_best = 0
    epochs_since_decay = 0
    for epoch in range(1, spec.epochs + 1):
        losses = []
        for idx in nn.iterate_minibatches(len(x_train), spec.batch_size, shuffle_rng):
            if len(idx) < 2:
                continue  # batchnorm needs at least two samples
            try:
                losses.append(nn.train_step(model, x_train[idx], y_train[idx], optimizer))
            except nn.TrainingDivergenceError as exc:
                raise nn.TrainingDivergenceError(f"epoch {epoch}: {exc}") from exc
        val_mse = _evaluate_mse(model, x_val, y_val)
        log.epochs.append((epoch, float(np.mean(losses)), val_mse))
        if val_mse < log.best_val_mse:
            log.best_val_mse = val_mse
            log.best_epoch = epoch
            best_state = model.copy_state()
            epochs_since_best = 0
            epochs_since_decay = 0
        else:
            epochs_since_best += 1
            epochs_since_decay += 1
            if epochs_since_best >= spec.patience:
                break
            if epochs_since_decay >= spec.lr_patience and optimizer.lr > spec.min_lr:
                optimizer.lr = max(optimizer.lr * spec.lr_decay, spec.min_lr)
                epochs_since_decay = 0
    log.stopped_epoch = log.epochs[-1][0]
    log.wall_seconds = time.perf_counter() - start_time
    model.load_state(best_state)
    return model, log


def denoise_images(model, images: np.ndarray) -> np.ndarray:
    """Inference-mode forward pass over a stack of normalized images."""
    return model.forward(images, train=False)


def denoise(model, chi_noisy, stats: tuple) -> ProcessMatrix:
    """Denoise one process matrix (normalize, forward, rescale, symmetrize)."""
    if stats is None:
        raise ValueError("normalization stats are required for denoising")
    if isinstance(chi_noisy, ProcessMatrix):
        arr, phi, ratio = chi_noisy.chi, chi_noisy.phi, chi_noisy.signal_ratio
    else:
        arr, phi, ratio = np.asarray(chi_noisy, dtype=complex), None, None
    img = normalize_components(chi_to_image(arr), stats)
    out = denoise_images(model, img[np.newaxis])[0]
    chi = image_to_chi(rescale_components(out, stats))
    return ProcessMatrix(chi=hermitize(chi), phi=phi, signal_ratio=ratio, label="denoised")


def denoise_records(model, records, stats: tuple, batch_size: int = 256) -> list:
    """Batched denoising of dataset records, preserving metadata."""
    images = np.stack([normalize_components(chi_to_image(r.noisy), stats) for r in records])
    out = []
    for start in range(0, len(images), batch_size):
        pred = denoise_images(model, images[start : start + batch_size])
        for local, rec in enumerate(records[start : start + batch_size]):
            chi = image_to_chi(rescale_components(pred[local], stats))
            out.append(
                ProcessMatrix(
                    chi=hermitize(chi),
                    phi=rec.phi,
                    signal_ratio=rec.signal_ratio,
                    label="denoised",
                )
            )
    return out


def mean_test_fidelity(model, dataset: Dataset, split: str = "test") -> float:
    records = dataset.split_records(split)
    denoised = denoise_records(model, records, dataset.stats)
    fids = [process_fidelity(d, r.target) for d, r in zip(denoised, records)]
    return float(np.mean(fids))


# ---------------------------------------------------------------------------
# kernel sweep

@dataclass
class SweepEntry:
    kernel: int
    val_mse: float
    test_mean_fidelity: float
    heatmap_paths: list = field(default_factory=list)


@dataclass
class SweepReport:
    entries: list
    best_k: int

    def to_json_dict(self) -> dict:
        return {
            "best_k": self.best_k,
            "entries": [
                {
                    "kernel": e.kernel,
                    "val_mse": e.val_mse,
                    "test_mean_fidelity": e.test_mean_fidelity,
                    "heatmap_paths": e.heatmap_paths,
                }
                for e in self.entries
            ],
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def select_best_k(val_mse_by_k: dict) -> int:
    """Smallest kernel among those minimizing validation MSE."""
    best = min(val_mse_by_k.values())
    return min(k for k, v in val_mse_by_k.items() if v == best)


def _train_one_kernel(args):
    spec, dataset, k = args
    model, log = train(replace(spec, kernel=k), dataset)
    return k, model, log


def kernel_sweep(
    dataset: Dataset,
    k_range=range(1, 8),
    base_spec: AutoencoderSpec | None = None,
    out_dir=None,
    workers: int | None = None,
) -> tuple:
    """Train one autoencoder per kernel size with identical seeds and data.

    Returns ``(report, models)``.  When ``out_dir`` is given, per-kernel
    difference heatmaps (theory minus denoised, plus the raw noisy
    reference) are written there.
    """
    ks = sorted(set(int(k) for k in k_range))
    if any(k < 1 or k > 7 for k in ks):
        raise ValueError("kernel range must lie in 1..7")
    if base_spec is None:
        base_spec = AutoencoderSpec()
    jobs = [(base_spec, dataset, k) for k in ks]
    results = {}
    if workers is not None and workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(processes=min(workers, len(jobs))) as pool:
            for k, model, log in pool.imap_unordered(_train_one_kernel, jobs):
                results[k] = (model, log)
    else:
        for job in jobs:
            k, model, log = _train_one_kernel(job)
            results[k] = (model, log)
    entries = []
    models = {}
    val_mse_by_k = {}
    for k in ks:
        model, log = results[k]
        models[k] = model
        val_mse_by_k[k] = log.best_val_mse
        entry = SweepEntry(kernel=k, val_mse=log.best_val_mse, test_mean_fidelity=mean_test_fidelity(model, dataset))
        if out_dir is not None:
            entry.heatmap_paths = _write_sweep_heatmaps(model, dataset, k, out_dir)
        entries.append(entry)
    report = SweepReport(entries=entries, best_k=select_best_k(val_mse_by_k))
    return report, models


def _write_sweep_heatmaps(model, dataset: Dataset, k: int, out_dir) -> list:
    import os

    from .reporting import diff_heatmap, write_heatmap

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    test = dataset.split_records("test")
    for ratio in dataset.ratios:
        recs = [r for r in test if abs(r.signal_ratio - ratio) < 1e-12]
        if not recs:
            continue
        rec = recs[0]
        den = denoise_records(model, [rec], dataset.stats)[0]
        stem = os.path.join(out_dir, f"diff_k{k}_r{ratio:g}")
        paths.extend(write_heatmap(diff_heatmap(rec.target, den), stem))
        # raw noisy-minus-theory reference column, shared by all kernels
        ref_stem = os.path.join(out_dir, f"diff_noisy_r{ratio:g}")
        if not os.path.exists(ref_stem + "_re.csv"):
            paths.extend(write_heatmap(diff_heatmap(rec.noisy, rec.target), ref_stem))
    return paths
