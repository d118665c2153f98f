"""Command-line front end wiring the simulation/denoising pipeline.

Subcommands: gen, qpt, train-ae, sweep-kernel, denoise, train-ffnn,
extract, report.  Exit codes are stable API: 0 success, 2 configuration
error, 3 I/O failure, 4 counts-file parse failure, 5 missing prerequisite
artifact, 6 training divergence.

Every command writes a JSON run summary next to its artifacts.  All data
artifacts are byte-identical across reruns with identical inputs and
seeds; the summary's wall-clock timing field is the one documented
exception.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import autoencoder as ae
from . import extractor as ex
from . import figures, nn, reporting
from .config import ConfigError, RunConfig, config_to_dict, load_config
from .mle import mle_fit
from .quantum import ideal_chi, load_chi_csv, process_fidelity, save_chi_csv
from .tomography import (
    CountsParseError,
    chi_least_squares,
    generate_dataset,
    load_counts_csv,
    load_dataset,
    normalize,
    save_dataset,
    table_for_record,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PARSE = 4
EXIT_MISSING = 5
EXIT_DIVERGENCE = 6


class MissingPrerequisiteError(FileNotFoundError):
    """A required input artifact (dataset, model, matrix file) is absent."""


def _require(path, what: str) -> str:
    if path is None or not os.path.exists(path):
        raise MissingPrerequisiteError(f"missing {what}: {path}")
    return path


def _write_summary(path, command: str, seed, started: float, headline: dict) -> None:
    summary = {
        "schema_version": 1,
        "command": command,
        "master_seed": seed,
        "wall_seconds": round(time.perf_counter() - started, 3),
    }
    summary.update(headline)
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _say(args, message: str) -> None:
    if not getattr(args, "quiet", False):
        print(message)


def _resolve_threads(args, config: RunConfig) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("QPDN_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"QPDN_THREADS must be an integer, got {env!r}") from exc
    return config.threads


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    return config


def _parse_krange(text: str) -> list:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(tok) for tok in text.split(",") if tok]


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    config = _load_run_config(args)
    if args.instances is not None:
        config.instances = args.instances
    started = time.perf_counter()
    out_dir = args.out or os.path.join(config.out_dir, "dataset")
    dataset = generate_dataset(
        phis=config.phi_grid, instances=config.instances, ratios=config.ratios, seed=config.seed
    )
    dataset = normalize(dataset)
    save_dataset(dataset, out_dir)
    headline = {
        "records": len(dataset.records),
        "split_counts": {s: len(dataset.split_records(s)) for s in ("train", "val", "test")},
        "normalization": {"m": dataset.stats[0], "M": dataset.stats[1]},
        "out_dir": out_dir,
        "config": config_to_dict(config),
    }
    _write_summary(os.path.join(out_dir, "gen_summary.json"), "gen", config.seed, started, headline)
    _say(args, f"gen: wrote {len(dataset.records)} records to {out_dir}")
    return EXIT_OK


def cmd_qpt(args) -> int:
    config = _load_run_config(args)
    started = time.perf_counter()
    _require(args.counts, "counts file")
    table = load_counts_csv(args.counts)
    if table.counts is None:
        raise CountsParseError("file contains no measured counts", 2)
    stem = args.out or os.path.splitext(args.counts)[0] + f"_{args.method}"
    headline: dict = {"method": args.method, "counts_file": args.counts}
    if args.method == "linear":
        result = chi_least_squares(table)
    else:
        report = mle_fit(table, config.mle)
        result = report.chi_hat
        report.save_json(stem + "_report.json")
        headline.update(report.to_json_dict())
    if args.phi is not None:
        result.phi = args.phi
        headline["fidelity_vs_ideal"] = process_fidelity(result, ideal_chi(args.phi))
        headline["fidelity_deficit"] = 1.0 - headline["fidelity_vs_ideal"]
    save_chi_csv(result, stem + ".csv")
    headline["chi_file"] = stem + ".csv"
    _write_summary(stem + "_summary.json", "qpt", config.seed, started, headline)
    _say(args, f"qpt: wrote {stem}.csv")
    return EXIT_OK


def cmd_train_ae(args) -> int:
    config = _load_run_config(args)
    started = time.perf_counter()
    dataset = load_dataset(_require(args.data, "dataset directory"))
    if dataset.stats is None:
        dataset = normalize(dataset)
    spec = config.autoencoder
    if args.kernel is not None:
        import dataclasses

        spec = dataclasses.replace(spec, kernel=args.kernel)
    model, log = ae.train(spec, dataset)
    out = args.out or os.path.join(config.out_dir, "autoencoder.json")
    os.makedirs(os.path.dirname(os.path.abspath(out)) or ".", exist_ok=True)
    meta = {
        "normalization": {"m": dataset.stats[0], "M": dataset.stats[1]},
        "seed": spec.seed,
        "kernel": spec.kernel,
        "training_log": log.summary(),
    }
    nn.save_model(model, out, meta=meta)
    test_fid = ae.mean_test_fidelity(model, dataset)
    headline = {
        "model_file": out,
        "best_val_mse": log.best_val_mse,
        "epochs_run": log.stopped_epoch,
        "mean_test_fidelity": test_fid,
        "dataset_records": len(dataset.records),
    }
    _write_summary(os.path.splitext(out)[0] + "_summary.json", "train-ae", config.seed, started, headline)
    figures.save_training_png(log, os.path.splitext(out)[0] + "_training.png")
    _say(args, f"train-ae: best val MSE {log.best_val_mse:.3e}, test fidelity {test_fid:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_run_config(args)
    started = time.perf_counter()
    dataset = load_dataset(_require(args.data, "dataset directory"))
    if dataset.stats is None:
        dataset = normalize(dataset)
    out_dir = args.out or os.path.join(config.out_dir, "sweep")
    os.makedirs(out_dir, exist_ok=True)
    ks = _parse_krange(args.k)
    workers = _resolve_threads(args, config)
    report, _ = ae.kernel_sweep(dataset, ks, base_spec=config.autoencoder, out_dir=out_dir, workers=workers)
    report.save_json(os.path.join(out_dir, "sweep_report.json"))
    figures.save_sweep_png(report, os.path.join(out_dir, "sweep.png"))
    headline = {
        "best_k": report.best_k,
        "val_mse_by_k": {str(e.kernel): e.val_mse for e in report.entries},
        "test_fidelity_by_k": {str(e.kernel): e.test_mean_fidelity for e in report.entries},
        "out_dir": out_dir,
    }
    _write_summary(os.path.join(out_dir, "sweep_summary.json"), "sweep-kernel", config.seed, started, headline)
    _say(args, f"sweep-kernel: best k = {report.best_k}")
    return EXIT_OK


def _load_ae_model(path):
    model, meta = nn.load_model(_require(path, "autoencoder model"))
    stats_obj = meta.get("normalization")
    if stats_obj is None:
        raise MissingPrerequisiteError(f"model {path} lacks normalization stats")
    return model, (float(stats_obj["m"]), float(stats_obj["M"]))


def cmd_denoise(args) -> int:
    config = _load_run_config(args)
    started = time.perf_counter()
    model, stats = _load_ae_model(args.model)
    noisy = load_chi_csv(_require(args.chi, "chi matrix file"))
    result = ae.denoise(model, noisy, stats)
    out = args.out or os.path.splitext(args.chi)[0] + "_denoised.csv"
    save_chi_csv(result, out)
    headline = {"chi_file": out}
    if noisy.phi is not None:
        headline["fidelity_vs_ideal"] = process_fidelity(result, ideal_chi(noisy.phi))
    _write_summary(os.path.splitext(out)[0] + "_summary.json", "denoise", config.seed, started, headline)
    _say(args, f"denoise: wrote {out}")
    return EXIT_OK


def cmd_train_ffnn(args) -> int:
    config = _load_run_config(args)
    started = time.perf_counter()
    dataset = load_dataset(_require(args.data, "dataset directory"))
    if dataset.stats is None:
        dataset = normalize(dataset)
    model_ae, stats = _load_ae_model(args.ae_model)
    ffnn, log = ex.train_ffnn(config.ffnn, dataset, model_ae)
    out = args.out or os.path.join(config.out_dir, "ffnn.json")
    os.makedirs(os.path.dirname(os.path.abspath(out)) or ".", exist_ok=True)
    meta = {
        "normalization": {"m": dataset.stats[0], "M": dataset.stats[1]},
        "seed": config.ffnn.seed,
        "training_log": log.summary(),
    }
    ex.save_ffnn(ffnn, out, meta=meta)
    headline = {"model_file": out, "best_val_mse_deg2": log.best_val_mse, "epochs_run": log.stopped_epoch}
    _write_summary(os.path.splitext(out)[0] + "_summary.json", "train-ffnn", config.seed, started, headline)
    figures.save_training_png(log, os.path.splitext(out)[0] + "_training.png")
    _say(args, f"train-ffnn: best val MSE {log.best_val_mse:.3f} deg^2")
    return EXIT_OK


def cmd_extract(args) -> int:
    config = _load_run_config(args)
    started = time.perf_counter()
    ffnn, meta = ex.load_ffnn(_require(args.ffnn, "FFNN model"))
    stats_obj = meta.get("normalization")
    if stats_obj is None:
        raise MissingPrerequisiteError("FFNN model lacks normalization stats")
    stats = (float(stats_obj["m"]), float(stats_obj["M"]))
    chi = load_chi_csv(_require(args.chi, "chi matrix file"))
    pipeline = "direct"
    if args.ae_model:
        model_ae, ae_stats = _load_ae_model(args.ae_model)
        chi = ae.denoise(model_ae, chi, ae_stats)
        pipeline = "denoise+extract"
    phi_deg = ex.extract_phi(ffnn, chi, stats)
    grid_deg = [float(np.degrees(v)) for v in config.phi_grid]
    snapped = ex.snap_to_grid(phi_deg, grid_deg)
    headline = {
        "phi_degrees": phi_deg,
        "phi_snapped_degrees": snapped,
        "pipeline": pipeline,
    }
    if chi.phi is not None:
        headline["phi_true_degrees"] = float(np.degrees(chi.phi))
        headline["residue_degrees"] = phi_deg - headline["phi_true_degrees"]
    out = args.out or os.path.splitext(args.chi)[0] + "_phi"
    _write_summary(out + "_summary.json", "extract", config.seed, started, headline)
    _say(args, f"extract: phi = {phi_deg:.2f} deg (snap {snapped:.1f})")
    return EXIT_OK


def cmd_report(args) -> int:
    config = _load_run_config(args)
    started = time.perf_counter()
    dataset = load_dataset(_require(args.data, "dataset directory"))
    if dataset.stats is None:
        dataset = normalize(dataset)
    model_ae, stats = _load_ae_model(args.ae_model)
    out_dir = args.out or os.path.join(config.out_dir, "report")
    os.makedirs(out_dir, exist_ok=True)
    headline: dict = {"out_dir": out_dir}

    # difference heatmaps for one sample test record per signal level
    sample_phi = 5 * np.pi / 3 if any(abs(p - 5 * np.pi / 3) < 1e-9 for p in dataset.phi_grid) else dataset.phi_grid[0]
    for ratio in dataset.ratios:
        recs = dataset.slice(split="test", phi=float(sample_phi), ratio=ratio)
        if not recs:
            continue
        rec = recs[0]
        den = ae.denoise_records(model_ae, [rec], stats)[0]
        for tag, hm in (
            ("noisy", reporting.diff_heatmap(rec.noisy, rec.target)),
            ("denoised", reporting.diff_heatmap(den, rec.target)),
        ):
            stem = os.path.join(out_dir, f"diff_{tag}_r{ratio:g}")
            reporting.write_heatmap(hm, stem)
            figures.save_heatmap_png(hm, stem + ".png", title=f"{tag} - theory, r={ratio:g}")

    # fidelity table on the test split at the requested signal level
    entries = []
    ratio = args.ratio
    test = [r for r in dataset.split_records("test") if abs(r.signal_ratio - ratio) < 1e-12]
    denoised = ae.denoise_records(model_ae, test, stats)
    for rec, den in zip(test, denoised):
        entries.append((rec.phi, "noisy", process_fidelity(rec.noisy, rec.target)))
        entries.append((rec.phi, "denoised", process_fidelity(den, rec.target)))
    methods = ["noisy", "denoised"]
    if args.with_mle:
        for rec in test:
            fit = mle_fit(table_for_record(dataset, rec), config.mle)
            entries.append((rec.phi, "mle", process_fidelity(fit.chi_hat, rec.target)))
        methods.insert(1, "mle")
    table = reporting.fidelity_table(entries, methods=methods)
    table.save_csv(os.path.join(out_dir, "fidelity_table.csv"))
    with open(os.path.join(out_dir, "fidelity_table.txt"), "w") as fh:
        fh.write(table.render_text())
    figures.save_fidelity_png(table, os.path.join(out_dir, "fidelity_table.png"))
    headline["fidelity_table"] = {
        m: {f"{np.degrees(p):.0f}": table.cell(p, m)[0] for p in table.phis} for m in methods
    }

    # residue study over the full test split
    if args.ffnn:
        ffnn, _ = ex.load_ffnn(_require(args.ffnn, "FFNN model"))
        all_test = dataset.split_records("test")
        den_all = ae.denoise_records(model_ae, all_test, stats)
        rep = ex.residue_report(ffnn, den_all, stats)
        rep.save_csv(os.path.join(out_dir, "residues.csv"))
        rep.save_json(os.path.join(out_dir, "residues_summary.json"))
        figures.save_residue_png(rep, os.path.join(out_dir, "residues.png"))
        headline["residue_success_rate"] = rep.success_rate
        headline["residue_per_ratio"] = {f"{k:g}": v for k, v in rep.per_ratio.items()}

    _write_summary(os.path.join(out_dir, "report_summary.json"), "report", config.seed, started, headline)
    _say(args, f"report: artifacts in {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--out", help="output path (file or directory, command-specific)")
    common.add_argument("--threads", type=int, help="worker processes (QPDN_THREADS fallback)")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(prog="qpdn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="simulate and write the noisy dataset")
    p.add_argument("--instances", type=int, help="instances per (phi, ratio) cell")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("qpt", parents=[common], help="reconstruct chi from a counts file")
    p.add_argument("--counts", required=True, help="counts CSV file")
    p.add_argument("--method", choices=("linear", "mle"), default="linear")
    p.add_argument("--phi", type=float, help="known channel angle (radians) for fidelity reporting")
    p.set_defaults(func=cmd_qpt)

    p = sub.add_parser("train-ae", parents=[common], help="train the denoising autoencoder")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--kernel", type=int, help="kernel size override")
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("sweep-kernel", parents=[common], help="train one autoencoder per kernel size")
    p.add_argument("--data", required=True)
    p.add_argument("--k", default="1..7", help="kernel sizes, e.g. 1..7 or 2,3")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("denoise", parents=[common], help="denoise a chi matrix file")
    p.add_argument("--model", required=True, help="trained autoencoder JSON")
    p.add_argument("--chi", required=True, help="input chi CSV")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("train-ffnn", parents=[common], help="train the parameter regressor")
    p.add_argument("--data", required=True)
    p.add_argument("--ae-model", required=True, dest="ae_model")
    p.set_defaults(func=cmd_train_ffnn)

    p = sub.add_parser("extract", parents=[common], help="extract phi from a chi matrix")
    p.add_argument("--ffnn", required=True, help="trained FFNN JSON")
    p.add_argument("--chi", required=True)
    p.add_argument("--ae-model", dest="ae_model", help="denoise first with this autoencoder")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("report", parents=[common], help="heatmaps, fidelity table, residue study")
    p.add_argument("--data", required=True)
    p.add_argument("--ae-model", required=True, dest="ae_model")
    p.add_argument("--ffnn", help="FFNN model for the residue study")
    p.add_argument("--ratio", type=float, default=1.0, help="signal level of the fidelity table")
    p.add_argument("--with-mle", action="store_true", dest="with_mle", help="add (slow) MLE column")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CountsParseError as exc:
        print(f"counts parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except MissingPrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except nn.TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
