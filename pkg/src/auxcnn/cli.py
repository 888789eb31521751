"""Command-line entry points.

Verbs: ``synth`` (write a synthetic dataset), ``train`` (repeated runs plus
an aggregate report), ``evaluate`` (metrics for a checkpoint on a split),
``gradcheck`` (finite-difference suite), ``reconstruct`` (side-by-side
original/reconstruction dumps), ``compare`` (mode matrix with one-sided
t-tests against a baseline mode). Exit codes: 0 success, 2 config error,
3 numeric failure, 4 I/O error. ``AUXCNN_THREADS`` caps how many repeats
run as parallel worker processes.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, build_config, load_config
from .data import save_dataset, split_dataset, synthetic_image_seeds, write_pgm
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .evaluation import (
    METRIC_NAMES,
    MetricsReport,
    aggregate_runs,
    roc_curve,
    welch_ttest_one_sided,
    write_metrics_files,
    write_roc_csv,
)
from .networks import build_bundle
from .training import evaluate_bundle, load_checkpoint, train
from .verification import format_rows, loss_suite, primitive_suite

TTEST_METRICS = ("macro_precision", "macro_sensitivity", "macro_specificity", "macro_f1")


def _mode_dirname(mode: str) -> str:
    return "mode_" + "".join(c if c.isalnum() else "_" for c in mode).strip("_")


def _worker_count(repeats: int) -> int:
    try:
        cap = int(os.environ.get("AUXCNN_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, repeats))


# ---------------------------------------------------------------------------
# single repeat (also the process-pool worker)
# ---------------------------------------------------------------------------

def run_single_repeat(raw_values: dict, mode: str, seed: int, run_dir: str) -> dict:
    """Train one repeat, evaluate its best checkpoint on the test split and
    write all per-run artifacts. Returns the flat test metrics."""
    cfg = build_config(raw_values)
    full = cfg.load_full_dataset()
    train_ds, val_ds, test_ds = split_dataset(full, cfg.split_spec(seed))
    fcfg, rcfg, dcfg = cfg.network_configs(mode)
    bundle = build_bundle(fcfg, cfg.class_count, rcfg, dcfg)
    tcfg = cfg.train_config(mode, seed)
    run_path = Path(run_dir)
    run_path.mkdir(parents=True, exist_ok=True)
    (run_path / "config.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in sorted(raw_values.items()))
        + f"# resolved: mode = {mode}, seed = {seed}\n"
    )
    result = train(tcfg, bundle, train_ds, val_ds, cfg.augment_config(), run_path)
    load_checkpoint(result.checkpoint_path, bundle.store)
    _, report, roc_data = evaluate_bundle(bundle, test_ds)
    write_metrics_files(report, run_path)
    if roc_data is not None:
        points = roc_curve(roc_data[0], roc_data[1])
        write_roc_csv(points, run_path / "roc.csv")
    if cfg.figures:
        from . import report as figs
        figs.render_training_curves(run_path / "train_log.csv",
                                    run_path / "training_curves.png")
        figs.render_validation_curve(result.epoch_records,
                                     run_path / "validation.png")
        if roc_data is not None:
            figs.render_roc(points, run_path / "roc.png", auc=report.auc)
    return report.flat()


def _run_repeats(cfg: ExperimentConfig, mode: str, out_root: Path) -> list[MetricsReport]:
    jobs = []
    for r in range(cfg.repeats):
        run_dir = out_root / f"run_{r}"
        jobs.append((cfg.raw, mode, cfg.seed + r, str(run_dir)))
    workers = _worker_count(cfg.repeats)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_single_repeat, *job) for job in jobs]
            for fut in futures:
                fut.result()
    else:
        for job in jobs:
            run_single_repeat(*job)
    reports = []
    for r in range(cfg.repeats):
        with open(out_root / f"run_{r}" / "metrics.json") as fh:
            reports.append(MetricsReport.from_dict(json.load(fh)))
    return reports


def _write_aggregate(reports, out_dir: Path, stem="aggregate"):
    agg = aggregate_runs(reports)
    with open(out_dir / f"{stem}.json", "w") as fh:
        json.dump(agg.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean", "std"])
        for key in agg.mean:
            writer.writerow([key, repr(agg.mean[key]), repr(agg.std[key])])
    return agg


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig) -> Path:
    if cfg.source != "synthetic":
        raise ConfigError("synth requires data.source = synthetic")
    out = Path(cfg.output) / "dataset"
    ds = cfg.load_full_dataset()
    save_dataset(ds, out, synthetic_image_seeds(ds, cfg.seed))
    counts = "/".join(map(str, ds.per_class_counts))
    print(f"wrote {len(ds)} images (per-class counts {counts}) to {out}")
    return out


def cmd_train(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    reports = _run_repeats(cfg, cfg.mode, out)
    agg = _write_aggregate(reports, out)
    for key in sorted(agg.mean):
        print(f"{key}: {agg.mean[key]:.4f} +/- {agg.std[key]:.4f}")
    return out


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str, split: str, out_dir) -> Path:
    full = cfg.load_full_dataset()
    train_ds, val_ds, test_ds = split_dataset(full, cfg.split_spec())
    ds = {"train": train_ds, "validation": val_ds, "test": test_ds}[split]
    fcfg, rcfg, dcfg = cfg.network_configs()
    bundle = build_bundle(fcfg, cfg.class_count, rcfg, dcfg)
    load_checkpoint(checkpoint, bundle.store)
    _, report, roc_data = evaluate_bundle(bundle, ds)
    out = Path(out_dir)
    write_metrics_files(report, out)
    if roc_data is not None:
        points = roc_curve(roc_data[0], roc_data[1])
        write_roc_csv(points, out / "roc.csv")
        if cfg.figures:
            from . import report as figs
            figs.render_roc(points, out / "roc.png", auc=report.auc)
    print(f"{split} accuracy {report.accuracy:.4f}, macro F1 {report.macro['f1']:.4f}"
          + (f", AUC {report.auc:.4f}" if report.auc is not None else ""))
    return out


def cmd_gradcheck(seed: int) -> bool:
    prim = primitive_suite(seeds=(seed, seed + 1, seed + 2))
    loss = loss_suite(seeds=(seed, seed + 1, seed + 2))
    for line in format_rows(prim + loss):
        print(line)
    ok = all(r[3] for r in prim + loss)
    print(f"gradient suite: {'PASS' if ok else 'FAIL'} "
          f"({len(prim)} primitive cases, {len(loss)} loss cases)")
    return ok


def cmd_reconstruct(cfg: ExperimentConfig, checkpoint: str, out_dir, per_class: int) -> Path:
    if cfg.mode not in ("+rnet", "+rnet+dnet"):
        raise ConfigError(f"mode {cfg.mode!r} has no R-Net; nothing to reconstruct")
    full = cfg.load_full_dataset()
    _, _, test_ds = split_dataset(full, cfg.split_spec())
    fcfg, rcfg, dcfg = cfg.network_configs()
    bundle = build_bundle(fcfg, cfg.class_count, rcfg, dcfg)
    load_checkpoint(checkpoint, bundle.store)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .data import prepare_eval_image
    chosen = []
    for k in range(cfg.class_count):
        members = [it for it in test_ds.items if it.class_label == k]
        chosen.extend(sorted(members, key=lambda it: it.source_id)[:per_class])
    for item in chosen:
        x = prepare_eval_image(item.pixels, cfg.image_size)
        feats = bundle.fnet.forward(x[None, None].astype(bundle.store.dtype), mode="eval")
        xhat = bundle.rnet.forward(feats, mode="eval")[0, 0]
        pair = np.concatenate([np.clip(x, 0, 1), np.clip(xhat, 0, 1)], axis=1)
        write_pgm(out / f"{item.source_id}.pgm", pair)
    print(f"wrote {len(chosen)} side-by-side dumps to {out}")
    return out


def cmd_compare(cfg: ExperimentConfig) -> Path:
    modes = cfg.compare_modes
    if len(modes) < 2:
        raise ConfigError("compare needs at least 2 modes in compare.modes")
    if cfg.compare_baseline not in modes:
        raise ConfigError("compare.baseline must be one of compare.modes")
    if cfg.repeats < 2:
        raise ConfigError("compare needs repeats >= 2 for the t-tests")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    per_mode_reports: dict[str, list[MetricsReport]] = {}
    for mode in modes:
        per_mode_reports[mode] = _run_repeats(cfg, mode, out / _mode_dirname(mode))
    table = {mode: aggregate_runs(reps) for mode, reps in per_mode_reports.items()}
    with open(out / "table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "metric", "mean", "std"])
        for mode in modes:
            agg = table[mode]
            for key in agg.mean:
                writer.writerow([mode, key, repr(agg.mean[key]), repr(agg.std[key])])
    base_vals = {
        m: [r.flat()[m] for r in per_mode_reports[cfg.compare_baseline]]
        for m in TTEST_METRICS
    }
    with open(out / "ttests.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mode", "baseline", "t", "p_one_sided"])
        for mode in modes:
            if mode == cfg.compare_baseline:
                continue
            for metric in TTEST_METRICS:
                vals = [r.flat()[metric] for r in per_mode_reports[mode]]
                t, p = welch_ttest_one_sided(vals, base_vals[metric])
                writer.writerow([metric, mode, cfg.compare_baseline, repr(t), repr(p)])
    if cfg.figures:
        from . import report as figs
        figs.render_mode_comparison(table, list(TTEST_METRICS), out / "comparison.png")
    for mode in modes:
        agg = table[mode]
        print(f"{mode}: macro F1 {agg.mean['macro_f1']:.4f} +/- {agg.std['macro_f1']:.4f}")
    return out


# ---------------------------------------------------------------------------
# argument parsing / dispatch
# ---------------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="auxcnn",
        description="Adversarial auxiliary-network classification framework",
    )
    parser.add_argument("--config", help="experiment config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--deterministic", action="store_true",
                        help="force deterministic single-threaded execution")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("synth", help="generate a synthetic dataset directory")
    sub.add_parser("train", help="train with repeats and aggregate the metrics")
    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("train", "validation", "test"),
                        default="test")
    p_eval.add_argument("--out", help="output directory (default: <output>/evaluation)")
    sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_rec = sub.add_parser("reconstruct", help="dump original/reconstruction pairs")
    p_rec.add_argument("--checkpoint", required=True)
    p_rec.add_argument("--per-class", type=int, default=4)
    p_rec.add_argument("--out", help="output directory (default: <output>/reconstructions)")
    sub.add_parser("compare", help="run the mode matrix and t-tests")
    return parser


def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.deterministic:
        overrides["deterministic"] = "true"
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "gradcheck":
            seed = args.seed if args.seed is not None else 0
            return 0 if cmd_gradcheck(seed) else 3
        cfg = _load(args)
        if args.verb == "synth":
            cmd_synth(cfg)
        elif args.verb == "train":
            cmd_train(cfg)
        elif args.verb == "evaluate":
            out = args.out or str(Path(cfg.output) / "evaluation")
            cmd_evaluate(cfg, args.checkpoint, args.split, out)
        elif args.verb == "reconstruct":
            out = args.out or str(Path(cfg.output) / "reconstructions")
            cmd_reconstruct(cfg, args.checkpoint, out, args.per_class)
        elif args.verb == "compare":
            cmd_compare(cfg)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, DataError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
