"""Command line front end.

One subcommand per pipeline stage: generate or ingest data, cut it into
windows, train, evaluate, cross-validate, and run the three diagnostic
studies. Every table written here is a CSV that analysis.read_table can
load back; models and window sets are single .npz files.

Exit codes: 0 on success, 1 for any pipeline failure (one line on
stderr, `specfuse: <ErrorType>: <message>`), 2 for usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .analysis import (DEFAULT_LEVELS, HIST_BINS, NOISE_KINDS,
                       edge_histograms, noise_study, route_spectra,
                       write_table)
from .datapipe import (build_windows, default_synthetic_spec,
                       generate_synthetic, load_csv, load_windows, save_windows,
                       write_csv)
from .errors import ContractError, SpecfuseError
from .kvconfig import parse_kv_file
from .model import TsfConfig, count_flops, load_checkpoint, save_checkpoint
from .training import evaluate, loso_cv, stratified_split, train_model


# ----------------------------------------------------------------------
# shared plumbing

def load_dataset(path, window=None, overlap=None, sample_rate_hz=None):
    """Windows + class names from a raw CSV or a preprocessed archive.

    .npz paths are treated as window archives and used as-is (the window
    length is checked against `window` when one is expected); anything
    else is parsed as the flat CSV layout and segmented here.
    """
    if path.endswith(".npz"):
        windows, class_names = load_windows(path)
        if window is not None and windows and \
                windows[0].data.shape[-1] != window:
            raise ContractError(
                f"archive windows are {windows[0].data.shape[-1]} samples, "
                f"expected {window}")
        return windows, class_names
    if window is None:
        raise ContractError("raw CSV input needs a window length")
    recordings = load_csv(path, sample_rate_hz=sample_rate_hz)
    if overlap is None:
        overlap = window // 2
    return build_windows(recordings, window, overlap)


def load_model(path):
    """Checkpoint -> (model, stats, class_names); stats are mandatory."""
    model, stats, class_names = load_checkpoint(path)
    if stats is None:
        raise ContractError(
            f"{path} carries no normalization statistics; retrain or "
            "re-save the checkpoint with them")
    if class_names is None:
        class_names = [f"class{i}" for i in range(model.config.classes)]
    return model, stats, class_names


def _check_classes(config, class_names):
    if len(class_names) != config.classes:
        raise ContractError(
            f"config expects {config.classes} classes, data has "
            f"{len(class_names)}: {class_names}")


def write_report(path, result):
    rows = [[name, result.precision[i], result.recall[i], result.f1[i],
             int(result.support[i])]
            for i, name in enumerate(result.class_names)]
    write_table(path, ["class", "precision", "recall", "f1", "support"],
                rows)


def write_confusion(path, result):
    rows = [[name] + [int(v) for v in result.confusion[i]]
            for i, name in enumerate(result.class_names)]
    write_table(path, ["activity"] + list(result.class_names), rows)


def write_curve(path, curve):
    rows = [[pt["epoch"], pt["lr"], pt["tau"], pt["train_loss"],
             pt["val_accuracy"]] for pt in curve]
    write_table(path, ["epoch", "lr", "tau", "train_loss", "val_accuracy"],
                rows)


def _out(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


# ----------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    spec = default_synthetic_spec(
        subjects=args.subjects, trials_per_subject=args.trials,
        duration_s=args.duration, sample_rate_hz=args.rate, imus=args.imus)
    recordings = generate_synthetic(spec, args.seed)
    path = _out(args, "synthetic.csv")
    write_csv(path, recordings)
    print(f"wrote {path}: {len(recordings)} recordings, "
          f"{recordings[0].length} samples each")
    return 0


def cmd_preprocess(args):
    recordings = load_csv(args.data, sample_rate_hz=args.rate)
    overlap = args.overlap if args.overlap is not None else args.window // 2
    windows, class_names = build_windows(recordings, args.window, overlap)
    path = _out(args, "windows.npz")
    save_windows(path, windows, class_names)
    print(f"wrote {path}: {len(windows)} windows, "
          f"classes {', '.join(class_names)}")
    return 0


def cmd_train(args):
    config = TsfConfig.from_kv(parse_kv_file(args.config))
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    windows, class_names = load_dataset(args.data, config.window,
                                        args.overlap, args.rate)
    _check_classes(config, class_names)
    val_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, 0xF01D]))
    train_part, val_part = stratified_split(windows, config.val_fraction,
                                            val_rng)
    model, stats, curve = train_model(train_part, val_part, config,
                                      quiet=args.quiet)
    ckpt = _out(args, "checkpoint.npz")
    save_checkpoint(ckpt, model, stats=stats, class_names=class_names)
    write_curve(_out(args, "curve.csv"), curve)
    best = max(pt["val_accuracy"] for pt in curve)
    print(f"wrote {ckpt}: best val accuracy {best:.4f}, "
          f"{count_flops(model) / 1e6:.1f} MFLOPs per window")
    return 0


def cmd_eval(args):
    model, stats, class_names = load_model(args.model)
    windows, data_names = load_dataset(args.data, model.config.window,
                                       args.overlap, args.rate)
    if data_names and data_names != class_names:
        raise ContractError(
            f"checkpoint classes {class_names} but data says {data_names}")
    result = evaluate(model, windows, stats, class_names)
    write_report(_out(args, "report.csv"), result)
    write_confusion(_out(args, "confusion.csv"), result)
    print(f"macro F1 {result.macro_f1:.4f}  weighted F1 "
          f"{result.weighted_f1:.4f}  ({len(windows)} windows)")
    return 0


def cmd_loso(args):
    config = TsfConfig.from_kv(parse_kv_file(args.config))
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    windows, class_names = load_dataset(args.data, config.window,
                                        args.overlap, args.rate)
    _check_classes(config, class_names)
    results, agg = loso_cv(windows, config, class_names, runs=args.runs,
                           workers=args.workers)
    for result in results:
        write_report(_out(args, f"fold_{result.fold_id}_report.csv"), result)
        write_confusion(_out(args, f"fold_{result.fold_id}_confusion.csv"),
                        result)
    rows = [[r.fold_id, r.macro_f1, r.weighted_f1, r.flops,
             r.train_seconds] for r in results]
    write_table(_out(args, "summary.csv"),
                ["fold", "macro_f1", "weighted_f1", "flops",
                 "train_seconds"], rows)
    for result in results:
        print(f"fold {result.fold_id}: macro F1 {result.macro_f1:.4f}  "
              f"weighted F1 {result.weighted_f1:.4f}")
    print(f"macro F1 {agg['macro_mean']:.4f} +- {agg['macro_std']:.4f}  "
          f"weighted F1 {agg['weighted_mean']:.4f} +- "
          f"{agg['weighted_std']:.4f}  over {agg['runs']} run(s)")
    return 0


def _parse_levels(text):
    try:
        levels = tuple(float(part) for part in text.split(","))
    except ValueError:
        raise ContractError(f"bad noise levels {text!r}") from None
    if not levels:
        raise ContractError("need at least one noise level")
    return levels


def cmd_analyze_noise(args):
    model, stats, _ = load_model(args.model)
    windows, _ = load_dataset(args.data, model.config.window, args.overlap,
                              args.rate)
    kinds = tuple(args.kinds.split(",")) if args.kinds else NOISE_KINDS
    levels = _parse_levels(args.levels) if args.levels else DEFAULT_LEVELS
    rows = noise_study(model, stats, windows, kinds=kinds, levels=levels,
                       seed=args.seed)
    path = _out(args, "noise_response.csv")
    write_table(path, ["kind", "level", "weighted_f1", "attention_grav",
                       "attention_gyro"], rows)
    print(f"wrote {path}: {len(rows)} rows")
    return 0


def cmd_analyze_edges(args):
    model, stats, class_names = load_model(args.model)
    windows, _ = load_dataset(args.data, model.config.window, args.overlap,
                              args.rate)
    rows = edge_histograms(model, stats, windows, class_names,
                           bins=args.bins)
    path = _out(args, "edge_histograms.csv")
    write_table(path, ["activity", "edge_type", "bin_lo", "bin_hi", "count"],
                rows)
    print(f"wrote {path}: {len(rows)} rows")
    return 0


def cmd_analyze_routes(args):
    model, stats, _ = load_model(args.model)
    windows, _ = load_dataset(args.data, model.config.window, args.overlap,
                              args.rate)
    rows = route_spectra(model, stats, windows)
    path = _out(args, "route_spectra.csv")
    write_table(path, ["route", "freq_bin_hz", "mean_magnitude",
                       "sample_count"], rows)
    print(f"wrote {path}: {len(rows)} rows")
    return 0


# ----------------------------------------------------------------------
# parser

def _add_out_dir(parser):
    parser.add_argument("--out-dir", default=".",
                        help="directory for outputs (default: cwd)")


def _add_data(parser):
    parser.add_argument("--data", required=True,
                        help="raw CSV or preprocessed windows .npz")
    parser.add_argument("--overlap", type=int, default=None,
                        help="window overlap for raw CSV (default: half)")
    parser.add_argument("--rate", type=float, default=None,
                        help="sample rate override for raw CSV input")


def _add_model(parser):
    parser.add_argument("--model", required=True,
                        help="checkpoint .npz written by train")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="specfuse",
        description="multi-sensor activity recognition pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    defaults = default_synthetic_spec()

    p = sub.add_parser("synth", help="generate the synthetic benchmark CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=defaults.subjects)
    p.add_argument("--trials", type=int, default=defaults.trials_per_subject)
    p.add_argument("--duration", type=float, default=defaults.duration_s,
                   help="seconds per recording")
    p.add_argument("--rate", type=float, default=defaults.sample_rate_hz)
    p.add_argument("--imus", type=int, default=defaults.imus)
    _add_out_dir(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="cut a CSV into window archives")
    p.add_argument("--data", required=True, help="raw CSV recording file")
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--overlap", type=int, default=None,
                   help="default: half the window")
    p.add_argument("--rate", type=float, default=None)
    _add_out_dir(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="fit a model on one dataset")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--quiet", action="store_true",
                   help="suppress the per-epoch progress lines")
    _add_data(p)
    _add_out_dir(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add_model(p)
    _add_data(p)
    _add_out_dir(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loso", help="leave-one-subject-out cross validation")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    _add_data(p)
    _add_out_dir(p)
    p.set_defaults(func=cmd_loso)

    p = sub.add_parser("analyze-noise",
                       help="attention response to injected sensor noise")
    _add_model(p)
    _add_data(p)
    p.add_argument("--kinds", default=None,
                   help=f"comma list from {','.join(NOISE_KINDS)}")
    p.add_argument("--levels", default=None,
                   help="comma list of noise levels (default 0,0.5,1,2)")
    p.add_argument("--seed", type=int, default=0)
    _add_out_dir(p)
    p.set_defaults(func=cmd_analyze_noise)

    p = sub.add_parser("analyze-edges",
                       help="signed adjacency histograms per activity")
    _add_model(p)
    _add_data(p)
    p.add_argument("--bins", type=int, default=HIST_BINS)
    _add_out_dir(p)
    p.set_defaults(func=cmd_analyze_edges)

    p = sub.add_parser("analyze-routes",
                       help="input spectra grouped by wavelet route")
    _add_model(p)
    _add_data(p)
    _add_out_dir(p)
    p.set_defaults(func=cmd_analyze_routes)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SpecfuseError as exc:
        message = " ".join(str(exc).split())
        print(f"specfuse: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"specfuse: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
