"""Command-line entry point: ``ropnet <verb> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format/shape error,
3 numeric error.  Diagnostics go to stderr; results go to files or stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numba
import numpy as np

from .data import (
    AUGMENT_OPS,
    augment_dataset,
    clean_manifest,
    load_ppm,
    prepare,
    read_manifest,
    split,
    synth_generate,
    write_manifest,
)
from .errors import NumericError, ParameterError, RopNetError
from .model import (
    SUPPORTED_INPUT_SIZES,
    build_custom_rop_net,
    build_mobilenet_like,
    count_parameters,
    forward,
    load_model,
    save_model,
)
from .runtime import MODES, bench_model, export_bench_csv, normalize_reports
from .training import TrainConfig, evaluate, export_history, train, training_records
from .voting import evaluate_grouped, export_groups, vote

THREADS_ENV = "ROPNET_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_MANIFEST = "data/manifest.csv"
DEFAULT_MODEL = "data/model.ropm"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _fraction(text):
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1), got {text}")
    return value


def _unit(text):
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {text}")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def _ops(text):
    ops = [op.strip() for op in text.split(",") if op.strip()]
    bad = [op for op in ops if op not in AUGMENT_OPS]
    if not ops or bad:
        raise argparse.ArgumentTypeError(f"choose from {','.join(AUGMENT_OPS)}; got {text!r}")
    return ops


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    g.add_argument("--threads", type=_positive_int, default=None,
                   help=f"worker threads for kernels (default: ${THREADS_ENV} or all cores)")
    g.add_argument("--deterministic", action="store_true", help="force a single worker thread")
    g.add_argument("--dry-run", action="store_true", help="validate inputs and flags without writing anything")

    parser = _Parser(prog="ropnet", description="Train, evaluate and benchmark ROP fundus-image classifiers.",
                     epilog=f"Environment: {THREADS_ENV} sets the default thread count.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, parents=[common], description=help_text)

    def model_args(p):
        p.add_argument("--model", default=DEFAULT_MODEL, help=f"model file (default {DEFAULT_MODEL})")

    def arch_args(p):
        p.add_argument("--arch", choices=("custom", "mobilenet"), default="custom")
        p.add_argument("--width", type=float, default=1.0, help="width multiplier (custom net; default 1.0)")
        p.add_argument("--input-size", type=int, choices=SUPPORTED_INPUT_SIZES, default=64)

    p = add("synth", "generate a synthetic fundus dataset")
    p.add_argument("--patients", type=_positive_int, default=50)
    p.add_argument("--images-per-eye", type=_positive_int, default=3)
    p.add_argument("--positive-rate", type=_unit, default=0.5)
    p.add_argument("--quality-mix", type=_unit, default=0.2, help="fraction of low-quality images (default 0.2)")
    p.add_argument("--out-dir", default="data", help="output directory (default data)")

    p = add("clean", "drop corrupt, mis-sized, mislabeled and duplicate rows")
    p.add_argument("--manifest", default=DEFAULT_MANIFEST)
    p.add_argument("--out", help="cleaned manifest path (default: overwrite --manifest)")
    p.add_argument("--report", help="write the rejection report as CSV")

    p = add("augment", "write augmented copies of every image")
    p.add_argument("--manifest", default=DEFAULT_MANIFEST)
    p.add_argument("--ops", type=_ops, required=True, help=f"comma-separated subset of {','.join(AUGMENT_OPS)}")
    p.add_argument("--out-dir", default="data/augmented")
    p.add_argument("--out", help="augmented manifest path (default <out-dir>/manifest.csv)")

    p = add("split", "assign (patient, eye) groups to train/test")
    p.add_argument("--manifest", default=DEFAULT_MANIFEST)
    p.add_argument("--test-fraction", type=_fraction, default=0.2)
    p.add_argument("--out", help="output manifest (default: overwrite --manifest)")

    p = add("build", "write a freshly initialized model file")
    arch_args(p)
    p.add_argument("--out", default=DEFAULT_MODEL)

    p = add("train", "train a model on the manifest's train split")
    p.add_argument("--manifest", default=DEFAULT_MANIFEST)
    arch_args(p)
    p.add_argument("--init", help="start from this model file instead of a fresh initialization")
    p.add_argument("--epochs", type=_positive_int, default=100)
    p.add_argument("--batch", type=_positive_int, default=32)
    p.add_argument("--lr", type=_positive_float, default=1e-3)
    p.add_argument("--weight-low", type=_positive_float, default=2.0, help="sampling weight of low-quality images")
    p.add_argument("--weight-high", type=_positive_float, default=1.0)
    p.add_argument("--fine-tune", action="store_true", help="train on every row; no validation statistics")
    p.add_argument("--model-out", default=DEFAULT_MODEL)
    p.add_argument("--history-out", default="data/history.csv")

    for name, text in (("eval", "image-level metrics"), ("vote-eval", "eye-level metrics after majority voting")):
        p = add(name, text)
        p.add_argument("--manifest", default=DEFAULT_MANIFEST)
        model_args(p)
        p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--tie-rule", choices=("positive", "negative"), default="positive")
    p.add_argument("--method", choices=("majority", "mean"), default="majority")
    p.add_argument("--groups-out", help="write per-group detail CSV")

    p = add("predict", "classify images; several images are also combined by vote")
    model_args(p)
    p.add_argument("--image", action="append", required=True, help="PPM image (repeatable)")

    p = add("bench", "inference FPS benchmark")
    p.add_argument("--model", action="append", help="model file (repeatable; default: fresh custom and mobilenet nets)")
    p.add_argument("--input-size", type=int, choices=SUPPORTED_INPUT_SIZES, default=64,
                   help="input size of the default models")
    p.add_argument("--mode", choices=MODES + ("all",), default="all")
    p.add_argument("--n-images", type=_positive_int, default=46)
    p.add_argument("--runtimes", type=_positive_int, default=10)
    p.add_argument("--out", default="bench.csv")

    p = add("inspect", "print a model description and parameter counts")
    p.add_argument("--model", help="model file (default: describe a fresh net from --arch)")
    arch_args(p)
    return parser


# --------------------------------------------------------------------------
# helpers


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _emit(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


def _configure_threads(args):
    if args.deterministic:
        n = 1
    elif args.threads is not None:
        n = args.threads
    elif os.environ.get(THREADS_ENV):
        try:
            n = _positive_int(os.environ[THREADS_ENV])
        except (ValueError, argparse.ArgumentTypeError):
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {os.environ[THREADS_ENV]!r}")
    else:
        return
    if n > numba.config.NUMBA_NUM_THREADS:
        raise UsageError(f"--threads {n} exceeds the {numba.config.NUMBA_NUM_THREADS} available")
    numba.set_num_threads(n)


def _build(args, seed):
    if args.arch == "custom":
        return build_custom_rop_net(args.input_size, args.width, seed)
    return build_mobilenet_like(args.input_size, seed)


def _metrics(report):
    out = report.as_dict()
    out["n"] = report.count
    return out


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    if args.dry_run:
        _log(f"dry run: would write {args.patients * 2 * args.images_per_eye} images to {args.out_dir}")
        return
    m = synth_generate(args.patients, args.images_per_eye, args.positive_rate, args.quality_mix, args.seed,
                       args.out_dir)
    _log(f"wrote {len(m)} images and {Path(args.out_dir) / 'manifest.csv'}")


def cmd_clean(args):
    m = read_manifest(args.manifest)
    cleaned, report = clean_manifest(m)
    for r in report:
        _log(f"rejected {r.path}: {r.reason} ({r.detail})")
    _log(f"kept {len(cleaned)} of {len(m)} rows")
    if args.dry_run:
        return
    write_manifest(cleaned, args.out or args.manifest)
    if args.report:
        with open(args.report, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("path", "reason", "detail"))
            for r in report:
                w.writerow((r.path, r.reason, r.detail))


def cmd_augment(args):
    m = read_manifest(args.manifest).require_valid()
    out = args.out or str(Path(args.out_dir) / "manifest.csv")
    if args.dry_run:
        _log(f"dry run: would write {len(m) * len(args.ops)} images to {args.out_dir}")
        return
    aug = augment_dataset(m, args.ops, args.out_dir, source=str(Path(args.manifest).resolve()))
    write_manifest(aug, out)
    _log(f"wrote {len(aug) - len(m)} augmented images; manifest {out} has {len(aug)} rows")


def cmd_split(args):
    m = split(read_manifest(args.manifest), args.test_fraction, args.seed)
    n_test = len(m.subset("test"))
    _log(f"train {len(m) - n_test} / test {n_test} images")
    if not args.dry_run:
        write_manifest(m, args.out or args.manifest)


def cmd_build(args):
    spec, params = _build(args, args.seed)
    if not args.dry_run:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_model(spec, params, args.out)
    _emit({"model": spec.name, **count_parameters(spec, params)})


def cmd_train(args):
    m = read_manifest(args.manifest)
    if args.init:
        spec, params = load_model(args.init)
    else:
        spec, params = _build(args, args.seed)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed,
                         fine_tune=args.fine_tune, weight_low=args.weight_low, weight_high=args.weight_high,
                         input_size=spec.input_shape[0], width_multiplier=spec.width_multiplier)
    if args.dry_run:
        train_rows, _ = training_records(m, args.fine_tune)
        _log(f"dry run: {len(train_rows)} training images, {args.epochs} epochs of "
             f"{-(-len(train_rows) // args.batch)} batches")
        return

    def progress(s):
        val = "" if s.val_loss is None else f" val_loss {s.val_loss:.4f} val_acc {s.val_acc:.4f}"
        _log(f"epoch {s.epoch}/{args.epochs} train_loss {s.train_loss:.4f} train_acc {s.train_acc:.4f}{val}")

    trained, history = train(spec, params, m, config, progress)
    for path in (args.model_out, args.history_out):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_model(spec, trained, args.model_out)
    export_history(history, args.history_out)
    _log(f"saved {args.model_out} and {args.history_out}")


def cmd_eval(args):
    spec, params = load_model(args.model)
    report = evaluate(spec, params, read_manifest(args.manifest), args.split)
    _emit(_metrics(report))


def cmd_vote_eval(args):
    spec, params = load_model(args.model)
    report, groups = evaluate_grouped(spec, params, read_manifest(args.manifest), args.split,
                                      tie_rule=args.tie_rule, method=args.method)
    if args.groups_out and not args.dry_run:
        export_groups(groups, args.groups_out)
    out = _metrics(report)
    out["ties_broken"] = sum(g.tie_broken for g in groups)
    _emit(out)


def cmd_predict(args):
    spec, params = load_model(args.model)
    size = spec.input_shape[0]
    batch = np.stack([prepare(load_ppm(p), size) for p in args.image])
    probs = forward(spec, params, batch, "infer")[:, 0]
    result = {"images": [{"path": p, "probability": round(float(q), 6), "vote": int(q >= 0.5)}
                         for p, q in zip(args.image, probs)]}
    g = vote(probs)
    result["decision"] = g.decision
    result["tie_broken"] = g.tie_broken
    _emit(result)


def cmd_bench(args):
    if args.model:
        models = [load_model(p) for p in args.model]
    else:
        models = [build_custom_rop_net(args.input_size, 1.0, args.seed),
                  build_mobilenet_like(args.input_size, args.seed)]
    modes = MODES if args.mode == "all" else (args.mode,)
    if args.dry_run:
        _log(f"dry run: {len(models)} models x {len(modes)} modes")
        return
    reports = []
    for spec, params in models:
        for mode in modes:
            r = bench_model(spec, params, mode, args.n_images, args.runtimes, args.seed)
            _log(f"{spec.name} {mode}: {r.mean_fps:.1f} +- {r.std_fps:.1f} fps")
            reports.append(r)
    export_bench_csv(normalize_reports(reports), args.out)
    _log(f"wrote {args.out}")


def cmd_inspect(args):
    spec, params = load_model(args.model) if args.model else _build(args, args.seed)
    _emit({"spec": spec.to_dict(), "parameters": count_parameters(spec, params)})


COMMANDS = {
    "synth": cmd_synth, "clean": cmd_clean, "augment": cmd_augment, "split": cmd_split, "build": cmd_build,
    "train": cmd_train, "eval": cmd_eval, "vote-eval": cmd_vote_eval, "predict": cmd_predict,
    "bench": cmd_bench, "inspect": cmd_inspect,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        _configure_threads(args)
        COMMANDS[args.command](args)
    except UsageError as exc:
        _log(str(exc))
        return EXIT_USAGE
    except ParameterError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except NumericError as exc:
        _log(f"numeric error: {exc}")
        return EXIT_NUMERIC
    except (RopNetError, ValueError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
