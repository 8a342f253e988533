"""``volscan`` command line: gen, train, eval, compare, gradcheck, params.

Exit codes: 0 success, 1 validation failure (bad flags, bad spec, missing
split, failed gradient check), 2 I/O or file-format error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import errors as E
from .checkpoint import load_checkpoint, save_checkpoint
from .data import GenSpec, generate_dataset, load_split, read_manifest, resize_volume, write_dataset
from .fileio import atomic_write_bytes, atomic_write_text, csv_text, fmt
from .metrics import evaluate_scores, report_csv, roc_csv, roc_curve, youden_point
from .models import DISPLAY_NAMES, MODEL_KINDS, REFERENCE_PARAMS, TABLE_ORDER, count_parameters, make_model, parameter_breakdown
from .rand import sub_seed
from .training import TrainConfig, evaluate, history_csv, train

log = logging.getLogger("volscan")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# flag types

def _ints(text, n=None, what="value"):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"{what} needs {n} integers, got {text!r}")
    return vals


def dims_type(text):
    return _ints(text, 3, "--dims")


def pair_type(text):
    return _ints(text, 2, "counts (positives,negatives)")


def seeds_type(text):
    return _ints(text)


def fractions_type(text):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated fractions, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("--fractions needs train,val,test")
    return vals


def seed_type(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be a u64")
    return v


def _add_common(p, manifest=False, out_required=False):
    p.add_argument("--seed", type=seed_type, default=0, help="master seed (u64)")
    if manifest:
        p.add_argument("--manifest", type=Path, required=True, help="dataset manifest CSV")
    p.add_argument("--out", type=Path, required=out_required, help="output path")


def build_parser():
    parser = _Parser(prog="volscan", description="Slice-sequence volume classifiers on synthetic CT-like data.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p, out_required=True)
    p.add_argument("--dims", type=dims_type, default=(16, 32, 32), help="D,H,W")
    p.add_argument("--n-pos", type=int, help="positive volumes in total (split by --fractions)")
    p.add_argument("--n-neg", type=int, help="negative volumes in total")
    p.add_argument("--fractions", type=fractions_type, default=(0.6, 0.2, 0.2))
    p.add_argument("--train", type=pair_type, metavar="P,N", help="explicit train counts")
    p.add_argument("--val", type=pair_type, metavar="P,N")
    p.add_argument("--test", type=pair_type, metavar="P,N")
    p.add_argument("--lesion-frac", type=float, default=0.25)
    p.add_argument("--contrast", type=float, default=0.4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--volumes-per-patient", type=int, default=1)

    p = sub.add_parser("train", help="train one model")
    _add_common(p, manifest=True, out_required=True)
    p.add_argument("--model", required=True, help=f"one of {', '.join(MODEL_KINDS)}")
    p.add_argument("--dims", type=dims_type, help="resize volumes to D,H,W (default: as stored)")
    p.add_argument("--filters", type=lambda t: _ints(t, 4, "--filters"))
    _add_training_flags(p)
    p.add_argument("--history", type=Path, help="history CSV (default: <out>.history.csv)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p, manifest=True, out_required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--name", help="model name in the report (default: display name of the architecture)")
    p.add_argument("--roc-csv", type=Path)
    p.add_argument("--roc-svg", type=Path)

    p = sub.add_parser("compare", help="train and evaluate all five models (one CSV row per model)")
    _add_common(p, out_required=True)
    p.add_argument("--manifest", type=Path, help="existing dataset (default: generate one)")
    p.add_argument("--dims", type=dims_type, default=(16, 32, 32))
    p.add_argument("--dry-run", action="store_true", help="build models and count parameters only")
    p.add_argument("--seeds", type=seeds_type, help="model seeds (default: --seed)")
    p.add_argument("--models", type=lambda t: tuple(t.split(",")), default=TABLE_ORDER)
    p.add_argument("--train", type=pair_type, default=(200, 200), metavar="P,N")
    p.add_argument("--val", type=pair_type, default=(50, 50), metavar="P,N")
    p.add_argument("--test", type=pair_type, default=(100, 100), metavar="P,N")
    p.add_argument("--lesion-frac", type=float, default=0.5)
    p.add_argument("--contrast", type=float, default=0.6)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--workdir", type=Path, help="keep dataset, checkpoints and histories here")
    _add_training_flags(p, epochs=30)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference gradient suite")
    p.add_argument("--seed", type=seed_type, default=0)
    p.add_argument("--ops", type=lambda t: [o for o in t.split(",") if o], help="restrict to these ops (prefixes ok)")
    p.add_argument("--threshold", type=float, default=1e-5)
    p.add_argument("--corrupt", type=lambda t: t.split(","), default=[],
                   help="perturb the analytic gradient of these ops (harness self-test)")
    p.add_argument("--list", action="store_true", help="list ops and exit")
    p.add_argument("--out", type=Path, help="also write the summary as CSV")

    p = sub.add_parser("params", help="parameter counts")
    p.add_argument("--model", help="one kind (default: all)")
    p.add_argument("--dims", type=dims_type, default=(35, 128, 128))
    p.add_argument("--breakdown", action="store_true", help="list every parameter tensor")
    p.add_argument("--seed", type=seed_type, default=0)
    p.add_argument("--out", type=Path)
    return parser


def _add_training_flags(p, epochs=50):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--no-clip", action="store_true", help="disable gradient clipping")
    p.add_argument("--record-time", action="store_true",
                   help="fill elapsed_s in history CSVs (makes them non-reproducible)")


# ---------------------------------------------------------------------------
# helpers

def _check_kind(kind):
    if kind not in MODEL_KINDS:
        raise E.ConfigError(f"unknown model {kind!r}; expected one of {', '.join(MODEL_KINDS)}")


def _load(entries, split, dims=None):
    x, y = load_split(entries, split)
    if dims is not None and len(x) and x.shape[1:] != tuple(dims):
        x = np.stack([resize_volume(v, dims) for v in x])
    return x, y


def _require(entries, split):
    x_y = [e for e in entries if e.split == split]
    if not x_y:
        raise E.SplitError(f"manifest has no {split!r} volumes")


def _train_config(args, kind, seed):
    return TrainConfig(kind=kind, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                       patience=args.patience, seed=seed, clip_norm=None if args.no_clip else args.clip_norm,
                       record_time=args.record_time, filters=tuple(getattr(args, "filters", None) or ()))


def _threshold(model, entries, dims):
    """Youden threshold on the validation split (never on test)."""
    x_val, y_val = _load(entries, "val", dims)
    scores = evaluate(model, x_val)
    return youden_point(roc_curve(scores, y_val)).threshold


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args):
    explicit = [args.train, args.val, args.test]
    if any(c is not None for c in explicit):
        if args.n_pos is not None or args.n_neg is not None:
            raise E.SpecError("use either --n-pos/--n-neg or --train/--val/--test, not both")
        counts = {s: c for s, c in zip(("train", "val", "test"), explicit) if c is not None}
        spec = GenSpec(counts=counts, dims=args.dims, lesion_frac=args.lesion_frac, contrast=args.contrast,
                       noise=args.noise, seed=sub_seed(args.seed, "data"), volumes_per_patient=args.volumes_per_patient)
    else:
        if args.n_pos is None or args.n_neg is None:
            raise E.SpecError("give --n-pos and --n-neg (or --train/--val/--test)")
        if min(args.n_pos, args.n_neg) < 0:
            raise E.SpecError("counts must be non-negative")
        spec = GenSpec.from_totals(args.n_pos, args.n_neg, args.fractions, dims=args.dims,
                                   lesion_frac=args.lesion_frac, contrast=args.contrast, noise=args.noise,
                                   seed=sub_seed(args.seed, "data"), volumes_per_patient=args.volumes_per_patient)
    spec.validate()
    log.info("generating %d volumes: %s", spec.total, spec)
    manifest = write_dataset(generate_dataset(spec), args.out)
    print(f"wrote {spec.total} volumes and {manifest}")
    return EXIT_OK


def cmd_train(args):
    _check_kind(args.model)
    entries = read_manifest(args.manifest)
    _require(entries, "train")
    _require(entries, "val")
    x_tr, y_tr = _load(entries, "train", args.dims)
    x_val, y_val = _load(entries, "val", args.dims)
    cfg = _train_config(args, args.model, args.seed)
    log.info("train config %s; %d train / %d val volumes of %s", cfg, len(x_tr), len(x_val), x_tr.shape[1:])
    result = train(cfg, (x_tr, y_tr), (x_val, y_val))
    history = args.history or args.out.with_name(args.out.name + ".history.csv")
    atomic_write_text(history, history_csv(result.history, args.record_time))
    atomic_write_bytes(args.out, result.checkpoint)
    print(f"best epoch {result.best_epoch} val AUC {result.best_auc:.4f}; wrote {args.out} and {history}")
    return EXIT_OK


def cmd_eval(args):
    entries = read_manifest(args.manifest)
    _require(entries, args.split)
    _require(entries, "val")
    model = load_checkpoint(args.checkpoint)
    dims = model.config.input_dims
    threshold = _threshold(model, entries, dims)
    x, y = _load(entries, args.split, dims)
    scores = evaluate(model, x)
    name = args.name or DISPLAY_NAMES[model.kind]
    report = evaluate_scores(name, scores, y, threshold)
    atomic_write_text(args.out, report_csv([report]))
    roc = roc_curve(scores, y)
    if args.roc_csv:
        atomic_write_text(args.roc_csv, roc_csv(roc))
    if args.roc_svg:
        from .report import write_roc_svg
        write_roc_svg(args.roc_svg, roc, name, report.auc)
    print(report_csv([report]), end="")
    return EXIT_OK


COMPARE_FIXED = ("model", "kernels", "params")
COMPARE_METRICS = ("sensitivity", "specificity", "f1")


def compare_header(seeds):
    if seeds is None or len(seeds) == 1:
        return COMPARE_FIXED + ("auc",) + COMPARE_METRICS
    return COMPARE_FIXED + tuple(f"auc_seed{s}" for s in seeds) + ("auc_median",) + COMPARE_METRICS


def cmd_compare(args):
    for kind in args.models:
        _check_kind(kind)
    seeds = args.seeds or (args.seed,)
    models = {k: make_model(k, args.dims) for k in args.models}
    if args.dry_run:
        rows = []
        for k in args.models:
            n = count_parameters(models[k])
            rows.append([DISPLAY_NAMES[k], models[k].config.kernels, n] + [""] * (len(compare_header(seeds)) - 3))
            log.info("%s: %d parameters (reference %d, %+.2f%%)", k, n, REFERENCE_PARAMS[k],
                     100 * (n - REFERENCE_PARAMS[k]) / REFERENCE_PARAMS[k])
        text = csv_text(compare_header(seeds), rows)
        atomic_write_text(args.out, text)
        print(text, end="")
        return EXIT_OK

    if args.manifest:
        entries = read_manifest(args.manifest)
    else:
        spec = GenSpec(counts={"train": args.train, "val": args.val, "test": args.test}, dims=args.dims,
                       lesion_frac=args.lesion_frac, contrast=args.contrast, noise=args.noise,
                       seed=sub_seed(args.seed, "data")).validate()
        root = args.workdir or Path(args.out).with_name(Path(args.out).name + ".work")
        log.info("generating dataset %s into %s", spec, root / "data")
        entries = read_manifest(write_dataset(generate_dataset(spec), root / "data"))
    for split in ("train", "val", "test"):
        _require(entries, split)
    dims = tuple(args.dims)
    x_tr, y_tr = _load(entries, "train", dims)
    x_val, y_val = _load(entries, "val", dims)
    x_te, y_te = _load(entries, "test", dims)
    rows = []
    start = time.perf_counter()
    for k in args.models:
        per_seed = []
        for seed in seeds:
            cfg = _train_config(args, k, seed)
            log.info("compare: training %s seed %d (%s)", k, seed, cfg)
            res = train(cfg, (x_tr, y_tr), (x_val, y_val))
            thr = youden_point(roc_curve(evaluate(res.model, x_val), y_val)).threshold
            report = evaluate_scores(DISPLAY_NAMES[k], evaluate(res.model, x_te), y_te, thr)
            per_seed.append(report)
            log.info("compare: %s seed %d test AUC %.4f (best epoch %d, %.0fs elapsed)", k, seed, report.auc,
                     res.best_epoch, time.perf_counter() - start)
            if args.workdir:
                save_checkpoint(res.model, args.workdir / f"{k}-seed{seed}.vsck")
                atomic_write_text(args.workdir / f"{k}-seed{seed}.history.csv",
                                  history_csv(res.history, args.record_time))
        aucs = [r.auc for r in per_seed]
        med = [statistics.median(getattr(r, m) for r in per_seed) for m in COMPARE_METRICS]
        auc_cols = [fmt(a) for a in aucs] + ([fmt(statistics.median(aucs))] if len(seeds) > 1 else [])
        rows.append([DISPLAY_NAMES[k], models[k].config.kernels, count_parameters(models[k])] + auc_cols
                    + [fmt(float(v)) for v in med])
    text = csv_text(compare_header(seeds), rows)
    atomic_write_text(args.out, text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args):
    from .verify import CASES, run_case, select

    if args.list:
        print("\n".join(CASES))
        return EXIT_OK
    try:
        ops = select(args.ops)
    except KeyError as exc:
        raise E.ConfigError(exc.args[0]) from None
    rows, failed = [], []
    for op in ops:
        t = time.perf_counter()
        r = run_case(op, args.seed, op in args.corrupt, args.threshold)
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {op:26s} max_rel_err={r.max_rel_error:.3e} checked={r.checked} "
              f"skipped_kinks={r.skipped} worst={r.worst} ({time.perf_counter() - t:.1f}s)", flush=True)
        rows.append((op, status, fmt(r.max_rel_error), r.checked, r.skipped, r.worst))
        if not r.passed:
            failed.append(op)
    if args.out:
        atomic_write_text(args.out, csv_text(("op", "status", "max_rel_error", "checked", "skipped", "worst"), rows))
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INVALID
    print(f"all {len(ops)} ops pass at {args.threshold:g}")
    return EXIT_OK


def cmd_params(args):
    kinds = [args.model] if args.model else list(TABLE_ORDER)
    for k in kinds:
        _check_kind(k)
    rows = []
    for k in kinds:
        m = make_model(k, args.dims, seed=args.seed)
        n = count_parameters(m)
        rows.append((k, DISPLAY_NAMES[k], m.config.kernels, ",".join(map(str, m.config.filters)), n,
                     REFERENCE_PARAMS[k], f"{100 * (n - REFERENCE_PARAMS[k]) / REFERENCE_PARAMS[k]:+.2f}"))
        if args.breakdown:
            for name, shape, size in parameter_breakdown(m):
                print(f"  {name:32s} {str(shape):22s} {size}")
    text = csv_text(("kind", "model", "kernels", "filters", "params", "reference_params", "diff_pct"), rows)
    if args.out:
        atomic_write_text(args.out, text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare,
            "gradcheck": cmd_gradcheck, "params": cmd_params}


def _threads():
    raw = os.environ.get("VOLSCAN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise E.ConfigError(f"VOLSCAN_THREADS must be a positive integer, got {raw!r}")
    return n


def _resolved(args):
    out = {}
    for k, v in sorted(vars(args).items()):
        out[k] = str(v) if isinstance(v, Path) else v
    return json.dumps(out, default=str, sort_keys=True)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads()
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            log.info("volscan %s threads=%d config=%s", args.command, threads, _resolved(args))
            return COMMANDS[args.command](args)
    except (E.ConfigError, E.SpecError, E.SplitError, E.MetricError, E.ShapeError, E.EmptySequenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, E.FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # invariant violations and bugs
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
