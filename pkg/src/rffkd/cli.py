"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 missing input artifact,
4 numeric failure during training.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, IngestSpec, load_config
from .distill import NumericFailure
from .featurizer import SPLITS

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {v}")
    return v


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # shared so the flags work before or after the verb
    p = argparse.ArgumentParser(add_help=False)
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=default, help="experiment config JSON")
    p.add_argument("--seed", metavar="U64", type=_u64, default=default, help="root seed, overrides the config")
    p.add_argument("--out", metavar="DIR", default=default, help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rffkd", parents=[_global_flags(False)],
                                     description="RF fingerprint teacher/student distillation experiments")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    shared = [_global_flags(True)]
    sub.add_parser("synth", parents=shared, help="sample a device fleet and synthesize its frames")
    p = sub.add_parser("ingest", parents=shared, help="read raw I/Q captures into a frame archive")
    p.add_argument("path", nargs="?", help="capture file or directory")
    p.add_argument("--encoding", choices=("f32", "i16"))
    p.add_argument("--frame-len", type=int)
    p.add_argument("--label", type=int, help="label for a single capture file")
    p.add_argument("--manifest", help="JSON mapping file names to labels")
    p.add_argument("--pattern", help="glob for captures inside a directory")
    sub.add_parser("featurize", parents=shared, help="STFT features and the train/val/test split")
    sub.add_parser("train-teacher", parents=shared, help="train the teacher network")
    p = sub.add_parser("distill", parents=shared, help="train one student")
    p.add_argument("--mode", choices=harness.STUDENT_MODES, required=True)
    p.add_argument("--tau", type=float, help="temperature for --mode fixed")
    sub.add_parser("compare", parents=shared, help="NKD, fixed temperatures and dynamic, ranked")
    for verb, text in (("eval", "accuracy and confusion matrix"), ("export-features", "PCA feature CSV")):
        p = sub.add_parser(verb, parents=shared, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=SPLITS, default="test")
    return parser


def _ingest_spec(cfg, args) -> IngestSpec:
    spec = cfg.ingest or IngestSpec()
    overrides = {k: v for k, v in (("path", args.path), ("encoding", args.encoding), ("frame_len", args.frame_len),
                                   ("label", args.label), ("manifest", args.manifest), ("pattern", args.pattern))
                 if v is not None}
    spec = dataclasses.replace(spec, **overrides)
    try:
        return spec.validate()
    except ConfigError as exc:
        raise ConfigError(f"ingest.{exc.path}", exc.message) from None


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.seed)
    out = args.out or cfg.out_dir
    if not out:
        raise ConfigError("--out", "an output directory is required (flag or config out_dir)")
    ws = harness.Workspace(out)
    cmd = args.command
    if cmd == "synth":
        for p in harness.synth(cfg, ws):
            print(f"wrote {p}")
    elif cmd == "ingest":
        cfg = dataclasses.replace(cfg, ingest=_ingest_spec(cfg, args))
        for p in harness.ingest(cfg, ws):
            print(f"wrote {p}")
    elif cmd == "featurize":
        for p in harness.featurize(cfg, ws):
            print(f"wrote {p}")
    elif cmd == "train-teacher":
        res = harness.train_teacher(cfg, ws)
        print(f"teacher: test accuracy {res.test_accuracy:.4f}, {res.param_count} parameters")
    elif cmd == "distill":
        if args.tau is not None and args.mode != "fixed":
            raise ConfigError("--tau", "only valid with --mode fixed")
        res, _ = harness.distill(cfg, ws, args.mode, args.tau)
        print(f"{res.label}: test accuracy {res.test_accuracy:.4f}, {res.param_count} parameters")
    elif cmd == "compare":
        report = harness.compare(cfg, ws)
        print(f"{'rank':>4}  {'model':<14} {'test_acc':>8} {'silhouette':>10}")
        for k, label in enumerate(report.ranking(), 1):
            r = report.models[label]
            print(f"{k:>4}  {label:<14} {r.test_accuracy:>8.4f} {r.silhouette:>10.4f}")
    elif cmd == "eval":
        s = harness.eval_checkpoint(cfg, ws, args.checkpoint, args.split)
        print(f"{Path(args.checkpoint).stem} on {args.split}: accuracy {s['accuracy']:.4f} "
              f"({s['correct']}/{s['total']}); confusion matrix in {ws.root / s['confusion_csv']}")
    elif cmd == "export-features":
        print(f"wrote {harness.export_features(cfg, ws, args.checkpoint, args.split)}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.MissingDependency as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericFailure as exc:
        print(f"numeric failure: {exc}; last good weights saved under {args.out}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
