"""Command-line entry point: ``res3d synth|train|eval|inspect|table``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or data error
(including corrupt checkpoints), 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
from pathlib import Path

from res3d.blocks import assemble_network, feature_channels, named_spec
from res3d.config import build_run_config, load_config
from res3d.datapipe import DatasetManifest, FrameSource, generate_synthetic_dataset
from res3d.errors import CheckpointError, ConfigurationError, DataError, NumericError
from res3d.evaluator import EvalReport, emit_results_table, evaluate_dataset, format_accuracy, write_reports
from res3d.trainer import (
    METRIC_COLUMNS, OptimizerState, fit, load_checkpoint, save_checkpoint,
)

log = logging.getLogger("res3d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _global_flags(suppress):
    p = argparse.ArgumentParser(add_help=False)
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", type=Path, default=default, help="TOML run file")
    p.add_argument("--seed", type=int, default=default, help="overrides train.seed")
    p.add_argument("--out", type=Path, default=default, help="output directory")
    p.add_argument("--threads", type=int, default=default, help="BLAS thread limit")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser():
    parser = _Parser(prog="res3d", description="3D residual networks for video face recognition",
                     parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_global_flags(True)]

    s = sub.add_parser("synth", parents=common, help="write a synthetic dataset")
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--videos-per-class", type=int, default=10)
    s.add_argument("--frames", type=int, default=48)
    s.add_argument("--size", default="240x320", help="HEIGHTxWIDTH")
    s.add_argument("--train-fraction", type=float, default=0.6)

    t = sub.add_parser("train", parents=common, help="train a network")
    t.add_argument("--dataset", type=Path)
    t.add_argument("--arch", help="named architecture")
    t.add_argument("--epochs", type=int, help="overrides train.max_epochs")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")

    e = sub.add_parser("eval", parents=common, help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--dataset", type=Path)
    e.add_argument("--split", default="test")
    e.add_argument("--name", help="row label in the results table")

    i = sub.add_parser("inspect", parents=common, help="print the per-layer table")
    i.add_argument("--arch", help="named architecture")
    i.add_argument("--num-classes", type=int)

    r = sub.add_parser("table", parents=common, help="combine run results into one table")
    r.add_argument("runs", nargs="+", type=Path, help="directories holding results.csv")
    r.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    return parser


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _lock_for(checkpoint):
    """config.lock of the run directory that owns ``checkpoint``, if any."""
    for d in (checkpoint.parent, checkpoint.parent.parent):
        if (d / "config.lock").is_file():
            return d / "config.lock"
    return None


def resolve_config(args, fallback=None):
    overrides = {}
    if args.seed is not None:
        overrides.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides.setdefault("train", {})["max_epochs"] = args.epochs
    if getattr(args, "dataset", None) is not None:
        overrides["dataset"] = str(args.dataset.resolve())
    if args.out is not None:
        overrides["output_dir"] = str(args.out.resolve())
    arch = getattr(args, "arch", None)
    if arch is not None:
        overrides["architecture"] = {"name": arch}
    source = args.config or fallback
    if source is not None:
        return load_config(source, overrides)
    return build_run_config(overrides, Path.cwd())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _parse_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigurationError(f"--size must look like HEIGHTxWIDTH, got {text!r}") from None
    if h < 2 or w < 2:
        raise ConfigurationError(f"--size must be at least 2x2, got {text!r}")
    return h, w


def cmd_synth(args):
    for flag, value, low in (("--classes", args.classes, 2), ("--videos-per-class", args.videos_per_class, 1),
                             ("--frames", args.frames, 1)):
        if value < low:
            raise ConfigurationError(f"{flag} must be >= {low}, got {value}")
    if not 0 < args.train_fraction < 1:
        raise ConfigurationError(f"--train-fraction must lie in (0, 1), got {args.train_fraction}")
    if args.out is None:
        raise ConfigurationError("synth needs --out")
    size = _parse_size(args.size)
    seed = 0 if args.seed is None else args.seed
    generate_synthetic_dataset(args.out, args.classes, args.videos_per_class, args.frames, size, seed,
                               args.train_fraction)
    print(args.out / "manifest.json")
    return EXIT_OK


def _load_manifest(cfg):
    if cfg.dataset is None:
        raise ConfigurationError("no dataset given (set 'dataset' in the config or pass --dataset)")
    manifest = DatasetManifest.load(cfg.dataset)
    if manifest.num_classes != cfg.architecture.num_classes:
        raise ConfigurationError(
            f"architecture has {cfg.architecture.num_classes} classes, dataset has {manifest.num_classes}"
        )
    return manifest


def _write_metrics(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for r in history:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_acc), repr(r.val_loss),
                        repr(r.val_acc), f"{r.wall_seconds:.3f}"])


def cmd_train(args):
    fallback = _lock_for(args.resume) if args.resume is not None and args.config is None else None
    cfg = resolve_config(args, fallback)
    if cfg.output_dir is None:
        raise ConfigurationError("no output directory (set 'output_dir' in the config or pass --out)")
    manifest = _load_manifest(cfg)
    net = assemble_network(cfg.architecture, seed=cfg.train.seed)
    state, history, start = None, [], 0
    if args.resume is not None:
        ckpt = load_checkpoint(args.resume)
        if ckpt.seed != cfg.train.seed:
            raise ConfigurationError(f"checkpoint seed {ckpt.seed} differs from configured seed {cfg.train.seed}")
        ckpt.restore(net)
        state, history, start = ckpt.optimizer, list(ckpt.history), ckpt.epoch
        log.info("resuming from %s at epoch %d", args.resume, start)

    run = cfg.output_dir
    ckpt_dir = run / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (run / "config.lock").write_text(cfg.to_toml())
    metrics = run / "metrics.csv"
    _write_metrics(metrics, history)
    best = [min((r.val_loss for r in history), default=float("inf"))]

    def on_epoch(record, st):
        history.append(record)
        _write_metrics(metrics, history)
        path = save_checkpoint(ckpt_dir / f"epoch_{record.epoch:03d}.ckpt", net, st, record.epoch,
                               cfg.train.seed, history, cfg.train, cfg.augment)
        if record.val_loss < best[0]:
            best[0] = record.val_loss
            (ckpt_dir / "best.ckpt").write_bytes(path.read_bytes())

    fit(net, manifest, cfg.train, cfg.augment, state or OptimizerState.fresh(net.parameters(), cfg.train),
        start, history=list(history), source=FrameSource(manifest), on_epoch=on_epoch)
    if history:
        last = history[-1]
        print(f"trained {cfg.architecture.name} for {last.epoch} epochs: "
              f"train acc {format_accuracy(last.train_acc)}, val loss {last.val_loss:.4f}, "
              f"val acc {format_accuracy(last.val_acc)}")
    print(run)
    return EXIT_OK


def cmd_eval(args):
    fallback = _lock_for(args.checkpoint) if args.config is None else None
    cfg = resolve_config(args, fallback)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.spec != cfg.architecture:
        raise ConfigurationError(
            f"checkpoint architecture {ckpt.spec.name!r} does not match configured {cfg.architecture.name!r}"
        )
    manifest = _load_manifest(cfg)
    net = ckpt.restore(assemble_network(ckpt.spec, seed=ckpt.seed))
    report = evaluate_dataset(net, manifest, args.split, cfg.augment, name=args.name or ckpt.spec.name)
    out = cfg.output_dir or args.checkpoint.parent
    write_reports([report], out, manifest.class_names)
    print(f"{report.name}: video accuracy {format_accuracy(report.video_accuracy)}, "
          f"clip accuracy {format_accuracy(report.clip_accuracy)} "
          f"({len(report.predictions)} videos, {report.runtime_seconds:.1f}s)")
    print(out)
    return EXIT_OK


def cmd_inspect(args):
    if args.arch is not None:
        extra = {"num_classes": args.num_classes} if args.num_classes else {}
        spec = named_spec(args.arch, **extra)
    else:
        cfg = resolve_config(args)
        spec = cfg.architecture
    net = assemble_network(spec, seed=0 if args.seed is None else args.seed)
    rows = net.layer_table(batch=1)
    width = max(len(r.name) for r in rows)
    print(f"{'layer':<{width}}  {'output shape':<24}  {'params':>12}  description")
    for r in rows:
        print(f"{r.name:<{width}}  {str(r.output_shape):<24}  {r.num_params:>12,}  {r.description}")
    print(f"feature channels: {feature_channels(net)}")
    print(f"total parameters: {net.num_params():,}")
    return EXIT_OK


def cmd_table(args):
    reports = []
    for run in args.runs:
        path = run / "results.csv" if run.is_dir() else run
        try:
            with open(path, newline="") as f:
                rows = list(csv.DictReader(f))
        except OSError as e:
            raise DataError(f"cannot read {path}: {e}") from e
        for row in rows:
            reports.append(EvalReport(row["architecture"], float(row["accuracy"]), float("nan"), None))
    text = emit_results_table(reports, args.format)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        suffix = "md" if args.format == "markdown" else "csv"
        (args.out / f"results.{suffix}").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect,
            "table": cmd_table}


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ConfigurationError(f"--threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
