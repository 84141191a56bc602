"""Command-line driver: ``trust-ssm {train,rank,adapt,ablate,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .adaptation import METHODS, MODES, POLARITIES, AdaptationConfig, batches, rank_permutations
from .bench import (ADAPT_COLUMNS, AXES, SUMMARY_COLUMNS, SWEEP_COLUMNS, ExperimentConfig, RunReport,
                    SourceConfig, StreamConfig, adapt_csv_rows, build_source, format_table, percent, read_csv,
                    resolve_checkpoint, run_experiment, summarize, sweep, target_stream, write_csv)
from .data import CORRUPTIONS, MAX_SEVERITY
from .model import MicroVMamba


def _add_source(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("source model")
    g.add_argument("--checkpoint", help="source checkpoint; trained on the fly when omitted")
    g.add_argument("--source-images", type=int, default=SourceConfig.n_images)
    g.add_argument("--source-epochs", type=int, default=SourceConfig.epochs)
    g.add_argument("--source-lr", type=float, default=SourceConfig.lr)


def _add_stream(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("target stream")
    g.add_argument("--corruption", choices=CORRUPTIONS, default=StreamConfig.corruption)
    g.add_argument("--severity", type=int, choices=range(MAX_SEVERITY + 1), default=StreamConfig.severity)
    g.add_argument("--stream-images", type=int, default=StreamConfig.n_images)


def _add_adapt(p: argparse.ArgumentParser) -> None:
    d = AdaptationConfig()
    g = p.add_argument_group("adaptation")
    g.add_argument("--method", choices=METHODS, default=d.method)
    g.add_argument("--mode", choices=MODES, default=d.mode)
    g.add_argument("--exec", dest="execution", choices=("sequential", "parallel"), default=d.execution)
    g.add_argument("--k", type=int, default=d.k)
    g.add_argument("--iters", type=int, default=d.iters)
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--batch", type=int, default=d.batch_size)
    g.add_argument("--polarity", choices=POLARITIES, default=d.polarity)
    g.add_argument("--calibration-batches", type=int, default=d.n_calibration)
    g.add_argument("--weighting", choices=("uniform", "entropy"), default=d.weighting)


def _experiment(args, seed: int) -> ExperimentConfig:
    return ExperimentConfig(
        SourceConfig(seed=seed, n_images=args.source_images, epochs=args.source_epochs, lr=args.source_lr),
        StreamConfig(seed=seed, n_images=args.stream_images, corruption=args.corruption, severity=args.severity),
        AdaptationConfig(method=args.method, k=args.k, iters=args.iters, lr=args.lr, batch_size=args.batch,
                         mode=args.mode, execution=args.execution, polarity=args.polarity,
                         n_calibration=args.calibration_batches, weighting=args.weighting).validate(),
        checkpoint_path=str(Path(args.checkpoint).resolve()) if args.checkpoint else None,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trust-ssm", description="Test-time adaptation for a micro vision SSM.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a source model and write its checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=SourceConfig.n_images)
    p.add_argument("--epochs", type=int, default=SourceConfig.epochs)
    p.add_argument("--lr", type=float, default=SourceConfig.lr)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rank", help="rank traversal permutations by calibration entropy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_source(p)
    _add_stream(p)
    _add_adapt(p)

    p = sub.add_parser("adapt", help="run one method over a corrupted stream")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="run", help="output prefix for <out>.json and <out>.csv")
    p.add_argument("--from-report", help="re-run the configuration embedded in a report JSON")
    _add_source(p)
    _add_stream(p)
    _add_adapt(p)

    p = sub.add_parser("ablate", help="sweep one axis over several seeds")
    p.add_argument("--axis", choices=tuple(AXES), required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", required=True)
    _add_source(p)
    _add_stream(p)
    _add_adapt(p)

    p = sub.add_parser("report", help="aggregate CSVs into a summary table")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--out", help="write the summary CSV here")
    return parser


def cmd_train(args) -> int:
    cfg = SourceConfig(seed=args.seed, n_images=args.images, epochs=args.epochs, lr=args.lr)
    ckpt = build_source(cfg)
    ckpt.save(args.out)
    print(f"clean accuracy {percent(float(ckpt.metadata['clean_accuracy']))}% -> {args.out}")
    return 0


def cmd_rank(args) -> int:
    cfg = _experiment(args, args.seed)
    ckpt = resolve_checkpoint(cfg)
    images, _ = target_stream(cfg.stream)
    calib = batches(images, cfg.adaptation.batch_size)[: cfg.adaptation.n_calibration]
    ranking = rank_permutations(MicroVMamba.from_checkpoint(ckpt), calib, norm_mode=cfg.adaptation.norm_mode,
                                seed=args.seed)
    out = ranking.to_dict()
    Path(args.out).write_text(json.dumps(out, indent=2))
    for r in out["ranking"][:cfg.adaptation.k]:
        print(f"{r['permutation']}  {r['mean_entropy']:.6f}")
    return 0


def cmd_adapt(args) -> int:
    if args.from_report:
        cfg = RunReport.from_json(Path(args.from_report).read_text()).experiment()
    else:
        cfg = _experiment(args, args.seed)
    report, _ = run_experiment(cfg)
    out = Path(args.out)
    out.with_suffix(".json").write_text(report.to_json())
    write_csv(out.with_suffix(".csv"), ADAPT_COLUMNS, adapt_csv_rows(report))
    for m, acc in report.accuracy.items():
        print(f"{m}: {percent(acc)}%")
    return 0


def cmd_ablate(args) -> int:
    base = _experiment(args, args.seeds[0])
    rows = sweep(args.axis, base, args.seeds)
    for r in rows:
        r["accuracy"] = percent(r["accuracy"])
    write_csv(args.out, SWEEP_COLUMNS, rows)
    print(format_table(summarize(rows)))
    return 0


def cmd_report(args) -> int:
    rows = [r for path in args.csvs for r in read_csv(path)]
    if not rows:
        raise SystemExit("no rows to aggregate")
    summary = summarize(rows)
    if args.out:
        write_csv(args.out, SUMMARY_COLUMNS, summary)
    print(format_table(summary))
    return 0


COMMANDS = {"train": cmd_train, "rank": cmd_rank, "adapt": cmd_adapt, "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
