"""Command-line front end: ``inputtune {run,sweep,plot,report}``.

Exit codes: 0 success, 2 invalid config, 3 missing input file
(checkpoint or matrix), 1 any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CheckpointMissing, ConfigInvalid, InputTuneError, MissingMatrix
from .experiment import (DEVICE_ENV, format_aggregates, load_config, parse_strategy_list, plot_runs,
                         report_from_dirs, run_experiment, sweep_rows, write_sweep_table)

EXIT_CONFIG = 2
EXIT_MISSING = 3


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="inputtune",
        description="Continual-learning experiments with input tuning on frozen backbones.",
        epilog=f"Set {DEVICE_ENV}=cuda to train on a GPU (default: cpu).",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log per-session progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--out", help="output root (overrides the config's 'out')")
        sp.add_argument("--seeds", type=_seeds, help="comma-separated seeds (overrides the config)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        sp.add_argument("--deterministic", action="store_true",
                        help="enable deterministic backend algorithms")

    run = sub.add_parser("run", help="run the config's strategy for every seed")
    common(run)
    sweep = sub.add_parser("sweep", help="run several strategies and tabulate them")
    common(sweep)
    sweep.add_argument("--strategies", required=True,
                       help="comma-separated kinds with optional '+regularizer' / '+parallel' modifiers")
    plot = sub.add_parser("plot", help="accuracy charts and learned-transform images")
    plot.add_argument("runs", nargs="+", help="run directories (seed, strategy or experiment level)")
    plot.add_argument("--out", required=True, help="figure directory")
    plot.add_argument("--format", default="png", choices=("png", "svg"))
    rep = sub.add_parser("report", help="recompute aggregates from saved matrices")
    rep.add_argument("runs", nargs="+", help="run directories")
    rep.add_argument("--out", help="write the aggregate JSON here")
    return p


def _cmd_run(args, strategies=None):
    cfg = load_config(args.config)
    results = run_experiment(cfg, out=args.out, seeds=args.seeds, jobs=args.jobs,
                             deterministic=args.deterministic, strategies=strategies)
    print(format_aggregates(results))
    return cfg, results


def _cmd_sweep(args):
    cfg = load_config(args.config)
    specs = parse_strategy_list(args.strategies, cfg.strategy)
    cfg_out, results = _cmd_run(args, strategies=specs)
    root = Path(args.out or cfg_out.out) / cfg_out.experiment
    csv_path, txt_path = write_sweep_table(sweep_rows(results), root)
    print(txt_path.read_text(), end="")
    print(f"table written to {csv_path}")


def _cmd_plot(args):
    for path in plot_runs(args.runs, args.out, args.format):
        print(path)


def _cmd_report(args):
    aggs = report_from_dirs(args.runs)
    print(format_aggregates(aggs))
    if args.out:
        Path(args.out).write_text(json.dumps(aggs, indent=2))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": _cmd_run, "sweep": _cmd_sweep, "plot": _cmd_plot, "report": _cmd_report}
    try:
        handlers[args.command](args)
    except ConfigInvalid as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingMatrix, CheckpointMissing) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except InputTuneError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
