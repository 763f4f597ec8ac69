"""Command-line experiment runner.

    fedsim run <config.json> [--out DIR] [--seed-offset K] [--export-partition]
    fedsim report <dir...> [--out CSV] [--comms {best,total}]
    fedsim plot <dir...> --out DIR

`run` executes every (method x seed) cell of the config, writing one run
directory per cell (rounds.jsonl + summary.json) plus a report.csv over the
grid. Exit codes: 0 success, 1 runtime abort, 2 config/schema violation.
The FEDSIM_MAX_WORKERS environment variable caps per-round client
parallelism.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import build_cell, config_hash, load_config, method_cells
from .datasim import save_partition
from .errors import ConfigurationError, DataFormatError, NumericError, RoundAbort
from .orchestrator import run_training
from .reporting import build_report, collect_stats, write_report_csv
from .runio import load_run_lines, write_run
from .plotting import emit_plots
from . import reporting

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    chash = config_hash(config)
    out_root = Path(args.out or config.get("output", {}).get("dir", "runs"))

    seeds = [s + args.seed_offset for s in config["training"]["seeds"]]
    if any(s < 0 for s in seeds):
        raise ConfigurationError("training.seeds: seed offset produced a negative seed")

    run_dirs: list[Path] = []
    for method in method_cells(config):
        for seed in seeds:
            cell = build_cell(config, method, seed)
            result = run_training(
                cell.pool,
                cell.training,
                cell.scheduler,
                cell.strategy,
                cell.compressor,
                config_echo=config,
            )
            cell_dir = out_root / method["label"] / f"seed{seed}"
            write_run(cell_dir, result, method["label"], config, chash)
            if args.export_partition:
                save_partition(cell.partition, cell_dir / "partition.json")
            run_dirs.append(cell_dir)
            best = result.best_round if result.best_round is not None else "-"
            print(
                f"ran {method['label']} seed={seed}: rounds={len([r for r in result.records if not r.is_intermediate])} "
                f"best_round={best} comms_to_best={result.communications_to_best()} "
                f"comms_total={result.communications_total()}"
            )

    stats = collect_stats(run_dirs)
    report_path = write_report_csv(build_report(stats, comms_mode="best"), out_root / "report.csv")
    print(f"wrote {report_path}")
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    stats = collect_stats(args.dirs)
    rows = build_report(stats, comms_mode=args.comms)
    path = write_report_csv(rows, args.out)
    print(f"wrote {path} ({len(rows)} methods, {len(stats)} runs)")
    return EXIT_OK


def _cmd_plot(args: argparse.Namespace) -> int:
    files = reporting.find_run_files(args.dirs)
    runs = []
    labels_seen: dict[str, int] = {}
    hashes = []
    for f in files:
        header, records = load_run_lines(f)
        label = header["method"]
        labels_seen[label] = labels_seen.get(label, 0) + 1
        runs.append((label, header["seed"], records))
        hashes.append(header["config_hash"])
    # Legend labels are the method labels; disambiguate by seed if one label
    # appears in several runs.
    named = [
        (label if labels_seen[label] == 1 else f"{label} seed{seed}", records)
        for label, seed, records in runs
    ]
    comment = "config_hash: " + ",".join(sorted(set(hashes)))
    written = emit_plots(named, args.out, comment=comment)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute all cells of a config")
    run.add_argument("config", help="path to the JSON run config")
    run.add_argument("--out", default=None, help="output directory (default: config output.dir or ./runs)")
    run.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
    run.add_argument(
        "--export-partition",
        action="store_true",
        help="also write each cell's client->row partition as JSON",
    )
    run.set_defaults(func=_cmd_run)

    report = sub.add_parser("report", help="rebuild the comparison CSV from run dirs")
    report.add_argument("dirs", nargs="+", help="run directories (searched recursively)")
    report.add_argument("--out", default="report.csv", help="CSV output path")
    report.add_argument(
        "--comms",
        choices=["best", "total"],
        default="best",
        help="count exchanges up to the best round, or over the whole run",
    )
    report.set_defaults(func=_cmd_report)

    plot = sub.add_parser("plot", help="emit SVG charts for run dirs")
    plot.add_argument("dirs", nargs="+", help="run directories (searched recursively)")
    plot.add_argument("--out", required=True, help="directory for the SVG files")
    plot.set_defaults(func=_cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RoundAbort, NumericError, DataFormatError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
