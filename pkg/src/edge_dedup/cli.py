"""Command-line entry point: ``edge-dedup run | gen | sweep | decay``.

Exit codes: 0 when every run completed without invariant violations, 1 when a
run recorded violations, 2 when the configuration or an output path is
unusable.
"""

import argparse
import asyncio
import logging
import sys
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import IO

from edge_dedup.simnet.analysis import decay_experiment, elimination_curve, selection_overhead
from edge_dedup.simnet.config import ExperimentConfig, Mode, load_config
from edge_dedup.simnet.experiment import MetricLedger, run_experiment
from edge_dedup.simnet.report import (
    write_decay,
    write_elimination,
    write_ledger,
    write_overhead,
    write_sweep,
)
from edge_dedup.simnet.workload import gen_snapshots, write_corpus
from edge_dedup.types import DedupError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_CONFIG = 2

SWEEP_AXES = ("cloud_ratio", "top_fraction", "chunk_size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edge-dedup",
        description="Secure source-based deduplication with edge servers: simulation runs.",
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="Logging level (default: WARNING)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser, *, out_help: str) -> None:
        sub.add_argument("--config", type=Path, required=True, help="YAML experiment config")
        sub.add_argument("--seed", type=int, default=None, help="Override the config seed")
        sub.add_argument("--out", type=Path, default=None, help=out_help)

    run = commands.add_parser("run", help="Run one experiment and write its CSV ledger")
    common(run, out_help="CSV path (default: stdout)")
    run.add_argument("--mode", choices=[m.value for m in Mode], default=None)

    gen = commands.add_parser("gen", help="Generate a workload corpus and its manifest")
    common(gen, out_help="Output directory")

    sweep = commands.add_parser("sweep", help="Repeat a run or analysis along one axis")
    common(sweep, out_help="CSV path (default: stdout)")
    sweep.add_argument("--mode", choices=[m.value for m in Mode], default=None)
    sweep.add_argument("--sweep-axis", choices=SWEEP_AXES, required=True)
    sweep.add_argument(
        "--sweep-values", type=float, nargs="+", required=True, help="Values of the axis"
    )

    decay = commands.add_parser("decay", help="Replay snapshots with periodic share-index refresh")
    common(decay, out_help="CSV path (default: stdout)")
    decay.add_argument(
        "--refresh-at", type=int, nargs="+", default=[10, 20], help="Snapshots to refresh before"
    )
    return parser


def _configure(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config)
    update: dict[str, object] = {}
    if args.seed is not None:
        update["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        update["mode"] = Mode(args.mode)
    return config.model_copy(update=update) if update else config


@contextmanager
def _output(path: Path | None) -> Iterator[IO[str]]:
    if path is None:
        yield sys.stdout
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as out:
        yield out


def _status(ledgers: Sequence[MetricLedger]) -> int:
    return EXIT_OK if all(ledger.ok for ledger in ledgers) else EXIT_VIOLATIONS


def cmd_run(args: argparse.Namespace) -> int:
    config = _configure(args)
    ledger = asyncio.run(run_experiment(config))
    with _output(args.out) as out:
        write_ledger(out, ledger)
    return _status([ledger])


def cmd_gen(args: argparse.Namespace) -> int:
    config = _configure(args)
    if args.out is None:
        raise ValueError("gen needs --out")
    workload = gen_snapshots(config.workload, config.seed)
    manifest = write_corpus(workload, args.out)
    logger.info(f"Wrote {manifest} (dedup ratio {workload.dedup_ratio:.2f})")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _configure(args)
    values: list[float] = args.sweep_values
    profile = config.dataset_profile or "custom"
    match args.sweep_axis:
        case "cloud_ratio":
            runs: list[tuple[float, MetricLedger]] = []
            for value in values:
                swept = config.model_copy(
                    update={"latency": config.latency.model_copy(update={"cloud_ratio": value})}
                )
                runs.append((value, asyncio.run(run_experiment(swept))))
            with _output(args.out) as out:
                write_sweep(out, "cloud_ratio", runs)
            return _status([ledger for _, ledger in runs])
        case "top_fraction":
            for value in values:
                if not 0.0 < value <= 1.0:
                    raise ValueError(f"Top fraction {value} is outside (0, 1]")
            workload = gen_snapshots(config.workload, config.seed)
            with _output(args.out) as out:
                write_elimination(out, profile, elimination_curve(workload, values))
            return EXIT_OK
        case _:
            sizes = [int(value) for value in values]
            points = selection_overhead(
                config.workload, sizes, seed=config.seed, sketch_config=config.cloud.sketch
            )
            with _output(args.out) as out:
                write_overhead(out, points)
            return EXIT_OK


def cmd_decay(args: argparse.Namespace) -> int:
    config = _configure(args)
    workload = gen_snapshots(config.workload, config.seed)
    points = decay_experiment(
        workload,
        refresh_at=args.refresh_at,
        coverage=config.cloud.share_coverage,
        sketch_config=config.cloud.sketch,
    )
    with _output(args.out) as out:
        write_decay(out, points)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "gen": cmd_gen, "sweep": cmd_sweep, "decay": cmd_decay}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        return COMMANDS[args.command](args)
    except (DedupError, ValueError, OSError) as exc:
        logger.error(f"{args.command} failed: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
