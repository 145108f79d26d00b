"""CSV output of experiments and analyses.

Every writer emits a fixed header and formats floats with six decimals, so two
runs with the same configuration produce byte-identical files.
"""

import csv
from collections.abc import Iterable, Mapping
from typing import IO, Any

from edge_dedup.simnet.analysis import DecayPoint, OverheadPoint
from edge_dedup.simnet.experiment import MetricLedger, SnapshotRow
from edge_dedup.types import NS_PER_MS, Tier

LEDGER_FIELDS = (
    "mode",
    "dataset_profile",
    "cloud_ratio",
    "overall_ms",
    "pow_ms",
    "check_ms",
    "transfer_ms",
    "bytes_sent",
    "hit_local",
    "hit_share",
    "hit_cloud",
    "unique",
    "snapshot",
    "logical_bytes",
    "overall_ms_per_gib",
)

SWEEP_FIELDS = ("sweep_axis", "sweep_value")

DECAY_FIELDS = ("scheme", "snapshot", "hit_ratio", "refreshed")

OVERHEAD_FIELDS = ("avg_chunk_size", "scheme", "memory_bytes", "update_operations", "entries")

ELIMINATION_FIELDS = ("dataset_profile", "top_fraction", "elimination_ratio")


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def row_record(row: SnapshotRow) -> dict[str, Any]:
    """One ledger CSV record."""
    return {
        "mode": row.mode.value,
        "dataset_profile": row.dataset_profile,
        "cloud_ratio": _fmt(row.cloud_ratio),
        "overall_ms": _fmt(row.overall_ns / NS_PER_MS),
        "pow_ms": _fmt(row.pow_ns / NS_PER_MS),
        "check_ms": _fmt(row.check_ns / NS_PER_MS),
        "transfer_ms": _fmt(row.transfer_ns / NS_PER_MS),
        "bytes_sent": row.bytes_sent,
        "hit_local": row.tiers[Tier.HIT_LOCAL],
        "hit_share": row.tiers[Tier.HIT_SHARE],
        "hit_cloud": row.tiers[Tier.HIT_CLOUD],
        "unique": row.tiers[Tier.UNIQUE],
        "snapshot": row.snapshot,
        "logical_bytes": row.logical_bytes,
        "overall_ms_per_gib": _fmt(row.overall_ms_per_gib),
    }


def _writer(out: IO[str], fields: Iterable[str]) -> csv.DictWriter[str]:
    writer = csv.DictWriter(out, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    return writer


def write_ledger(out: IO[str], ledger: MetricLedger) -> None:
    writer = _writer(out, LEDGER_FIELDS)
    for row in ledger.rows:
        writer.writerow(row_record(row))


def write_sweep(out: IO[str], axis: str, runs: Iterable[tuple[float, MetricLedger]]) -> None:
    """Concatenate the rows of several runs, tagged with their sweep value."""
    writer = _writer(out, SWEEP_FIELDS + LEDGER_FIELDS)
    for value, ledger in runs:
        for row in ledger.rows:
            writer.writerow({"sweep_axis": axis, "sweep_value": _fmt(value), **row_record(row)})


def write_elimination(out: IO[str], profile: str, curve: Mapping[float, float]) -> None:
    writer = _writer(out, ELIMINATION_FIELDS)
    for fraction in sorted(curve):
        writer.writerow(
            {
                "dataset_profile": profile,
                "top_fraction": _fmt(fraction),
                "elimination_ratio": _fmt(curve[fraction]),
            }
        )


def write_decay(out: IO[str], points: Iterable[DecayPoint]) -> None:
    writer = _writer(out, DECAY_FIELDS)
    for point in points:
        writer.writerow(
            {
                "scheme": point.scheme.value,
                "snapshot": point.snapshot,
                "hit_ratio": _fmt(point.hit_ratio),
                "refreshed": int(point.refreshed),
            }
        )


def write_overhead(out: IO[str], points: Iterable[OverheadPoint]) -> None:
    writer = _writer(out, OVERHEAD_FIELDS)
    for point in points:
        writer.writerow(
            {
                "avg_chunk_size": point.avg_chunk_size,
                "scheme": point.scheme.value,
                "memory_bytes": point.memory_bytes,
                "update_operations": point.update_operations,
                "entries": point.entries,
            }
        )
