"""End-to-end experiment runs."""

import io

import pytest

from edge_dedup.simnet.config import Mode, parse_config
from edge_dedup.simnet.experiment import run_experiment
from edge_dedup.simnet.report import LEDGER_FIELDS, write_ledger
from edge_dedup.simnet.workload import gen_snapshots
from edge_dedup.types import Tier


def ledger_csv(ledger) -> str:
    out = io.StringIO()
    write_ledger(out, ledger)
    return out.getvalue()


@pytest.mark.parametrize("mode", list(Mode))
async def test_runs_without_violations(experiment_settings, mode):
    """Every mode restores every file and keeps the storage invariants."""
    config = parse_config({**experiment_settings, "mode": mode.value})
    ledger = await run_experiment(config)
    assert ledger.violations == []
    assert ledger.ok
    assert [row.snapshot for row in ledger.rows] == [2, 3]
    assert set(ledger.elimination) == set(config.top_fractions)
    assert ledger.stored_bytes > 0


async def test_deterministic(experiment_settings):
    """Two runs of one configuration produce identical ledgers."""
    config = parse_config(experiment_settings)
    first = ledger_csv(await run_experiment(config))
    second = ledger_csv(await run_experiment(config))
    assert first == second
    assert first.splitlines()[0] == ",".join(LEDGER_FIELDS)


async def test_edge_modes_eliminate_cloud_checks(experiment_settings):
    """With edges, some checks finish without asking the cloud."""
    config = parse_config(experiment_settings)
    ledger = await run_experiment(config)
    assert ledger.epochs >= 1
    assert sum(row.eliminated for row in ledger.rows) > 0
    assert all(row.tiers[Tier.UNIQUE] >= 0 for row in ledger.rows)


async def test_target_baseline_sends_most_bytes(experiment_settings):
    """Uploading everything moves more bytes than source-based deduplication."""
    workload = gen_snapshots(parse_config(experiment_settings).workload, 5)
    target = await run_experiment(
        parse_config({**experiment_settings, "mode": "target_baseline"}), workload=workload
    )
    pm = await run_experiment(parse_config(experiment_settings), workload=workload)
    assert target.total("bytes_sent") > pm.total("bytes_sent")


@pytest.mark.slow
async def test_edges_beat_cloud_round_trips(experiment_settings):
    """PM-Dedup finishes snapshots faster than the real-time cloud baseline."""
    settings = {**experiment_settings, "latency": {"cloud_ratio": 10.0}}
    workload = gen_snapshots(parse_config(settings).workload, 5)
    pm = await run_experiment(parse_config(settings), workload=workload)
    source = await run_experiment(
        parse_config({**settings, "mode": "source_baseline"}), workload=workload
    )
    assert pm.total("overall_ns") < source.total("overall_ns")


@pytest.mark.slow
@pytest.mark.parametrize(
    ("profile", "baseline", "column", "compare"),
    [
        ("lab", "source_baseline", "overall_ns", operator.lt),
        ("lab", "pm_no_local", "check_ns", operator.lt),
        ("gcc", "target_baseline", "bytes_sent", operator.le),
    ],
    ids=["lab-overall", "lab-check", "gcc-bytes"],
)
async def test_pm_dedup_against_baseline(experiment_settings, profile, baseline, column, compare):
    """PM-Dedup beats each baseline on the metric that baseline is weakest at."""
    settings = {
        **experiment_settings,
        "dataset_profile": profile,
        "workload": {
            "base_size": 256 << 10,
            "snapshot_count": 12,
            "files_per_snapshot": 2,
            "chunker": {"min_size": 512, "avg_size": 2048, "max_size": 8192},
        },
        "latency": {"cloud_ratio": 6.89},
    }
    workload = gen_snapshots(parse_config(settings).workload, 5)
    pm = await run_experiment(parse_config(settings), workload=workload)
    other = await run_experiment(parse_config({**settings, "mode": baseline}), workload=workload)
    assert pm.ok and other.ok
    assert compare(pm.total(column), other.total(column))


async def test_sql_store(experiment_settings):
    """A run over the SQLAlchemy store matches the in-memory ledger."""
    pytest.importorskip("sqlalchemy")
    pytest.importorskip("aiosqlite")
    memory = await run_experiment(parse_config(experiment_settings))
    sql = await run_experiment(
        parse_config({**experiment_settings, "storage_url": "sqlite+aiosqlite:///:memory:"})
    )
    assert sql.ok
    assert ledger_csv(sql) == ledger_csv(memory)
