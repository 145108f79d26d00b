"""End-to-end experiment runs over a generated workload.

A run builds the cloud, key server, clients and (for the PM-Dedup modes)
edge servers, uploads the first snapshots unmeasured to build up common data,
then uploads the remaining snapshots and records one :class:`SnapshotRow`
per snapshot. Alongside the metrics the run audits the system's invariants
and records every violation it finds in the ledger.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field

from edge_dedup.baselines import (
    EnclaveBaselineGateway,
    SourceBaselineGateway,
    TargetBaselineGateway,
)
from edge_dedup.client import Client, ClientConfig, UploadPlan, UploadReport
from edge_dedup.cloud import CloudServer, CloudVerdict
from edge_dedup.crypto import KeyServer
from edge_dedup.edge import (
    EdgeConfig,
    EdgeServer,
    enclave_capacity_for,
    local_capacity_for,
    refresh_epoch,
)
from edge_dedup.gateway import DedupGateway
from edge_dedup.pow import IssueLog, PowVerdict
from edge_dedup.simnet.analysis import elimination_curve
from edge_dedup.simnet.clock import SimClock
from edge_dedup.simnet.config import ExperimentConfig, Mode
from edge_dedup.simnet.network import CostMeter, Network, Phase
from edge_dedup.simnet.workload import Workload, WorkloadFile, gen_snapshots
from edge_dedup.storage.base import ChunkStoreBackend
from edge_dedup.storage.memory import MemoryChunkStore
from edge_dedup.types import NS_PER_MS, Fingerprint, Tier

logger = logging.getLogger(__name__)

GIB = 1 << 30


@dataclass
class SnapshotRow:
    """Latency, traffic and tier counts of one measured snapshot.

    Latencies are virtual nanoseconds summed over the snapshot's uploads.
    """

    mode: Mode
    dataset_profile: str
    cloud_ratio: float
    snapshot: int
    keygen_ns: int = 0
    pow_ns: int = 0
    check_ns: int = 0
    transfer_ns: int = 0
    bytes_sent: int = 0
    logical_bytes: int = 0
    tiers: Counter[Tier] = field(default_factory=Counter)

    @property
    def overall_ns(self) -> int:
        return self.keygen_ns + self.pow_ns + self.check_ns + self.transfer_ns

    @property
    def eliminated(self) -> int:
        """Chunk checks answered without asking the cloud."""
        return self.tiers[Tier.HIT_LOCAL] + self.tiers[Tier.HIT_SHARE]

    @property
    def overall_ms_per_gib(self) -> float:
        if not self.logical_bytes:
            return 0.0
        return self.overall_ns / NS_PER_MS * GIB / self.logical_bytes

    def add(self, report: UploadReport) -> None:
        self.keygen_ns += report.phases.get(Phase.KEYGEN, 0)
        self.pow_ns += report.phases.get(Phase.POW, 0)
        self.check_ns += report.phases.get(Phase.CHECK, 0)
        self.transfer_ns += report.phases.get(Phase.TRANSFER, 0)
        self.bytes_sent += report.bytes_sent
        self.logical_bytes += report.logical_bytes
        self.tiers.update(report.tiers)


@dataclass
class MetricLedger:
    """Everything one run measured.

    Attributes:
        config: The run's configuration
        rows: One row per measured snapshot
        violations: Invariant violations found while running
        background_ns: Virtual time spent on epochs outside the upload path
        epochs: Epoch rebuilds performed
        stored_bytes: Ciphertext bytes held by the cloud at the end
        dedup_ratio: Realized ratio of the workload
        elimination: Elimination ratio per top fraction
    """

    config: ExperimentConfig
    rows: list[SnapshotRow] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    background_ns: int = 0
    epochs: int = 0
    stored_bytes: int = 0
    dedup_ratio: float = 0.0
    elimination: dict[float, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def total(self, attribute: str) -> int:
        return sum(getattr(row, attribute) for row in self.rows)


async def open_store(config: ExperimentConfig) -> ChunkStoreBackend:
    """The run's chunk store: in memory, or SQL when a URL is configured."""
    if config.storage_url is None:
        return MemoryChunkStore()
    from edge_dedup.storage import SQLAlchemyChunkStore

    store = SQLAlchemyChunkStore(database_url=config.storage_url)
    await store.create_schema()
    return store


class _Run:
    """Mutable state of one experiment run."""

    def __init__(
        self, config: ExperimentConfig, workload: Workload, store: ChunkStoreBackend
    ) -> None:
        self.config = config
        self.workload = workload
        self.network = Network(config.latency, SimClock(), seed=config.seed)
        self.log = IssueLog()
        cloud_config = config.cloud.model_copy(
            update={"epoch_bytes": config.effective_epoch_bytes}
        )
        self.cloud = CloudServer(store, cloud_config, log=self.log)
        self.key_server = KeyServer.from_seed(config.seed, config.key_server)
        self.background = CostMeter()
        self.ledger = MetricLedger(config=config, dedup_ratio=workload.dedup_ratio)
        self.edges = self._edges() if config.mode.uses_edges else []
        self.baseline = self._baseline()
        chunker = config.workload.chunker
        self.clients = [
            Client(
                ClientConfig(client_id=f"client-{i}", chunker=chunker),
                self.key_server,
                self.network,
            )
            for i in range(config.topology.clients)
        ]
        self.expected_stored: dict[Fingerprint, int] = {}
        self.last_plans: dict[str, tuple[Client, UploadPlan]] = {}

    def _edges(self) -> list[EdgeServer]:
        settings = self.config.edge
        avg = self.config.workload.chunker.avg_size
        volume = self.workload.unique_bytes
        edges: list[EdgeServer] = []
        for i in range(self.config.topology.edges):
            edge_config = EdgeConfig(
                edge_id=f"edge-{i}",
                local_chunk_capacity=local_capacity_for(volume, avg, settings.local_coverage),
                local_file_capacity=settings.local_file_capacity,
                enclave_capacity_bytes=settings.enclave_capacity_bytes
                or enclave_capacity_for(volume, avg),
                hit_window=settings.hit_window,
                hit_threshold=settings.hit_threshold,
                use_local_index=self.config.mode is Mode.PM_DEDUP,
                seed=self.config.seed + i,
                code_label=self.config.cloud.enclave_code,
            )
            edge = EdgeServer(edge_config, self.cloud, self.network, log=self.log)
            edge.attach()
            edges.append(edge)
        return edges

    def _baseline(self) -> DedupGateway | None:
        match self.config.mode:
            case Mode.SOURCE_BASELINE:
                return SourceBaselineGateway(self.cloud, self.network)
            case Mode.SGX_BASELINE:
                return EnclaveBaselineGateway(self.cloud, self.network)
            case Mode.TARGET_BASELINE:
                return TargetBaselineGateway(self.cloud, self.network)
            case _:
                return None

    def route(self, file: WorkloadFile) -> tuple[Client, DedupGateway]:
        """Client ``i`` owns file ``i`` of every snapshot; edges serve clients round-robin."""
        index = file.index % len(self.clients)
        client = self.clients[index]
        if self.baseline is not None:
            return client, self.baseline
        return client, self.edges[index % len(self.edges)]

    async def epoch(self) -> None:
        if not self.edges:
            return
        await refresh_epoch(self.cloud, self.edges, self.network, self.background)
        self.ledger.epochs += 1

    async def upload(self, file: WorkloadFile, row: SnapshotRow | None) -> None:
        client, gateway = self.route(file)
        meter = CostMeter()
        plan = client.prepare_upload(self.workload.read(file), meter)
        distinct = plan.distinct
        verdicts = await self.cloud.cloud_check(distinct)
        unknown = {
            fp for fp, v in zip(distinct, verdicts, strict=True) if v is CloudVerdict.UNIQUE
        }
        report = await client.upload(plan, gateway, meter)
        self._audit_upload(file, plan, report, unknown)
        for fp in distinct:
            self.expected_stored[fp] = plan.by_fingerprint[fp].cipher.length
        self.last_plans[file.name] = (client, plan)
        if row is not None:
            row.add(report)
        if self.edges and (self.cloud.needs_epoch() or any(e.update_requested for e in self.edges)):
            await self.epoch()

    def _audit_upload(
        self, file: WorkloadFile, plan: UploadPlan, report: UploadReport, unknown: set[Fingerprint]
    ) -> None:
        violations = self.ledger.violations
        if len(report.tiers) != len(plan.chunks):
            violations.append(
                f"{file.name}: {len(report.tiers)} verdicts for {len(plan.chunks)} chunks"
            )
        failed = sum(1 for v in report.pow.values() if v is PowVerdict.FAILED)
        if failed:
            violations.append(f"{file.name}: {failed} ownership proofs of an honest client failed")
        if self.config.mode is not Mode.TARGET_BASELINE:
            expected = sum(plan.by_fingerprint[fp].cipher.length for fp in unknown)
            if report.chunk_bytes_sent != expected:
                violations.append(
                    f"{file.name}: sent {report.chunk_bytes_sent} chunk bytes, "
                    f"{expected} were unique"
                )

    async def audit(self) -> None:
        violations = self.ledger.violations
        if self.log.duplicates:
            violations.append(f"{len(self.log.duplicates)} challenge pairs issued twice")
        cloud_id = self.cloud.config.cloud_id
        for record in self.log.records:
            if record.holder != cloud_id:
                continue
            entry = self.cloud.maps.get(record.level, record.key)
            if entry is not None and record.index in entry.invalid:
                violations.append(
                    f"Cloud issued pair {record.index} of {record.key.short()} granted to an edge"
                )
        stored = await self.cloud.stored_bytes()
        expected = sum(self.expected_stored.values())
        if stored != expected:
            violations.append(f"Cloud stores {stored} bytes, {expected} distinct bytes uploaded")
        self.ledger.stored_bytes = stored
        for file in self.workload.snapshots[-1]:
            client, plan = self.last_plans[file.name]
            restored = await client.restore(plan.file_hash, self.cloud)
            if restored != self.workload.read(file):
                violations.append(f"{file.name}: restored bytes differ")


async def run_experiment(
    config: ExperimentConfig, *, workload: Workload | None = None
) -> MetricLedger:
    """Run one experiment and return its ledger.

    Args:
        config: The run's configuration
        workload: A pre-generated workload; generated from ``config`` when
            omitted

    Returns:
        Per-snapshot metrics plus every invariant violation observed

    Raises:
        InfeasibleTargetError: If the configured dedup ratio cannot be generated
        StorageError: If the configured store fails
    """
    if workload is None:
        workload = gen_snapshots(config.workload, config.seed)
    store = await open_store(config)
    run = _Run(config, workload, store)
    try:
        preload = config.topology.preload_count(len(workload.snapshots))
        for snapshot in workload.snapshots[:preload]:
            for file in snapshot:
                await run.upload(file, None)
        if preload:
            await run.epoch()
        logger.info(
            f"Run {config.name} ({config.mode}): preloaded {preload} snapshots, "
            f"measuring {len(workload.snapshots) - preload}"
        )
        profile = config.dataset_profile or "custom"
        for k in range(preload, len(workload.snapshots)):
            row = SnapshotRow(config.mode, profile, config.latency.cloud_ratio, k)
            for file in workload.snapshots[k]:
                await run.upload(file, row)
            run.ledger.rows.append(row)
            logger.info(
                f"Snapshot {k}: {row.overall_ns / NS_PER_MS:.1f} ms, {row.bytes_sent} bytes sent"
            )
        await run.audit()
        run.ledger.background_ns = run.background.total(include_background=True)
        run.ledger.elimination = elimination_curve(workload, config.top_fractions)
    finally:
        await store.close()
    ledger = run.ledger
    for violation in ledger.violations:
        logger.warning(f"Run {config.name}: {violation}")
    return ledger
