"""Synthetic backup snapshots with known redundancy.

A snapshot is a row of slots, each holding one *atom*: a chunk cut from a
seeded random stream by the same chunker the clients use, so every atom comes
back as exactly one chunk when files are re-chunked. Slots either draw from a
small Zipf-weighted hot pool (with probability ``hot_probability``) or hold a
fresh atom. Every later snapshot keeps the previous slot contents except for
a ``mutation_rate`` share of slots that are redrawn.

With ``S`` snapshots, hot probability ``h`` and a hot pool sized ``p`` times
the slot count, the expected dedup ratio is
``S / ((1 - h) * (1 + (S - 1) * m) + p)``. The mutation rate ``m`` is
calibrated by bisection on the generated layout and corrected once for atom
size variance.
"""

import hashlib
import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Self

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from edge_dedup.chunking import Chunker, ChunkerConfig
from edge_dedup.types import ConfigError, InfeasibleTargetError

logger = logging.getLogger(__name__)

_BLOCK_CHUNKS = 64
_BISECTION_STEPS = 40


class DatasetProfile(BaseModel):
    """Snapshot count and dedup ratio of a reference backup dataset."""

    model_config = ConfigDict(frozen=True)

    name: str
    snapshot_count: int = Field(..., ge=1)
    dedup_ratio: float = Field(..., gt=0.0)
    hot_probability: float = Field(default=0.3, ge=0.0, lt=1.0)


PROFILES: dict[str, DatasetProfile] = {
    profile.name: profile
    for profile in (
        DatasetProfile(name="lab", snapshot_count=33, dedup_ratio=27.1, hot_probability=0.9),
        DatasetProfile(name="fsl", snapshot_count=20, dedup_ratio=11.8, hot_probability=0.5),
        DatasetProfile(name="ms", snapshot_count=30, dedup_ratio=5.1, hot_probability=0.3),
        DatasetProfile(name="ubuntu", snapshot_count=12, dedup_ratio=4.1, hot_probability=0.3),
        DatasetProfile(name="gcc", snapshot_count=24, dedup_ratio=1.4, hot_probability=0.05),
    )
}


class SnapshotSpec(BaseModel):
    """Shape and redundancy of a synthetic snapshot series.

    Attributes:
        base_size: Approximate bytes per snapshot
        snapshot_count: Number of snapshots
        mutation_rate: Share of slots redrawn per snapshot; calibrated from
            ``target_dedup_ratio`` when omitted
        target_dedup_ratio: Total bytes over unique bytes to aim for
        hot_ratio: Hot pool size as a fraction of the slots per snapshot
        hot_probability: Probability that a drawn slot comes from the hot pool
        zipf_s: Exponent of the hot pool's popularity distribution
        files_per_snapshot: Files each snapshot is split into
        hot_drift: Share of hot pool atoms replaced per snapshot
        chunker: Chunking parameters shared with the clients
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    base_size: int = Field(default=4 << 20, gt=0, description="Bytes per snapshot")
    snapshot_count: int = Field(default=10, ge=1, description="Snapshots")
    mutation_rate: float | None = Field(default=None, ge=0.0, le=1.0, description="Redraw rate")
    target_dedup_ratio: float | None = Field(default=None, gt=0.0, description="Target ratio")
    hot_ratio: float = Field(default=0.03, ge=0.0, le=1.0, description="Hot pool fraction")
    hot_probability: float = Field(default=0.3, ge=0.0, lt=1.0, description="Hot draw rate")
    zipf_s: float = Field(default=1.0, ge=0.0, description="Zipf exponent")
    files_per_snapshot: int = Field(default=4, ge=1, description="Files per snapshot")
    hot_drift: float = Field(default=0.0, ge=0.0, le=1.0, description="Hot pool turnover")
    chunker: ChunkerConfig = Field(
        default_factory=lambda: ChunkerConfig.for_average(8192), description="Chunker"
    )

    @model_validator(mode="after")
    def validate_redundancy(self) -> "SnapshotSpec":
        """Require an explicit mutation rate or a target to calibrate it from."""
        if self.mutation_rate is None and self.target_dedup_ratio is None:
            raise ValueError("Either mutation_rate or target_dedup_ratio must be set")
        return self

    @classmethod
    def from_profile(cls, profile: DatasetProfile | str, **overrides: Any) -> Self:
        """Build a spec from a named dataset profile; keyword arguments win."""
        if isinstance(profile, str):
            profile = PROFILES[profile]
        values: dict[str, Any] = {
            "snapshot_count": profile.snapshot_count,
            "target_dedup_ratio": profile.dedup_ratio,
            "hot_probability": profile.hot_probability,
        }
        values.update(overrides)
        return cls(**values)

    @property
    def slots(self) -> int:
        return max(self.files_per_snapshot, self.base_size // self.chunker.avg_size)

    @property
    def hot_pool_size(self) -> int:
        if self.hot_probability == 0.0:
            return 0
        return max(1, round(self.hot_ratio * self.slots))


def expected_mutation_rate(spec: SnapshotSpec, target: float) -> float:
    """Closed-form mutation rate for a target ratio, clamped to [0, 1]."""
    s, h = spec.snapshot_count, spec.hot_probability
    p = spec.hot_pool_size / spec.slots
    if s == 1:
        return 0.0
    m = (s / target - (1.0 - h) - p) / ((s - 1) * (1.0 - h))
    return min(1.0, max(0.0, m))


class AtomFactory:
    """Endless supply of chunker-stable atoms cut from a seeded random stream."""

    def __init__(self, chunker: ChunkerConfig, seed: int) -> None:
        self._chunker = Chunker(chunker)
        self._rng = np.random.default_rng([seed, 0xA7])
        self._block = chunker.max_size * _BLOCK_CHUNKS
        self.atoms: list[bytes] = []

    def ensure(self, count: int) -> list[bytes]:
        """Return at least ``count`` atoms, cutting more stream as needed."""
        while len(self.atoms) < count:
            block = self._rng.bytes(self._block)
            cuts = self._chunker.cut_points(block)
            start = 0
            for cut in cuts[:-1]:
                self.atoms.append(block[start:cut])
                start = cut
        return self.atoms


@dataclass(frozen=True)
class _Draws:
    """Every random choice of the layout, fixed per seed."""

    redraw: npt.NDArray[np.float64]
    hot: npt.NDArray[np.float64]
    rank: npt.NDArray[np.int64]
    generation: npt.NDArray[np.int64]

    @classmethod
    def sample(cls, spec: SnapshotSpec, rng: np.random.Generator) -> "_Draws":
        shape = (spec.snapshot_count, spec.slots)
        pool = spec.hot_pool_size
        if pool:
            weights = 1.0 / np.arange(1, pool + 1, dtype=np.float64) ** spec.zipf_s
            rank = rng.choice(pool, size=shape, p=weights / weights.sum())
        else:
            rank = np.zeros(shape, dtype=np.int64)
        generation = np.zeros((spec.snapshot_count, max(pool, 1)), dtype=np.int64)
        for k in range(1, spec.snapshot_count):
            replaced = rng.random(max(pool, 1)) < spec.hot_drift
            generation[k] = generation[k - 1] + replaced
        return cls(rng.random(shape), rng.random(shape), rank.astype(np.int64), generation)


def _layout(spec: SnapshotSpec, draws: _Draws, m: float, h: float) -> npt.NDArray[np.int64]:
    """Atom key of every slot; equal keys are the same atom."""
    s, n = spec.snapshot_count, spec.slots
    pool = max(spec.hot_pool_size, 1)
    layout = np.empty((s, n), dtype=np.int64)
    slot_keys = np.arange(n, dtype=np.int64)
    for k in range(s):
        fresh = k * n + slot_keys
        hot = s * n + draws.generation[k][draws.rank[k]] * pool + draws.rank[k]
        drawn = np.where(draws.hot[k] < h, hot, fresh)
        if k == 0:
            layout[k] = drawn
        else:
            layout[k] = np.where(draws.redraw[k] < m, drawn, layout[k - 1])
    return layout


def _count_ratio(layout: npt.NDArray[np.int64]) -> float:
    return layout.size / np.unique(layout).size


def _calibrate(spec: SnapshotSpec, draws: _Draws, target: float) -> float:
    h = spec.hot_probability
    high = _count_ratio(_layout(spec, draws, 0.0, h))
    low = _count_ratio(_layout(spec, draws, 1.0, h))
    if target > high * 1.1 or target < low / 1.1:
        raise InfeasibleTargetError(
            f"Dedup ratio {target} is outside the reachable range [{low:.2f}, {high:.2f}] "
            f"for {spec.snapshot_count} snapshots"
        )
    if target >= high:
        return 0.0
    if target <= low:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(_BISECTION_STEPS):
        mid = (lo + hi) / 2
        if _count_ratio(_layout(spec, draws, mid, h)) > target:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


@dataclass(frozen=True)
class WorkloadFile:
    """One file of a snapshot, as a run of atoms."""

    name: str
    snapshot: int
    index: int
    atoms: tuple[int, ...]


@dataclass
class Workload:
    """Generated snapshots plus their ground truth.

    Attributes:
        spec: The spec it was generated from
        seed: Generation seed
        mutation_rate: Mutation rate actually used
        atoms: Atom bytes by atom id (ids follow first appearance)
        snapshots: Files of every snapshot, in upload order
    """

    spec: SnapshotSpec
    seed: int
    mutation_rate: float
    atoms: list[bytes]
    snapshots: list[list[WorkloadFile]]

    def read(self, file: WorkloadFile) -> bytes:
        return b"".join(self.atoms[atom] for atom in file.atoms)

    def files(self) -> Iterator[WorkloadFile]:
        for snapshot in self.snapshots:
            yield from snapshot

    @property
    def total_bytes(self) -> int:
        return sum(len(self.atoms[a]) for file in self.files() for a in file.atoms)

    @property
    def unique_bytes(self) -> int:
        used = {a for file in self.files() for a in file.atoms}
        return sum(len(self.atoms[a]) for a in used)

    @property
    def dedup_ratio(self) -> float:
        return self.total_bytes / self.unique_bytes

    def snapshot_bytes(self, index: int) -> int:
        return sum(len(self.atoms[a]) for file in self.snapshots[index] for a in file.atoms)

    def first_seen(self) -> list[list[bool]]:
        """Per file, whether each chunk occurrence is the atom's first anywhere."""
        seen: set[int] = set()
        labels: list[list[bool]] = []
        for file in self.files():
            row: list[bool] = []
            for atom in file.atoms:
                row.append(atom not in seen)
                seen.add(atom)
            labels.append(row)
        return labels

    def manifest(self) -> "Manifest":
        labels = self.first_seen()
        return Manifest(
            seed=self.seed,
            spec=self.spec,
            mutation_rate=self.mutation_rate,
            dedup_ratio=self.dedup_ratio,
            total_bytes=self.total_bytes,
            unique_bytes=self.unique_bytes,
            files=[
                ManifestFile(
                    name=file.name,
                    snapshot=file.snapshot,
                    sha256=hashlib.sha256(self.read(file)).hexdigest(),
                    size=sum(len(self.atoms[a]) for a in file.atoms),
                    atoms=list(file.atoms),
                    first_seen=row,
                )
                for file, row in zip(self.files(), labels, strict=True)
            ],
        )


class ManifestFile(BaseModel):
    name: str
    snapshot: int
    sha256: str
    size: int
    atoms: list[int]
    first_seen: list[bool]


class Manifest(BaseModel):
    """Ground truth written next to a generated corpus."""

    seed: int
    spec: SnapshotSpec
    mutation_rate: float
    dedup_ratio: float
    total_bytes: int
    unique_bytes: int
    files: list[ManifestFile]


def gen_snapshots(spec: SnapshotSpec, seed: int = 0) -> Workload:
    """Generate a snapshot series.

    Args:
        spec: Shape and redundancy of the series
        seed: Seed of every random choice

    Returns:
        The workload with its ground truth

    Raises:
        InfeasibleTargetError: If the target ratio is below 1 or cannot be
            reached with this many snapshots
    """
    target = spec.target_dedup_ratio
    if spec.mutation_rate is None and target is not None and target < 1.0:
        raise InfeasibleTargetError(f"Dedup ratio {target} is below 1")
    rng = np.random.default_rng(seed)
    draws = _Draws.sample(spec, rng)
    factory = AtomFactory(spec.chunker, seed)

    def materialize(m: float) -> npt.NDArray[np.int64]:
        layout = _layout(spec, draws, m, spec.hot_probability)
        _, first, inverse = np.unique(layout.ravel(), return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        ids = np.empty_like(order)
        ids[order] = np.arange(order.size)
        factory.ensure(order.size)
        return ids[inverse].reshape(layout.shape)

    if spec.mutation_rate is not None:
        m = spec.mutation_rate
        atom_ids = materialize(m)
    elif target is not None:
        logger.debug(f"Closed-form mutation rate {expected_mutation_rate(spec, target):.4f}")
        m = _calibrate(spec, draws, target)
        atom_ids = materialize(m)
        sizes = np.array([len(a) for a in factory.atoms[: int(atom_ids.max()) + 1]])
        byte_ratio = sizes[atom_ids].sum() / sizes.sum()
        correction = byte_ratio / _count_ratio(atom_ids)
        if abs(correction - 1.0) > 0.01:
            m = _calibrate(spec, draws, target / correction)
            atom_ids = materialize(m)
    else:
        raise ConfigError("Either mutation_rate or target_dedup_ratio must be set")

    per_file = np.array_split(np.arange(spec.slots), spec.files_per_snapshot)
    snapshots = [
        [
            WorkloadFile(
                name=f"snapshot-{k:03d}/file-{j:03d}.bin",
                snapshot=k,
                index=j,
                atoms=tuple(int(a) for a in atom_ids[k, slots]),
            )
            for j, slots in enumerate(per_file)
        ]
        for k in range(spec.snapshot_count)
    ]
    workload = Workload(spec, seed, m, factory.atoms, snapshots)
    logger.info(
        f"Generated {spec.snapshot_count} snapshots of {spec.slots} chunks: "
        f"mutation rate {m:.4f}, dedup ratio {workload.dedup_ratio:.2f}"
    )
    return workload


def write_corpus(workload: Workload, out_dir: Path) -> Path:
    """Write every file plus ``manifest.json`` under ``out_dir``."""
    for file in workload.files():
        path = out_dir / file.name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(workload.read(file))
    manifest = out_dir / "manifest.json"
    manifest.write_text(workload.manifest().model_dump_json(indent=2))
    return manifest
