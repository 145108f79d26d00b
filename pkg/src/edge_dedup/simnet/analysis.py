"""Offline analyses over generated workloads.

None of these touch the protocol stack: they replay a workload's ground truth
through the selection structures directly, so they run in seconds even for
long snapshot series.
"""

import hashlib
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from edge_dedup.chunking import ChunkerConfig
from edge_dedup.encoding import le64
from edge_dedup.simnet.workload import SnapshotSpec, Workload, WorkloadFile, gen_snapshots
from edge_dedup.sketch import SelectionScheme, Selector, ShareIndex, SketchConfig
from edge_dedup.types import FileRecipe, Fingerprint

logger = logging.getLogger(__name__)


def atom_fingerprint(atom: int) -> Fingerprint:
    """Stand-in fingerprint of an atom for analyses that skip encryption."""
    return Fingerprint(hashlib.sha256(b"edge-dedup/atom" + le64(atom)).digest())


def synthetic_recipe(workload: Workload, file: WorkloadFile) -> FileRecipe:
    file_hash = Fingerprint(hashlib.sha256(file.name.encode()).digest())
    return FileRecipe.build(
        file_hash, ((atom_fingerprint(a), len(workload.atoms[a])) for a in file.atoms)
    )


def elimination_ratio(workload: Workload, top_fraction: float) -> float:
    """Share of checked bytes an edge holding the hottest chunks could answer.

    Chunks are ranked by exact occurrence count (ties by first appearance).
    Every occurrence of a top-ranked chunk after its first is avoidable; the
    ratio is avoidable bytes over all chunk bytes.

    Raises:
        ValueError: If ``top_fraction`` is outside (0, 1]
    """
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"Top fraction {top_fraction} is outside (0, 1]")
    occurrences = np.fromiter(
        (a for file in workload.files() for a in file.atoms), dtype=np.int64
    )
    if occurrences.size == 0:
        return 0.0
    atoms, counts = np.unique(occurrences, return_counts=True)
    sizes = np.array([len(workload.atoms[a]) for a in atoms], dtype=np.int64)
    top = math.ceil(top_fraction * atoms.size)
    order = np.lexsort((atoms, -counts))[:top]
    avoidable = int(((counts[order] - 1) * sizes[order]).sum())
    total = int((counts * sizes).sum())
    return avoidable / total


def elimination_curve(workload: Workload, fractions: Iterable[float]) -> dict[float, float]:
    return {fraction: elimination_ratio(workload, fraction) for fraction in fractions}


@dataclass(frozen=True)
class DecayPoint:
    snapshot: int
    scheme: SelectionScheme
    hit_ratio: float
    refreshed: bool


def _hit_ratio(share: ShareIndex, recipes: Sequence[FileRecipe]) -> float:
    members = share.as_set()
    total = hits = 0
    for recipe in recipes:
        for fp in recipe.fingerprints:
            total += 1
            hits += fp in members
    return hits / total if total else 0.0


def decay_experiment(
    workload: Workload,
    *,
    refresh_at: Iterable[int] = (10, 20),
    schemes: Iterable[SelectionScheme] = tuple(SelectionScheme),
    coverage: float = 0.1,
    warmup: int = 1,
    sketch_config: SketchConfig | None = None,
) -> list[DecayPoint]:
    """Replay snapshots against a share-index refreshed only at chosen snapshots.

    The first share-index is built after ``warmup`` snapshots. Before each
    snapshot listed in ``refresh_at`` the index is rebuilt from everything
    observed so far, with ``coverage`` of the distinct chunks seen as slots.
    Each later snapshot is scored by the share of its chunk occurrences the
    current index holds.

    Returns:
        One point per scheme and measured snapshot
    """
    if warmup < 1:
        raise ValueError("At least one warm-up snapshot is required")
    refreshes = set(refresh_at) | {warmup}
    recipes = [
        [synthetic_recipe(workload, file) for file in snapshot] for snapshot in workload.snapshots
    ]
    points: list[DecayPoint] = []
    for scheme in schemes:
        selector = Selector(scheme, sketch_config)
        seen: set[Fingerprint] = set()
        share = ShareIndex(())
        for k, snapshot in enumerate(recipes):
            refreshed = k in refreshes and k >= warmup
            if refreshed:
                slots = math.ceil(coverage * len(seen))
                share = selector.select(slots, epoch=k)
                selector.start_epoch()
            if k >= warmup:
                points.append(DecayPoint(k, scheme, _hit_ratio(share, snapshot), refreshed))
            for recipe in snapshot:
                selector.observe(recipe)
                seen.update(recipe.fingerprints)
        logger.info(f"Decay replay of {len(recipes)} snapshots done for {scheme}")
    return points


@dataclass(frozen=True)
class OverheadPoint:
    avg_chunk_size: int
    scheme: SelectionScheme
    memory_bytes: int
    update_operations: int
    entries: int


def selection_overhead(
    spec: SnapshotSpec,
    chunk_sizes: Iterable[int] = (2048, 4096, 8192),
    *,
    seed: int = 0,
    sketch_config: SketchConfig | None = None,
) -> list[OverheadPoint]:
    """Memory and update work of every selection scheme per average chunk size."""
    points: list[OverheadPoint] = []
    for size in chunk_sizes:
        sized = spec.model_copy(update={"chunker": ChunkerConfig.for_average(size)})
        workload = gen_snapshots(sized, seed)
        recipes = [synthetic_recipe(workload, file) for file in workload.files()]
        distinct = len({fp for recipe in recipes for fp in recipe.fingerprints})
        for scheme in SelectionScheme:
            selector = Selector(scheme, sketch_config)
            for recipe in recipes:
                selector.observe(recipe)
            points.append(
                OverheadPoint(
                    avg_chunk_size=size,
                    scheme=scheme,
                    memory_bytes=selector.memory_bytes(),
                    update_operations=selector.update_operations(),
                    entries=distinct,
                )
            )
    return points
