"""Share-index selection: count-min frequency tracking plus logical locality.

The cloud counts every chunk reference in a count-min sketch. Because a
sketch cannot enumerate its keys, a bounded candidate heap remembers the
fingerprints seen during the current epoch. At rebuild time the most
frequent candidates fill most of the share-index and chunks that sit close to
them inside file recipes fill the rest.
"""

import hashlib
import heapq
import logging
import math
from collections import Counter
from collections.abc import Collection, Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from edge_dedup.encoding import le64
from edge_dedup.types import (
    FINGERPRINT_SIZE,
    ConfigError,
    FileRecipe,
    Fingerprint,
    SaturatedError,
)

logger = logging.getLogger(__name__)

_U64_MAX = (1 << 64) - 1
_COUNTER_BYTES = 8
_EXACT_ENTRY_BYTES = FINGERPRINT_SIZE + 8 + 24
"""Key, counter and the three hash-table words one exact-count entry costs."""


class SketchConfig(BaseModel):
    """Count-min sketch dimensions.

    Attributes:
        depth: Number of rows (d); failure probability is e^-d
        width: Counters per row (w); relative error is e/w
        seed: Seed of the row hash keys
        candidate_factor: Candidate heap bound as a multiple of share-index slots
    """

    model_config = ConfigDict(frozen=True)

    depth: int = Field(default=4, ge=1, le=32, description="Rows (d)")
    width: int = Field(default=1 << 16, ge=2, description="Counters per row (w)")
    seed: int = Field(default=0, ge=0, description="Row hash seed")
    candidate_factor: int = Field(default=4, ge=1, description="Candidate heap multiplier")


class CountMinSketch:
    """A d×w matrix of u64 counters with one keyed hash per row.

    Example:
        >>> cms = CountMinSketch(depth=4, width=1024)
        >>> cms.add(fp)
        >>> cms.frequency(fp) >= 1
        True
    """

    def __init__(self, depth: int = 4, width: int = 1 << 16, seed: int = 0) -> None:
        if depth < 1 or width < 2:
            raise ValueError(f"Invalid sketch dimensions {depth}x{width}")
        self.depth = depth
        self.width = width
        self.seed = seed
        self._table: npt.NDArray[np.uint64] = np.zeros((depth, width), dtype=np.uint64)
        self._rows = np.arange(depth)
        self._row_keys = [
            hashlib.sha256(b"edge-dedup/cms" + le64(seed) + le64(i)).digest() for i in range(depth)
        ]
        self.total = 0
        self.counter_updates = 0

    @classmethod
    def from_config(cls, config: SketchConfig) -> "CountMinSketch":
        return cls(config.depth, config.width, config.seed)

    def columns(self, fp: Fingerprint) -> npt.NDArray[np.intp]:
        """Column index of ``fp`` in every row."""
        return np.fromiter(
            (
                int.from_bytes(hashlib.sha256(key + fp).digest()[:8], "little") % self.width
                for key in self._row_keys
            ),
            dtype=np.intp,
            count=self.depth,
        )

    def add(self, fp: Fingerprint, count: int = 1) -> None:
        """Increment the counter of ``fp`` in every row.

        Raises:
            SaturatedError: If any of the counters would exceed the u64 range
        """
        cols = self.columns(fp)
        current = self._table[self._rows, cols]
        if int(current.max()) > _U64_MAX - count:
            raise SaturatedError(f"Counter for {fp.short()} would overflow")
        self._table[self._rows, cols] = current + np.uint64(count)
        self.total += count
        self.counter_updates += self.depth

    def frequency(self, fp: Fingerprint) -> int:
        """Estimated count of ``fp``: the minimum over its row counters."""
        return int(self._table[self._rows, self.columns(fp)].min())

    @property
    def epsilon(self) -> float:
        return math.e / self.width

    @property
    def delta(self) -> float:
        return math.exp(-self.depth)

    def error_bound(self) -> float:
        """Additive overestimate that holds with probability at least 1 - delta."""
        return self.epsilon * self.total

    def memory_bytes(self) -> int:
        return int(self._table.nbytes)


class CandidateTracker:
    """Fingerprints seen this epoch, bounded by evicting the lowest estimate.

    Stale heap entries are skipped lazily; the heap is compacted when it grows
    past four times the live set.
    """

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("Candidate capacity must be positive")
        self.capacity = capacity
        self._estimates: dict[Fingerprint, int] = {}
        self._heap: list[tuple[int, Fingerprint]] = []
        self.updates = 0

    def offer(self, fp: Fingerprint, estimate: int) -> None:
        self.updates += 1
        if self._estimates.get(fp) == estimate:
            return
        self._estimates[fp] = estimate
        heapq.heappush(self._heap, (estimate, fp))
        while len(self._estimates) > self.capacity:
            low, victim = heapq.heappop(self._heap)
            if self._estimates.get(victim) == low:
                del self._estimates[victim]
        if len(self._heap) > 4 * max(self.capacity, len(self._estimates)):
            self._heap = [(est, fp) for fp, est in self._estimates.items()]
            heapq.heapify(self._heap)

    def resize(self, capacity: int) -> None:
        self.capacity = max(1, capacity)
        while len(self._estimates) > self.capacity:
            low, victim = heapq.heappop(self._heap)
            if self._estimates.get(victim) == low:
                del self._estimates[victim]

    def candidates(self) -> list[Fingerprint]:
        return sorted(self._estimates)

    def clear(self) -> None:
        self._estimates.clear()
        self._heap.clear()

    def __len__(self) -> int:
        return len(self._estimates)

    def __contains__(self, fp: object) -> bool:
        return fp in self._estimates

    def memory_bytes(self) -> int:
        return len(self._estimates) * _EXACT_ENTRY_BYTES + len(self._heap) * 16


class ShareIndexSpec(BaseModel):
    """Share-index sizing and the frequency/locality split.

    Attributes:
        total_slots: Fingerprints the share-index may hold
        cms_fraction: Share of slots filled by frequency
        proximity_threshold: Minimum locality score of a candidate
    """

    model_config = ConfigDict(frozen=True)

    total_slots: int = Field(..., gt=0, description="Share-index size")
    cms_fraction: float = Field(default=0.9, ge=0.0, le=1.0, description="Frequency share")
    proximity_threshold: float = Field(default=0.5, ge=0.0, description="Locality cut-off")

    @property
    def cms_slots(self) -> int:
        return math.ceil(self.cms_fraction * self.total_slots)


@dataclass(frozen=True, slots=True)
class ShareIndex:
    """An immutable share-index, members ordered by selection priority."""

    members: tuple[Fingerprint, ...]
    epoch: int = 0
    _set: frozenset[Fingerprint] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_set", frozenset(self.members))

    def __contains__(self, fp: object) -> bool:
        return fp in self._set

    def __len__(self) -> int:
        return len(self.members)

    def as_set(self) -> frozenset[Fingerprint]:
        return self._set

    def sorted_fingerprints(self) -> list[Fingerprint]:
        return sorted(self._set)


def locality_scores(
    frequent: Collection[Fingerprint], recipes: Iterable[FileRecipe]
) -> dict[Fingerprint, float]:
    """Cumulative proximity score of every chunk near a frequent chunk.

    For each frequent chunk ``f`` and each recipe containing it, every chunk
    ``c`` of the recipe gains ``1 / (1 + |idx(c) - idx(f)|)``, where
    ``idx(f)`` is the first position of ``f`` in the recipe.
    """
    frequent_set = frozenset(frequent)
    scores: dict[Fingerprint, float] = {}
    for recipe in recipes:
        anchors: dict[Fingerprint, int] = {}
        for pos, entry in enumerate(recipe.entries):
            if entry.fingerprint in frequent_set and entry.fingerprint not in anchors:
                anchors[entry.fingerprint] = pos
        for anchor_pos in anchors.values():
            for pos, entry in enumerate(recipe.entries):
                fp = entry.fingerprint
                scores[fp] = scores.get(fp, 0.0) + 1.0 / (1 + abs(pos - anchor_pos))
    return scores


def locality_select(
    frequent: Collection[Fingerprint], recipes: Iterable[FileRecipe], spec: ShareIndexSpec
) -> list[Fingerprint]:
    """Rank locality candidates around the frequent chunks.

    Args:
        frequent: Anchor fingerprints (an empty set yields no candidates)
        recipes: Recipes to scan
        spec: Supplies the proximity threshold

    Returns:
        Non-frequent fingerprints scoring at least the threshold, by score
        descending and fingerprint bytes ascending
    """
    frequent_set = frozenset(frequent)
    if not frequent_set:
        return []
    scores = locality_scores(frequent_set, recipes)
    ranked = [
        (fp, score)
        for fp, score in scores.items()
        if fp not in frequent_set and score >= spec.proximity_threshold
    ]
    ranked.sort(key=lambda item: (-item[1], item[0]))
    return [fp for fp, _ in ranked]


def rank_by_frequency(sketch: CountMinSketch, fps: Iterable[Fingerprint]) -> list[Fingerprint]:
    estimates = {fp: sketch.frequency(fp) for fp in set(fps)}
    return sorted(estimates, key=lambda fp: (-estimates[fp], fp))


def assemble_share_index(
    ranked: Sequence[Fingerprint],
    recipes: Iterable[FileRecipe],
    spec: ShareIndexSpec,
    *,
    extra_anchors: Iterable[Fingerprint] = (),
    epoch: int = 0,
) -> ShareIndex:
    """Fill the share-index from a frequency ranking plus locality candidates.

    The top ``ceil(cms_fraction * slots)`` ranked fingerprints come first,
    locality candidates fill the remaining slots and any shortfall is
    backfilled with the next most frequent fingerprints.
    """
    slots = min(spec.total_slots, len(ranked))
    cms_slots = min(slots, math.ceil(spec.cms_fraction * slots))
    chosen: list[Fingerprint] = list(ranked[:cms_slots])
    taken = set(chosen)
    if len(chosen) < slots:
        anchors = taken | set(extra_anchors)
        for fp in locality_select(anchors, recipes, spec):
            if len(chosen) >= slots:
                break
            if fp not in taken:
                chosen.append(fp)
                taken.add(fp)
    for fp in ranked[cms_slots:]:
        if len(chosen) >= slots:
            break
        if fp not in taken:
            chosen.append(fp)
            taken.add(fp)
    return ShareIndex(tuple(chosen), epoch)


def build_share_index(
    sketch: CountMinSketch,
    observed: Iterable[Fingerprint],
    recipes: Iterable[FileRecipe],
    spec: ShareIndexSpec,
    *,
    extra_anchors: Iterable[Fingerprint] = (),
    epoch: int = 0,
) -> ShareIndex:
    """Combine count-min frequency selection with locality selection.

    Args:
        sketch: Cumulative frequency sketch
        observed: Candidate fingerprints (duplicates are ignored)
        recipes: Recipes used for locality scoring
        spec: Slots, frequency share and proximity threshold
        extra_anchors: Additional locality anchors, such as fingerprints edge
            servers hold in their local indexes
        epoch: Epoch tag stored on the result

    Returns:
        A share-index of at most ``spec.total_slots`` distinct fingerprints
    """
    ranked = rank_by_frequency(sketch, observed)
    index = assemble_share_index(
        ranked, recipes, spec, extra_anchors=extra_anchors, epoch=epoch
    )
    logger.debug(
        f"Built share-index of {len(index)} entries from {len(ranked)} candidates "
        f"(epoch {epoch})"
    )
    return index


class FrequencySelector:
    """Exact per-fingerprint counting, the memory-hungry selection baseline."""

    def __init__(self) -> None:
        self._counts: Counter[Fingerprint] = Counter()
        self.updates = 0

    def add(self, fp: Fingerprint) -> None:
        self._counts[fp] += 1
        self.updates += 1

    def frequency(self, fp: Fingerprint) -> int:
        return self._counts[fp]

    def ranked(self) -> list[Fingerprint]:
        return sorted(self._counts, key=lambda fp: (-self._counts[fp], fp))

    def memory_bytes(self) -> int:
        return len(self._counts) * _EXACT_ENTRY_BYTES

    def __len__(self) -> int:
        return len(self._counts)


class SelectionScheme(StrEnum):
    """How a share-index is chosen.

    Attributes:
        FREQUENCY: Exact counts, top fingerprints only
        CMS: Count-min estimates over tracked candidates, top fingerprints only
        CMS_LOCALITY: Count-min estimates plus locality candidates
    """

    FREQUENCY = "frequency"
    CMS = "cms"
    CMS_LOCALITY = "cms_locality"


class Selector:
    """Streams chunk references into one selection scheme.

    Example:
        >>> selector = Selector(SelectionScheme.CMS_LOCALITY, SketchConfig(width=4096))
        >>> for recipe in recipes:
        ...     selector.observe(recipe)
        >>> index = selector.select(slots=64)
    """

    def __init__(
        self,
        scheme: SelectionScheme,
        sketch_config: SketchConfig | None = None,
        *,
        cms_fraction: float = 0.9,
        proximity_threshold: float = 0.5,
        candidate_capacity: int = 1 << 14,
    ) -> None:
        self.scheme = scheme
        config = sketch_config or SketchConfig()
        self.cms_fraction = cms_fraction if scheme is SelectionScheme.CMS_LOCALITY else 1.0
        self.proximity_threshold = proximity_threshold
        self.exact = FrequencySelector() if scheme is SelectionScheme.FREQUENCY else None
        self.sketch = None if self.exact else CountMinSketch.from_config(config)
        self.tracker = None if self.exact else CandidateTracker(candidate_capacity)
        self.recipes: list[FileRecipe] = []

    def _sketched(self) -> tuple[CountMinSketch, CandidateTracker]:
        if self.sketch is None or self.tracker is None:
            raise ConfigError(f"Selection scheme {self.scheme} keeps no sketch")
        return self.sketch, self.tracker

    def observe(self, recipe: FileRecipe) -> None:
        for fp in recipe.fingerprints:
            if self.exact is not None:
                self.exact.add(fp)
            else:
                sketch, tracker = self._sketched()
                sketch.add(fp)
                tracker.offer(fp, sketch.frequency(fp))
        if self.scheme is SelectionScheme.CMS_LOCALITY:
            self.recipes.append(recipe)

    def select(self, slots: int, *, epoch: int = 0) -> ShareIndex:
        if self.exact is not None:
            return ShareIndex(tuple(self.exact.ranked()[:slots]), epoch)
        sketch, tracker = self._sketched()
        spec = ShareIndexSpec(
            total_slots=max(1, slots),
            cms_fraction=self.cms_fraction,
            proximity_threshold=self.proximity_threshold,
        )
        return build_share_index(sketch, tracker.candidates(), self.recipes, spec, epoch=epoch)

    def start_epoch(self) -> None:
        """Forget the recipes scored for locality; frequencies are kept."""
        self.recipes.clear()

    def memory_bytes(self) -> int:
        if self.exact is not None:
            return self.exact.memory_bytes()
        sketch, tracker = self._sketched()
        return sketch.memory_bytes() + tracker.memory_bytes()

    def update_operations(self) -> int:
        """Counter or table updates performed so far."""
        if self.exact is not None:
            return self.exact.updates
        sketch, tracker = self._sketched()
        return sketch.counter_updates + tracker.updates
