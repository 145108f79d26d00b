"""Test suite for count-min frequency tracking and share-index selection."""

import random

import pytest

from edge_dedup.sketch import (
    CandidateTracker,
    CountMinSketch,
    SelectionScheme,
    Selector,
    ShareIndex,
    ShareIndexSpec,
    SketchConfig,
    assemble_share_index,
    build_share_index,
    locality_scores,
    locality_select,
)
from edge_dedup.testing import ExactCounter, brute_force_locality_scores
from edge_dedup.types import ConfigError, FileRecipe, SaturatedError, fingerprint_of


def fps(n, tag=b"c"):
    return [fingerprint_of(tag + i.to_bytes(4, "little")) for i in range(n)]


def recipe_of(chunks, name=b"f"):
    return FileRecipe.build(fingerprint_of(name), [(fp, 1) for fp in chunks])


@pytest.fixture
def zipf_stream():
    """Five thousand references drawn from a skewed distribution over 500 chunks."""
    pool = fps(500)
    rng = random.Random(3)
    weights = [1.0 / (i + 1) for i in range(len(pool))]
    return rng.choices(pool, weights=weights, k=5000)


class TestCountMinSketch:
    """Tests for CountMinSketch."""

    def test_never_underestimates(self, zipf_stream):
        """Every estimate is at least the true count."""
        cms = CountMinSketch(depth=4, width=256)
        exact = ExactCounter()
        for fp in zipf_stream:
            cms.add(fp)
            exact.add(fp)
        assert cms.total == exact.total
        for fp in exact.counts:
            assert cms.frequency(fp) >= exact.frequency(fp)

    def test_error_bound_holds_for_most_keys(self, zipf_stream):
        """Overestimates beyond epsilon * N are rare."""
        cms = CountMinSketch(depth=4, width=1024)
        exact = ExactCounter()
        for fp in zipf_stream:
            cms.add(fp)
            exact.add(fp)
        bound = cms.error_bound()
        over = sum(1 for fp in exact.counts if cms.frequency(fp) - exact.frequency(fp) > bound)
        assert over <= 0.05 * len(exact.counts)

    def test_unseen_key_on_empty_sketch(self):
        """An empty sketch estimates zero."""
        assert CountMinSketch(depth=2, width=16).frequency(fingerprint_of(b"x")) == 0

    def test_saturation(self):
        """A counter that would pass the u64 range raises SaturatedError."""
        cms = CountMinSketch(depth=2, width=16)
        fp = fingerprint_of(b"x")
        cms.add(fp, (1 << 64) - 1)
        with pytest.raises(SaturatedError):
            cms.add(fp)

    def test_dimensions_and_bounds(self):
        """epsilon and delta follow the width and depth; memory is the table."""
        cms = CountMinSketch.from_config(SketchConfig(depth=3, width=1000))
        assert cms.epsilon == pytest.approx(2.718281828 / 1000)
        assert cms.delta == pytest.approx(0.049787, rel=1e-4)
        assert cms.memory_bytes() == 3 * 1000 * 8

    def test_invalid_dimensions(self):
        """A sketch needs at least one row of two counters."""
        with pytest.raises(ValueError):
            CountMinSketch(depth=0, width=16)

    def test_seeded_columns(self):
        """Different seeds hash a key to different columns."""
        fp = fingerprint_of(b"x")
        a = CountMinSketch(depth=8, width=1 << 20, seed=1).columns(fp)
        b = CountMinSketch(depth=8, width=1 << 20, seed=2).columns(fp)
        assert list(a) != list(b)


class TestCandidateTracker:
    """Tests for the bounded candidate heap."""

    def test_keeps_highest_estimates(self):
        """Past capacity the lowest estimate is evicted."""
        tracker = CandidateTracker(capacity=2)
        a, b, c = fps(3)
        tracker.offer(a, 5)
        tracker.offer(b, 1)
        tracker.offer(c, 3)
        assert set(tracker.candidates()) == {a, c}

    def test_updated_estimate_survives(self):
        """A raised estimate protects a candidate from eviction."""
        tracker = CandidateTracker(capacity=2)
        a, b, c = fps(3)
        tracker.offer(a, 1)
        tracker.offer(b, 2)
        tracker.offer(a, 9)
        tracker.offer(c, 3)
        assert set(tracker.candidates()) == {a, c}

    def test_resize_and_clear(self):
        """Shrinking evicts; clearing empties."""
        tracker = CandidateTracker(capacity=4)
        for i, fp in enumerate(fps(4)):
            tracker.offer(fp, i)
        tracker.resize(1)
        assert len(tracker) == 1
        tracker.clear()
        assert len(tracker) == 0


class TestLocality:
    """Tests for locality scoring and selection."""

    def test_scores_match_brute_force(self):
        """Scores equal a naive scan over every recipe and anchor."""
        rng = random.Random(5)
        pool = fps(40)
        recipes = [
            recipe_of([rng.choice(pool) for _ in range(30)], name=bytes([i])) for i in range(12)
        ]
        frequent = pool[:5]
        fast = locality_scores(frequent, recipes)
        slow = brute_force_locality_scores(frequent, recipes)
        assert fast.keys() == slow.keys()
        for fp, score in slow.items():
            assert fast[fp] == pytest.approx(score)

    def test_neighbours_score_by_distance(self):
        """A chunk next to an anchor scores 1/2, two away 1/3."""
        a, b, c = fps(3)
        scores = locality_scores([a], [recipe_of([a, b, c])])
        assert scores == pytest.approx({a: 1.0, b: 0.5, c: 1 / 3})

    def test_select_excludes_anchors_and_low_scores(self):
        """Selection drops anchors and candidates under the threshold."""
        a, b, c = fps(3)
        spec = ShareIndexSpec(total_slots=10, proximity_threshold=0.4)
        assert locality_select([a], [recipe_of([a, b, c])], spec) == [b]

    def test_no_anchors(self):
        """Without frequent chunks there are no locality candidates."""
        spec = ShareIndexSpec(total_slots=4)
        assert locality_select([], [recipe_of(fps(3))], spec) == []


class TestShareIndex:
    """Tests for share-index assembly."""

    def test_frequency_slots_come_first(self):
        """The first ceil(cms_fraction * slots) members are the top ranked."""
        ranked = fps(20)
        spec = ShareIndexSpec(total_slots=10, cms_fraction=0.5, proximity_threshold=0.0)
        index = assemble_share_index(ranked, [recipe_of(ranked)], spec)
        assert len(index) == 10
        assert index.members[:5] == tuple(ranked[:5])
        assert len(index.as_set()) == 10

    def test_backfill_when_locality_is_short(self):
        """Missing locality candidates are replaced by the next most frequent."""
        ranked = fps(8)
        spec = ShareIndexSpec(total_slots=6, cms_fraction=0.5)
        index = assemble_share_index(ranked, [], spec, epoch=3)
        assert index.members == tuple(ranked[:6])
        assert index.epoch == 3

    def test_never_larger_than_candidates(self):
        """A share-index holds at most as many entries as there are candidates."""
        cms = CountMinSketch(depth=2, width=64)
        observed = fps(3)
        for fp in observed:
            cms.add(fp)
        index = build_share_index(cms, observed, [], ShareIndexSpec(total_slots=50))
        assert len(index) == 3

    def test_membership(self):
        """ShareIndex supports membership and sorted export."""
        members = fps(4)
        index = ShareIndex(tuple(members))
        assert members[0] in index
        assert fingerprint_of(b"other") not in index
        assert index.sorted_fingerprints() == sorted(members)


class TestSelector:
    """Tests for the streaming selection schemes."""

    def test_exact_and_sketch_agree_on_heavy_hitters(self, zipf_stream):
        """With a wide sketch the top picks equal the exact top picks."""
        recipes = [recipe_of(zipf_stream[i : i + 50], bytes([i % 256])) for i in range(0, 5000, 50)]
        exact = Selector(SelectionScheme.FREQUENCY)
        approx = Selector(SelectionScheme.CMS, SketchConfig(width=1 << 14))
        for recipe in recipes:
            exact.observe(recipe)
            approx.observe(recipe)
        assert set(exact.select(5).members) == set(approx.select(5).members)

    def test_locality_scheme_keeps_recipes_until_epoch(self):
        """Only the locality scheme keeps recipes, and start_epoch drops them."""
        selector = Selector(SelectionScheme.CMS_LOCALITY, SketchConfig(width=256))
        selector.observe(recipe_of(fps(4)))
        assert len(selector.recipes) == 1
        selector.start_epoch()
        assert selector.recipes == []
        plain = Selector(SelectionScheme.CMS, SketchConfig(width=256))
        plain.observe(recipe_of(fps(4)))
        assert plain.recipes == []

    def test_exact_memory_grows_with_distinct_keys(self):
        """Exact counting costs memory per key; the sketch table does not grow."""
        exact = Selector(SelectionScheme.FREQUENCY)
        approx = Selector(SelectionScheme.CMS, SketchConfig(width=256), candidate_capacity=16)
        exact.observe(recipe_of(fps(10)))
        approx.observe(recipe_of(fps(10)))
        small_exact, small_approx = exact.memory_bytes(), approx.memory_bytes()
        exact.observe(recipe_of(fps(1000, b"more")))
        approx.observe(recipe_of(fps(1000, b"more")))
        assert exact.memory_bytes() > 50 * small_exact
        assert approx.memory_bytes() < 2 * small_approx
        assert exact.update_operations() == 1010

    def test_exact_scheme_has_no_sketch(self):
        """Sketch-only operations on a selector without a sketch raise ConfigError."""
        selector = Selector(SelectionScheme.FREQUENCY)
        selector.exact = None
        with pytest.raises(ConfigError):
            selector.select(4)
        with pytest.raises(ConfigError):
            selector.memory_bytes()


class TestSelectionQuality:
    """The share-index captures skewed reference streams."""

    def test_share_index_beats_random_selection(self, zipf_stream):
        """On a skewed workload the share-index hits far more often than a random pick."""
        recipes = [recipe_of(zipf_stream[i : i + 50], bytes([i % 256])) for i in range(0, 5000, 50)]
        cms = CountMinSketch(depth=4, width=2048)
        for fp in zipf_stream:
            cms.add(fp)
        spec = ShareIndexSpec(total_slots=25)
        index = build_share_index(cms, zipf_stream, recipes, spec)
        chosen = index.as_set()
        baseline = set(random.Random(5).sample(sorted(set(zipf_stream)), len(chosen)))

        weights = [1.0 / (i + 1) for i in range(500)]
        future = random.Random(11).choices(fps(500), weights=weights, k=5000)
        share_hits = sum(fp in chosen for fp in future) / len(future)
        random_hits = sum(fp in baseline for fp in future) / len(future)
        assert len(chosen) == 25
        assert share_hits > 2 * random_hits
