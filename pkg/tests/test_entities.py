import dataclasses

import pytest

from conftest import make_session
from mmdial.corpus import DialogueSession, Turn
from mmdial.entities import (DictionaryTagger, EntityRecord, ExtractionError,
                             HeuristicNerTagger, HeuristicNounTagger, ImageRef,
                             MockSearchClient, PermanentSearchError, RateLimiter,
                             SearchClient, TransientSearchError, aggregate_entities,
                             extract_entities, fetch_all, fetch_images,
                             filter_by_frequency, load_manifest, match_surfaces,
                             normalize_surface, save_manifest, singularize)


class TestNormalization:
    @pytest.mark.parametrize("word,expected", [
        ("flowers", "flower"),
        ("berries", "berry"),
        ("leaves", "leaf"),
        ("classes", "class"),
        ("dishes", "dish"),
        ("boxes", "box"),
        ("bus", "bus"),
        ("analysis", "analysis"),
        ("grass", "grass"),
        ("dog", "dog"),
    ])
    def test_singularize(self, word, expected):
        assert singularize(word) == expected

    def test_surface_lowercased_and_singular(self):
        assert normalize_surface("New Yorks") == "new york"
        assert normalize_surface("  Flowers ") == "flower"

    def test_match_surfaces_multiword_longest_first(self):
        hits = match_surfaces("I saw New York City from the plane",
                              ["New York City", "New York", "plane"])
        assert hits == [(2, "new york city"), (7, "plane")]

    def test_match_surfaces_plural_final_word_of_phrase(self):
        # only the final word of a phrase is singularized, on both sides
        hits = match_surfaces("they collect sports cars", ["sports car"])
        assert hits == [(2, "sports car")]
        assert match_surfaces("a sport car show", ["sports car"]) == []


class TestExtraction:
    def test_dictionary_fixture(self):
        sess = DialogueSession("f", [
            Turn("A", "I love Ikebana and flowers", 0),
            Turn("B", "me too", 1),
        ])
        ner = DictionaryTagger(["Ikebana"])
        pos = DictionaryTagger(["flower"])
        records = extract_entities(sess, ner, pos)
        assert [(r.surface, r.kind) for r in records] == \
            [("ikebana", "named-entity"), ("flower", "noun")]

    def test_no_nouns_empty(self):
        sess = DialogueSession("f", [Turn("A", "ok then", 0), Turn("B", "sure", 1)])
        records = extract_entities(sess, DictionaryTagger([]), DictionaryTagger([]))
        assert records == []

    def test_repeated_noun_deduped_with_count(self, session, fixture_taggers):
        ner, pos = fixture_taggers
        records = extract_entities(session, ner, pos)
        by_surface = {r.surface: r for r in records}
        assert by_surface["flower"].corpus_frequency == 3
        assert by_surface["garden"].corpus_frequency == 3
        assert len(records) == 3

    def test_named_entity_precedence_on_collision(self):
        sess = DialogueSession("f", [
            Turn("A", "we watched Flowers yesterday", 0),
            Turn("B", "flowers the movie is great", 1),
        ])
        records = extract_entities(sess, DictionaryTagger(["Flowers"]),
                                   DictionaryTagger(["flower"]))
        assert [(r.surface, r.kind) for r in records] == [("flower", "named-entity")]

    def test_first_occurrence_order_within_turn(self):
        sess = DialogueSession("f", [
            Turn("A", "the garden had one flower", 0),
            Turn("B", "nice", 1),
        ])
        records = extract_entities(sess, DictionaryTagger([]),
                                   DictionaryTagger(["flower", "garden"]))
        assert [r.surface for r in records] == ["garden", "flower"]

    def test_turn_permutation_set_equality(self, session, fixture_taggers):
        ner, pos = fixture_taggers
        base = {r.surface for r in extract_entities(session, ner, pos)}
        flipped = DialogueSession("g", [
            dataclasses.replace(session.turns[i], index=j)
            for j, i in enumerate([3, 2, 1, 0])
        ])
        permuted = {r.surface for r in extract_entities(flipped, ner, pos)}
        assert base == permuted

    def test_tagger_failure_names_turn(self, session):
        def broken(text):
            raise RuntimeError("tagger crashed")

        with pytest.raises(ExtractionError, match="turn 0"):
            extract_entities(session, broken, DictionaryTagger([]))

    def test_aggregate_sums_frequencies(self, fixture_taggers):
        ner, pos = fixture_taggers
        s1 = make_session("s1")
        s2 = make_session("s2")
        merged = aggregate_entities([extract_entities(s, ner, pos) for s in (s1, s2)])
        by_surface = {r.surface: r for r in merged}
        assert by_surface["flower"].corpus_frequency == 6


class TestHeuristicTaggers:
    def test_capitalized_mid_sentence(self):
        tagger = HeuristicNerTagger()
        out = tagger("Yesterday I visited New York with Bob. Great trip.")
        assert out == ["New York", "Bob"]

    def test_sentence_initial_word_ignored(self):
        assert HeuristicNerTagger()("Paris is lovely") == []

    def test_noun_suffixes_and_plurals(self):
        out = HeuristicNounTagger()("the flowers show great happiness")
        assert "flowers" in out and "happiness" in out


class TestFrequencyFilter:
    def test_boundaries_inclusive(self):
        records = [EntityRecord(surface=f"e{f}", kind="noun", corpus_frequency=f)
                   for f in (2, 3, 100, 101)]
        kept = filter_by_frequency(records, 3, 100)
        assert [r.corpus_frequency for r in kept] == [3, 100]

    def test_empty_input(self):
        assert filter_by_frequency([], 3, 100) == []

    def test_order_preserved(self):
        records = [EntityRecord(surface=f"e{i}", kind="noun", corpus_frequency=5)
                   for i in range(4)]
        assert [r.surface for r in filter_by_frequency(records, 1, 10)] == \
            [f"e{i}" for i in range(4)]

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            filter_by_frequency([], 10, 3)


class ScriptedClient(SearchClient):
    """Replays a per-call script: ints are result counts, exceptions raise."""

    provider = "scripted"

    def __init__(self, script, **kwargs):
        super().__init__(**kwargs)
        self.script = list(script)
        self.calls = 0

    def _search_uncached(self, query, n):
        action = self.script[min(self.calls, len(self.script) - 1)]
        self.calls += 1
        if isinstance(action, Exception):
            raise action
        return [ImageRef(locator=f"scripted://{query}/{i}", provider=self.provider)
                for i in range(min(action, n))]


def _fast(client_kwargs=None):
    return dict(rate_per_sec=1e6, **(client_kwargs or {}))


class TestFetch:
    def test_truncates_to_n(self):
        entity = EntityRecord(surface="flower", kind="noun")
        client = MockSearchClient(seed=1, n_available=3, **_fast())
        out = fetch_images(entity, [client], 2)
        assert len(out.images) == 2
        assert not out.fetch_failed
        assert all(r.provider == "mock" for r in out.images)

    def test_failover_to_second_client(self):
        entity = EntityRecord(surface="flower", kind="noun")
        first = MockSearchClient(seed=1, n_available=0, **_fast())
        second = MockSearchClient(seed=2, n_available=1, **_fast())
        out = fetch_images(entity, [first, second], 2)
        assert len(out.images) == 1
        assert not out.fetch_failed

    def test_all_exhausted_sets_flag(self):
        entity = EntityRecord(surface="flower", kind="noun")
        clients = [MockSearchClient(seed=s, n_available=0, **_fast()) for s in (1, 2)]
        out = fetch_images(entity, clients, 2)
        assert out.images == [] and out.fetch_failed

    def test_transient_error_retried_with_backoff(self):
        sleeps = []
        client = ScriptedClient([TransientSearchError("hiccup"),
                                 TransientSearchError("hiccup"), 2], **_fast())
        entity = EntityRecord(surface="dog", kind="noun")
        out = fetch_images(entity, [client], 2, max_retries=3, backoff_base=0.5,
                           sleep=sleeps.append)
        assert len(out.images) == 2
        assert client.calls == 3
        assert sleeps == [0.5, 1.0]  # exponential and bounded

    def test_permanent_error_skips_provider(self):
        bad = ScriptedClient([PermanentSearchError("forbidden")], **_fast())
        good = MockSearchClient(seed=3, n_available=2, **_fast())
        out = fetch_images(EntityRecord(surface="dog", kind="noun"), [bad, good], 2)
        assert bad.calls == 1
        assert len(out.images) == 2

    def test_queries_use_original_casing(self):
        seen = []

        class Spy(SearchClient):
            provider = "spy"

            def _search_uncached(self, query, n):
                seen.append(query)
                return [ImageRef(locator="x://1", provider="spy")]

        entity = EntityRecord(surface="ikebana", kind="named-entity",
                              raw_surface="Ikebana")
        fetch_images(entity, [Spy(**_fast())], 1)
        assert seen == ["Ikebana"]

    def test_fetch_all_reports_failures(self):
        records = [EntityRecord(surface="a", kind="noun"),
                   EntityRecord(surface="b", kind="noun")]
        client = MockSearchClient(seed=1, n_available=lambda q: 2 if q == "a" else 0,
                                  **_fast())
        out, failures = fetch_all(records, [client], 2)
        assert failures == 1
        assert out[0].images and out[1].fetch_failed


class TestCacheAndRateLimit:
    def test_warm_cache_idempotent_and_offline(self, tmp_path):
        cache = tmp_path / "cache"
        entity = EntityRecord(surface="flower", kind="noun")
        first = MockSearchClient(seed=1, n_available=3, cache_dir=cache, **_fast())
        run1 = fetch_images(entity, [first], 3)
        assert first.requests_made == 1

        second = MockSearchClient(seed=1, n_available=3, cache_dir=cache, **_fast())
        run2 = fetch_images(entity, [second], 3)
        assert second.requests_made == 0  # zero network requests on warm cache
        assert run1.images == run2.images

    def test_repeated_query_within_run_hits_cache(self, tmp_path):
        client = MockSearchClient(seed=1, n_available=3,
                                  cache_dir=tmp_path / "c", **_fast())
        client.search("flower", 2)
        client.search("flower", 2)
        assert client.requests_made == 1

    def test_rate_limiter_spacing(self):
        now = [0.0]
        sleeps = []

        def clock():
            return now[0]

        def sleep(dt):
            sleeps.append(dt)
            now[0] += dt

        limiter = RateLimiter(rate_per_sec=2.0, clock=clock, sleep=sleep)
        limiter.wait()
        limiter.wait()
        limiter.wait()
        assert sleeps == pytest.approx([0.5, 0.5])

    def test_limiter_no_sleep_when_slow(self):
        now = [0.0]
        sleeps = []

        def clock():
            now[0] += 10.0
            return now[0]

        limiter = RateLimiter(rate_per_sec=2.0, clock=clock, sleep=sleeps.append)
        limiter.wait()
        limiter.wait()
        assert sleeps == []


def test_manifest_roundtrip(tmp_path):
    records = [
        EntityRecord(surface="flower", kind="noun", corpus_frequency=3,
                     images=[ImageRef("mock://flower/0.jpg", "mock", "cc0", [0.1, 0.2])],
                     raw_surface="Flowers"),
        EntityRecord(surface="void", kind="named-entity", corpus_frequency=5,
                     fetch_failed=True),
    ]
    path = tmp_path / "entities.jsonl"
    save_manifest(path, records)
    assert load_manifest(path) == records


def test_mock_client_deterministic_features():
    a = MockSearchClient(seed=7, n_available=2, feature_dim=4, **_fast())
    b = MockSearchClient(seed=7, n_available=2, feature_dim=4, **_fast())
    assert a.search("flower", 2) == b.search("flower", 2)
    assert a.search("flower", 2)[0].feature is not None
