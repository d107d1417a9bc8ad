"""Entity-level visual knowledge.

Named entities and regular nouns are pulled from every dialogue, frequency
filtered, and each surviving entity gets at least one image from an ordered
list of search providers; a deterministic mock provider keeps runs offline.
Surfaces are normalized (lowercase, plural nouns singularized by suffix rule)
so "flowers" and "flower" collapse into one entity.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .corpus import DialogueSession

NAMED_ENTITY = "named-entity"
NOUN = "noun"


class ExtractionError(RuntimeError):
    """A tagger failed; message names the turn."""


class SearchError(RuntimeError):
    pass


class TransientSearchError(SearchError):
    """Retryable provider failure (timeouts, throttling, 5xx)."""


class PermanentSearchError(SearchError):
    """Non-retryable provider failure; the provider is skipped."""


@dataclass
class ImageRef:
    locator: str
    provider: str
    license_tag: str = ""
    feature: list[float] | None = None

    def __post_init__(self):
        if not self.locator:
            raise ValueError("image locator must be non-empty")


@dataclass
class EntityRecord:
    surface: str
    kind: str
    corpus_frequency: int = 0
    images: list[ImageRef] = field(default_factory=list)
    fetch_failed: bool = False
    raw_surface: str | None = None

    def __post_init__(self):
        if not self.surface:
            raise ValueError("entity surface must be non-empty")
        if self.kind not in (NAMED_ENTITY, NOUN):
            raise ValueError(f"unknown entity kind {self.kind!r}")


_WORD_RE = re.compile(r"[A-Za-z0-9']+")


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text)


def singularize(word: str) -> str:
    """Suffix-rule singularization for regular English plurals."""
    w = word
    if w.endswith("ies") and len(w) > 4:
        return w[:-3] + "y"
    if w.endswith("ves") and len(w) > 4:
        return w[:-3] + "f"
    if w.endswith(("sses", "shes", "ches", "xes", "zes")):
        return w[:-2]
    if w.endswith("s") and not w.endswith(("ss", "us", "is")) and len(w) > 3:
        return w[:-1]
    return w


def normalize_surface(surface: str) -> str:
    toks = [t.lower() for t in words(surface)]
    if not toks:
        return ""
    toks[-1] = singularize(toks[-1])
    return " ".join(toks)


def match_surfaces(text: str, surfaces: list[str]) -> list[tuple[int, str]]:
    """Find occurrences of normalized surfaces in text, in token order.

    Multi-word surfaces match greedily (longest first at each position).
    Returns (token_position, normalized_surface) pairs, one per occurrence.
    """
    phrase_map: dict[tuple[str, ...], str] = {}
    for s in surfaces:
        norm = normalize_surface(s)
        if norm:
            phrase_map[tuple(norm.split())] = norm
    if not phrase_map:
        return []
    max_len = max(len(p) for p in phrase_map)
    # candidate spans normalize exactly like normalize_surface: lowercase
    # everything, singularize only the final word
    toks = [t.lower() for t in words(text)]
    hits = []
    i = 0
    while i < len(toks):
        matched = False
        for span in range(min(max_len, len(toks) - i), 0, -1):
            key = tuple(toks[i:i + span - 1]) + (singularize(toks[i + span - 1]),)
            if key in phrase_map:
                hits.append((i, phrase_map[key]))
                i += span
                matched = True
                break
        if not matched:
            i += 1
    return hits


class DictionaryTagger:
    """Tagger backed by a fixed phrase lexicon; fine for desk-scale fixtures."""

    def __init__(self, phrases: list[str]):
        self.phrases = list(phrases)

    def __call__(self, text: str) -> list[str]:
        return [surf for _, surf in match_surfaces(text, self.phrases)]


class HeuristicNerTagger:
    """Capitalized words that do not open a sentence are treated as named entities.

    Consecutive capitalized words merge into one surface ("New York").
    """

    def __call__(self, text: str) -> list[str]:
        toks = words(text)
        # sentence starts: token 0 and any token preceded by .!? in the raw text
        starts = set()
        prev_end = 0
        for i, tok in enumerate(toks):
            at = text.index(tok, prev_end)
            if i == 0 or any(c in ".!?" for c in text[prev_end:at]):
                starts.add(i)
            prev_end = at + len(tok)
        out = []
        i = 0
        while i < len(toks):
            tok = toks[i]
            if tok[0].isupper() and tok != "I" and i not in starts:
                j = i
                while (j + 1 < len(toks) and j + 1 not in starts
                       and toks[j + 1][0].isupper() and toks[j + 1] != "I"):
                    j += 1
                out.append(" ".join(toks[i:j + 1]))
                i = j + 1
            else:
                i += 1
        return out


class HeuristicNounTagger:
    """Plural forms and common noun suffixes; a crude but dependency-free default."""

    SUFFIXES = ("tion", "sion", "ment", "ness", "ity", "ance", "ence", "ship", "hood", "ism")

    def __call__(self, text: str) -> list[str]:
        out = []
        for tok in words(text):
            low = tok.lower()
            if len(low) > 3 and low.endswith("s") and not low.endswith(("ss", "us", "is")):
                out.append(tok)
            elif low.endswith(self.SUFFIXES):
                out.append(tok)
        return out


def extract_entities(session: DialogueSession, ner: Callable[[str], list[str]],
                     pos: Callable[[str], list[str]]) -> list[EntityRecord]:
    """Extract deduplicated entities from one session, in first-occurrence order.

    `corpus_frequency` counts occurrences within this session; corpus-wide
    counts come from aggregate_entities over all sessions afterwards. When a
    surface is both a named entity and a noun, named-entity wins.
    """
    records: dict[str, EntityRecord] = {}
    order: list[str] = []
    for turn in session.turns:
        try:
            ner_hits = ner(turn.text)
            noun_hits = pos(turn.text)
        except Exception as exc:
            raise ExtractionError(f"tagger failed at turn {turn.index}: {exc}") from exc
        kinds: dict[str, str] = {}
        raws: dict[str, str] = {}
        for s in noun_hits:
            norm = normalize_surface(s)
            if norm:
                kinds.setdefault(norm, NOUN)
                raws.setdefault(norm, s)
        for s in ner_hits:
            norm = normalize_surface(s)
            if norm:
                kinds[norm] = NAMED_ENTITY
                raws[norm] = s
        for _, surf in match_surfaces(turn.text, list(kinds)):
            rec = records.get(surf)
            if rec is None:
                rec = EntityRecord(surface=surf, kind=kinds[surf], raw_surface=raws[surf])
                records[surf] = rec
                order.append(surf)
            if kinds[surf] == NAMED_ENTITY:
                rec.kind = NAMED_ENTITY
            rec.corpus_frequency += 1
    return [records[s] for s in order]


def aggregate_entities(per_session: list[list[EntityRecord]]) -> list[EntityRecord]:
    """Merge per-session extractions into corpus-level records with summed counts."""
    merged: dict[str, EntityRecord] = {}
    order: list[str] = []
    for recs in per_session:
        for rec in recs:
            have = merged.get(rec.surface)
            if have is None:
                merged[rec.surface] = dataclasses.replace(rec, images=list(rec.images))
                order.append(rec.surface)
            else:
                have.corpus_frequency += rec.corpus_frequency
                if rec.kind == NAMED_ENTITY:
                    have.kind = NAMED_ENTITY
    return [merged[s] for s in order]


def filter_by_frequency(records: list[EntityRecord], min_count: int,
                        max_count: int) -> list[EntityRecord]:
    """Keep records with min_count <= corpus_frequency <= max_count (inclusive)."""
    if min_count > max_count:
        raise ValueError("min_count must be <= max_count")
    return [r for r in records if min_count <= r.corpus_frequency <= max_count]


# --- image search ----------------------------------------------------------


class RateLimiter:
    """Enforces a maximum request rate; clock and sleep injectable for tests."""

    def __init__(self, rate_per_sec: float = 2.0, clock=time.monotonic, sleep=time.sleep):
        if rate_per_sec <= 0:
            raise ValueError("rate must be positive")
        self.min_interval = 1.0 / rate_per_sec
        self._clock = clock
        self._sleep = sleep
        self._last: float | None = None

    def wait(self) -> None:
        now = self._clock()
        if self._last is not None:
            remaining = self._last + self.min_interval - now
            if remaining > 0:
                self._sleep(remaining)
                now = self._clock()
        self._last = now


class QueryCache:
    """Content-addressed on-disk cache, one JSON record per (provider, query)."""

    def __init__(self, cache_dir):
        from pathlib import Path

        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, provider: str, query: str):
        digest = hashlib.sha256(f"{provider}|{query}".encode("utf-8")).hexdigest()
        return self.dir / f"{digest}.json"

    def get(self, provider: str, query: str) -> list[ImageRef] | None:
        path = self._path(provider, query)
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            return [ImageRef(**rec) for rec in json.load(fh)]

    def put(self, provider: str, query: str, refs: list[ImageRef]) -> None:
        payload = [dataclasses.asdict(r) for r in refs]
        with open(self._path(provider, query), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)


class SearchClient:
    """Base image-search client: caching, rate limiting, request counting.

    Subclasses implement _search_uncached(query, n). Identical queries within
    a run (or across runs sharing a cache dir) never hit the backend twice.
    """

    provider = "unknown"
    page_size = 10

    def __init__(self, cache_dir=None, rate_per_sec: float = 2.0,
                 limiter: RateLimiter | None = None):
        self.cache = QueryCache(cache_dir) if cache_dir is not None else None
        self.limiter = limiter or RateLimiter(rate_per_sec)
        self.requests_made = 0
        self._session_cache: dict[str, list[ImageRef]] = {}

    def search(self, entity: str, n: int) -> list[ImageRef]:
        if n < 1:
            raise ValueError("n must be >= 1")
        query = entity.strip()
        cached = self._session_cache.get(query)
        if cached is None and self.cache is not None:
            cached = self.cache.get(self.provider, query)
        if cached is None:
            self.limiter.wait()
            self.requests_made += 1
            cached = self._search_uncached(query, max(n, self.page_size))
            if self.cache is not None:
                self.cache.put(self.provider, query, cached)
        self._session_cache[query] = cached
        return cached[:n]

    def _search_uncached(self, query: str, n: int) -> list[ImageRef]:
        raise NotImplementedError


class MockSearchClient(SearchClient):
    """Offline deterministic provider used by tests and default CLI runs.

    Locators, licenses, and pseudo visual features are all derived from the
    query text and the seed, so repeated runs are byte-identical.
    """

    provider = "mock"

    def __init__(self, seed: int = 0, n_available: int | Callable[[str], int] = 5,
                 feature_dim: int = 16, **kwargs):
        super().__init__(**kwargs)
        self.seed = seed
        self.n_available = n_available
        self.feature_dim = feature_dim

    def _count_for(self, query: str) -> int:
        if callable(self.n_available):
            return self.n_available(query)
        return self.n_available

    def _search_uncached(self, query: str, n: int) -> list[ImageRef]:
        slug = re.sub(r"[^a-z0-9]+", "-", query.lower()).strip("-") or "blank"
        refs = []
        for i in range(min(n, self._count_for(query))):
            digest = hashlib.blake2b(f"{self.seed}:{query}:{i}".encode("utf-8"),
                                     digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            feature = rng.standard_normal(self.feature_dim).round(6).tolist()
            refs.append(ImageRef(
                locator=f"mock://{slug}/{i}.jpg",
                provider=self.provider,
                license_tag="mock-public-domain",
                feature=feature,
            ))
        return refs


class HttpSearchClient(SearchClient):
    """Thin JSON-over-HTTP image search client.

    Point it at a provider endpoint; the params template may reference
    {query} and {n}. Items are read from `items_key` in the response, and
    each item's locator/license from the configured keys. 429/5xx and
    timeouts are transient, other HTTP errors permanent.
    """

    def __init__(self, provider: str, endpoint: str, params: dict[str, str],
                 items_key: str = "hits", locator_key: str = "url",
                 license_key: str = "license", timeout: float = 10.0, **kwargs):
        super().__init__(**kwargs)
        self.provider = provider
        self.endpoint = endpoint
        self.params = params
        self.items_key = items_key
        self.locator_key = locator_key
        self.license_key = license_key
        self.timeout = timeout

    def _search_uncached(self, query: str, n: int) -> list[ImageRef]:
        import requests

        params = {k: v.format(query=query, n=n) for k, v in self.params.items()}
        try:
            resp = requests.get(self.endpoint, params=params, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransientSearchError(f"{self.provider}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientSearchError(f"{self.provider}: HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise PermanentSearchError(f"{self.provider}: HTTP {resp.status_code}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise PermanentSearchError(f"{self.provider}: non-JSON response") from exc
        items = payload
        for part in self.items_key.split("."):
            items = items.get(part, []) if isinstance(items, dict) else []
        refs = []
        for item in items[:n]:
            locator = str(item.get(self.locator_key, ""))
            if not locator:
                continue
            refs.append(ImageRef(locator=locator, provider=self.provider,
                                 license_tag=str(item.get(self.license_key, ""))))
        return refs


def fetch_images(entity: EntityRecord, clients: list[SearchClient], n: int,
                 max_retries: int = 3, backoff_base: float = 0.5,
                 sleep=time.sleep) -> EntityRecord:
    """Collect up to n images for one entity, querying providers in order.

    Transient provider errors are retried with exponential backoff; permanent
    errors skip the provider. An entity that ends with zero images gets the
    fetch_failed flag instead of being dropped.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not clients:
        raise ValueError("need at least one search client")
    query = entity.raw_surface or entity.surface
    refs: list[ImageRef] = []
    for client in clients:
        remaining = n - len(refs)
        if remaining <= 0:
            break
        got: list[ImageRef] = []
        for attempt in range(max_retries):
            try:
                got = client.search(query, remaining)
                break
            except TransientSearchError:
                if attempt + 1 < max_retries:
                    sleep(backoff_base * (2 ** attempt))
            except PermanentSearchError:
                break
        refs.extend(got[:remaining])
    return dataclasses.replace(entity, images=refs, fetch_failed=not refs)


def fetch_all(records: list[EntityRecord], clients: list[SearchClient], n: int,
              **kwargs) -> tuple[list[EntityRecord], int]:
    """fetch_images over a manifest; returns (records, failure count)."""
    out = [fetch_images(rec, clients, n, **kwargs) for rec in records]
    return out, sum(1 for r in out if r.fetch_failed)


# --- manifest files --------------------------------------------------------


def save_manifest(path, records: list[EntityRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(dataclasses.asdict(rec), sort_keys=True) + "\n")


def load_manifest(path) -> list[EntityRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            raw["images"] = [ImageRef(**r) for r in raw.get("images", [])]
            records.append(EntityRecord(**raw))
    return records
