"""Turn-level image retrieval.

Dialogue turns are summarized, embedded together with pool captions, and the
top-k images per turn are found by exact brute-force cosine scan (dot product
of unit vectors). The scan is the reference path; any approximate index must
reproduce it exactly before it may be enabled.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .corpus import SOURCE_TAGS, CaptionedImage, DialogueSession


class EmbeddingError(RuntimeError):
    """The embedding backend failed; message carries the batch position."""


class QueryError(ValueError):
    """Malformed retrieval query (wrong dimension, bad k)."""


class ConsistencyError(ValueError):
    """Retrieval results reference images missing from the pool."""


class TextEmbedder(Protocol):
    dimension: int

    def embed(self, texts: list[str]) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic test embedder: hashed bag-of-words random projection.

    Each token hashes (blake2b, salted with the seed) into one of n_buckets
    rows of a fixed random matrix; a text embeds as the sum of its token rows.
    Same seed + same text always gives the same vector, with no model files.
    """

    def __init__(self, dimension: int = 64, seed: int = 0, n_buckets: int = 4096):
        self.dimension = dimension
        self.seed = seed
        self.n_buckets = n_buckets
        rng = np.random.default_rng(seed)
        self._table = rng.standard_normal((n_buckets, dimension)).astype(np.float64)

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(f"{self.seed}:{token}".encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.n_buckets

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for i, text in enumerate(texts):
            for token in text.lower().split():
                out[i] += self._table[self._bucket(token)]
        return out


class SentenceEncoderAdapter:
    """Adapter around a sentence-transformers model for real corpus runs."""

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2"):
        from sentence_transformers import SentenceTransformer  # deferred, heavy

        self._model = SentenceTransformer(model_name)
        self.dimension = int(self._model.get_sentence_embedding_dimension())

    def embed(self, texts: list[str]) -> np.ndarray:
        return np.asarray(self._model.encode(texts, show_progress_bar=False), dtype=np.float64)


def embed_texts(texts: list[str], embedder: TextEmbedder) -> np.ndarray:
    """Embed texts and L2-normalize every row, so dot product = cosine."""
    if not texts:
        raise ValueError("texts must be non-empty")
    try:
        vectors = np.asarray(embedder.embed(list(texts)), dtype=np.float64)
    except Exception:
        # retry one at a time to name the offending batch position
        for i, text in enumerate(texts):
            try:
                embedder.embed([text])
            except Exception as exc:
                raise EmbeddingError(f"backend failed at batch position {i}: {exc}") from exc
        raise
    if vectors.shape != (len(texts), embedder.dimension):
        raise EmbeddingError(
            f"backend returned shape {vectors.shape}, expected {(len(texts), embedder.dimension)}")
    for i in range(len(texts)):
        if not np.all(np.isfinite(vectors[i])):
            raise EmbeddingError(f"non-finite embedding at batch position {i}")
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    if np.any(zero):
        # degenerate all-cancelling vector: pin to a fixed basis direction
        vectors[zero, 0] = 1.0
        norms[zero, 0] = 1.0
    return vectors / norms


def summarize_turn(text: str, summarizer: Callable[[str], str] | None = None,
                   max_words: int = 30, provenance: list | None = None) -> str:
    """Shorten a turn to at most max_words words.

    A pluggable text-to-text summarizer runs first; if it fails or returns
    nothing usable, we fall back to leading-words truncation and record the
    fallback in `provenance` (when given).
    """
    text = text.strip()
    if not text:
        raise ValueError("text must be non-empty")
    candidate = None
    if summarizer is not None:
        try:
            candidate = summarizer(text)
        except Exception as exc:
            if provenance is not None:
                provenance.append({"event": "summarizer-fallback", "reason": str(exc)})
            candidate = None
        if candidate is not None and not candidate.strip():
            if provenance is not None:
                provenance.append({"event": "summarizer-fallback", "reason": "empty output"})
            candidate = None
    if candidate is None:
        candidate = text
    words = candidate.split()
    return " ".join(words[:max_words])


class ExtractiveSummarizer:
    """Cheap deterministic summarizer: keep the densest sentence.

    Sentences are scored by their count of content words (alphabetic, longer
    than 3 chars); ties go to the earliest sentence.
    """

    def __call__(self, text: str) -> str:
        parts = [p.strip() for p in _split_sentences(text) if p.strip()]
        if len(parts) <= 1:
            return text
        def score(sent: str) -> int:
            return sum(1 for w in sent.split() if len(w) > 3 and any(c.isalpha() for c in w))
        best = max(range(len(parts)), key=lambda i: (score(parts[i]), -i))
        return parts[best]


def _split_sentences(text: str) -> list[str]:
    out, buf = [], []
    for ch in text:
        buf.append(ch)
        if ch in ".!?":
            out.append("".join(buf))
            buf = []
    if buf:
        out.append("".join(buf))
    return out


@dataclass
class EmbeddingIndex:
    """Unit-norm caption embeddings plus the row -> image_id map."""
    keys: np.ndarray
    image_ids: list[str]

    def __post_init__(self):
        if self.keys.shape[0] != len(self.image_ids):
            raise ValueError("index row count must equal id count")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("image ids must be unique")
        if self.keys.size and not np.allclose(np.linalg.norm(self.keys, axis=1),
                                              1.0, atol=1e-6):
            raise ValueError("index rows must be unit vectors")

    @property
    def dimension(self) -> int:
        return int(self.keys.shape[1])

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass
class TurnRetrievalResult:
    session_id: str
    turn_index: int
    ranked: list[tuple[str, float]]

    def __post_init__(self):
        for (a_id, a_score), (b_id, b_score) in zip(self.ranked, self.ranked[1:]):
            if b_score > a_score:
                raise ValueError("scores must be non-increasing")
            if b_score == a_score and b_id < a_id:
                raise ValueError("ties must be broken by ascending image_id")


def build_index(pool: list[CaptionedImage], embedder: TextEmbedder) -> EmbeddingIndex:
    """Embed every pool caption into a brute-force retrieval index."""
    if not pool:
        raise ValueError("caption pool must be non-empty")
    keys = embed_texts([img.caption for img in pool], embedder)
    return EmbeddingIndex(keys=keys, image_ids=[img.image_id for img in pool])


def retrieve_topk(index: EmbeddingIndex, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by cosine similarity, ties broken by ascending image_id.

    The query is normalized here, so any positive scaling of it leaves the
    ranking unchanged.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != index.dimension:
        raise QueryError(f"query dimension {query.shape[0]} != index dimension {index.dimension}")
    if k < 1:
        raise QueryError(f"k must be >= 1, got {k}")
    norm = np.linalg.norm(query)
    if norm == 0.0:
        raise QueryError("query vector must be non-zero")
    scores = index.keys @ (query / norm)
    ids = np.asarray(index.image_ids)
    order = np.lexsort((ids, -scores))[:k]
    return [(str(ids[row]), float(np.clip(scores[row], -1.0, 1.0))) for row in order]


def retrieve_for_sessions(sessions: list[DialogueSession], index: EmbeddingIndex,
                          embedder: TextEmbedder, k: int = 5,
                          summarizer: Callable[[str], str] | None = None,
                          max_words: int = 30,
                          provenance: list | None = None) -> list[TurnRetrievalResult]:
    """Retrieve top-k images for every turn of every session.

    The query for a turn is the summarized text of its exchange (the turn plus
    its partner utterance), since one conversational turn is a two-speaker
    exchange. Partner turns therefore share a ranking.
    """
    queries, keys = [], []
    for session in sessions:
        for turn in session.turns:
            partner = turn.index + 1 if turn.index % 2 == 0 else turn.index - 1
            texts = [turn.text]
            if 0 <= partner < len(session.turns):
                pair = [turn.index, partner]
                texts = [session.turns[i].text for i in sorted(pair)]
            joined = " ".join(texts)
            queries.append(summarize_turn(joined, summarizer, max_words, provenance))
            keys.append((session.session_id, turn.index))
    vectors = embed_texts(queries, embedder)
    results = []
    for (sid, tidx), vec in zip(keys, vectors):
        results.append(TurnRetrievalResult(session_id=sid, turn_index=tidx,
                                           ranked=retrieve_topk(index, vec, k)))
    return results


def source_distribution(results: list[TurnRetrievalResult],
                        pool: list[CaptionedImage]) -> dict[str, float]:
    """Percentage of rank-1 retrieved images coming from each pool source."""
    if not results:
        raise ValueError("need at least one retrieval result")
    source_of = {img.image_id: img.source_tag for img in pool}
    counts = {tag: 0 for tag in SOURCE_TAGS}
    total = 0
    for res in results:
        if not res.ranked:
            continue
        top_id = res.ranked[0][0]
        if top_id not in source_of:
            raise ConsistencyError(f"retrieved image {top_id!r} not present in pool")
        counts[source_of[top_id]] += 1
        total += 1
    if total == 0:
        raise ValueError("no rank-1 hits to count")
    return {tag: 100.0 * counts[tag] / total for tag in SOURCE_TAGS}


# --- on-disk formats -------------------------------------------------------

_EMB_MAGIC = b"EMB1"


def save_embedding_matrix(path, matrix: np.ndarray) -> None:
    """Write a little-endian float32 matrix with a (dimension, rows) header."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<II", matrix.shape[1], matrix.shape[0]))
        fh.write(matrix.astype("<f4").tobytes(order="C"))


def load_embedding_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _EMB_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        dim, rows = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != dim * rows:
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(rows, dim).astype(np.float64)


def save_results(path, results: list[TurnRetrievalResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for res in results:
            rec = {"session_id": res.session_id, "turn_index": res.turn_index,
                   "ranked": [[i, s] for i, s in res.ranked]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_results(path) -> list[TurnRetrievalResult]:
    results = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            results.append(TurnRetrievalResult(
                session_id=rec["session_id"],
                turn_index=int(rec["turn_index"]),
                ranked=[(str(i), float(s)) for i, s in rec["ranked"]],
            ))
    return results
