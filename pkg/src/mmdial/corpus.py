"""Dialogue corpus handling: sessions, chunking, the image-caption pool, and dataset stats.

Sessions and caption pools live in line-delimited JSON files (one record per
line) so fixtures stay diffable and appendable. Speakers are normalized to
"A"/"B" in order of first appearance; the original role name is kept on the
turn.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

SPEAKER_TAGS = ("A", "B")
DOMAIN_TAGS = ("knowledge-grounded", "daily")
SOURCE_TAGS = ("pool-A", "pool-B", "pool-C", "pool-D")

FORMATS = ("wow-like", "dd-like")
_FORMAT_DOMAIN = {"wow-like": "knowledge-grounded", "dd-like": "daily"}


class CorpusError(ValueError):
    """Base error for corpus loading and validation."""


class SchemaError(CorpusError):
    """A record does not parse or violates the file schema."""


class EmptyCorpusError(CorpusError):
    """The file contains no records."""


class PoolError(CorpusError):
    """The caption pool is inconsistent (duplicate ids, feature dims, ...)."""


@dataclass
class Turn:
    speaker: str
    text: str
    index: int
    role: str | None = None
    source_index: int | None = None

    def __post_init__(self):
        self.text = self.text.strip()
        if self.speaker not in SPEAKER_TAGS:
            raise SchemaError(f"speaker tag must be one of {SPEAKER_TAGS}, got {self.speaker!r}")
        if not self.text:
            raise SchemaError(f"turn {self.index}: empty text")
        if self.index < 0:
            raise SchemaError(f"negative turn index {self.index}")


@dataclass
class DialogueSession:
    session_id: str
    turns: list[Turn]
    domain_tag: str = "daily"
    knowledge_passages: list[str] | None = None
    # set on chunks produced by chunk_sessions
    parent_id: str | None = None
    response_offset: int | None = None

    def __post_init__(self):
        if self.domain_tag not in DOMAIN_TAGS:
            raise SchemaError(f"{self.session_id}: unknown domain tag {self.domain_tag!r}")
        if len(self.turns) < 2:
            raise SchemaError(f"{self.session_id}: needs at least 2 turns, got {len(self.turns)}")
        for i, turn in enumerate(self.turns):
            if turn.index != i:
                raise SchemaError(f"{self.session_id}: turn indices must run 0..N-1")
            if i > 0 and turn.speaker == self.turns[i - 1].speaker:
                raise SchemaError(f"{self.session_id}: speakers must alternate (turn {i})")
        if self.knowledge_passages is not None and self.domain_tag != "knowledge-grounded":
            raise SchemaError(f"{self.session_id}: knowledge passages only allowed for knowledge-grounded sessions")


@dataclass
class CaptionedImage:
    image_id: str
    caption: str
    source_tag: str
    feature: list[float] | None = None

    def __post_init__(self):
        self.caption = self.caption.strip()
        if not self.caption:
            raise PoolError(f"{self.image_id}: empty caption")
        if self.source_tag not in SOURCE_TAGS:
            raise PoolError(f"{self.image_id}: unknown source tag {self.source_tag!r}")


@dataclass
class DatasetStats:
    num_sessions: int
    num_utterances: int
    unique_turn_images: int
    unique_entities: int
    avg_turn_images_per_session: float
    avg_entity_images_per_session: float
    max_entity_images_per_session: int
    min_entity_images_per_session: int

    def __post_init__(self):
        counts = (self.num_sessions, self.num_utterances, self.unique_turn_images, self.unique_entities)
        if any(c < 0 for c in counts):
            raise ValueError("stats counts must be non-negative")
        if not (self.min_entity_images_per_session
                <= self.avg_entity_images_per_session
                <= self.max_entity_images_per_session):
            raise ValueError("entity image stats must satisfy min <= avg <= max")


def _normalize_speakers(raw_turns: list[dict], where: str) -> list[Turn]:
    role_map: dict[str, str] = {}
    turns = []
    for i, rec in enumerate(raw_turns):
        raw = str(rec.get("speaker", ""))
        if raw not in role_map:
            if len(role_map) >= 2:
                raise SchemaError(f"{where}: more than two speakers ({raw!r})")
            role_map[raw] = SPEAKER_TAGS[len(role_map)]
        turns.append(Turn(
            speaker=role_map[raw],
            text=str(rec.get("text", "")),
            index=i,
            role=raw if raw not in SPEAKER_TAGS else None,
        ))
    return turns


def load_dialogues(path, format: str) -> list[DialogueSession]:
    """Load dialogue sessions from a line-delimited JSON file.

    Each line holds one session: {"session_id", "turns": [{"speaker", "text"}...],
    "knowledge": [...]?}. `format` picks the domain: "wow-like" sessions are
    knowledge-grounded and may carry passages, "dd-like" sessions may not.
    """
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {format!r}")
    domain = _FORMAT_DOMAIN[format]
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: not valid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict) or "session_id" not in rec or "turns" not in rec:
                raise SchemaError(f"line {lineno}: record needs 'session_id' and 'turns'")
            sid = str(rec["session_id"])
            knowledge = rec.get("knowledge")
            if knowledge is not None:
                if domain != "knowledge-grounded":
                    raise SchemaError(f"line {lineno}: knowledge passages not allowed in {format} files")
                knowledge = [str(k) for k in knowledge]
            try:
                session = DialogueSession(
                    session_id=sid,
                    turns=_normalize_speakers(rec["turns"], f"line {lineno} ({sid})"),
                    domain_tag=domain,
                    knowledge_passages=knowledge,
                )
            except SchemaError as exc:
                raise SchemaError(f"line {lineno}: {exc}") from exc
            sessions.append(session)
    if not sessions:
        raise EmptyCorpusError(f"{path}: no sessions found")
    return sessions


def chunk_sessions(sessions: list[DialogueSession], max_turns: int) -> list[DialogueSession]:
    """Split sessions into (context, response) chunks for training.

    Every turn after the first becomes the response of exactly one chunk; its
    context is the suffix window of at most `max_turns` preceding turns. Chunk
    ids encode the parent session id and the response offset.
    """
    if max_turns < 2:
        raise ValueError(f"max_turns must be >= 2, got {max_turns}")
    chunks = []
    for session in sessions:
        for resp_idx in range(1, len(session.turns)):
            window = session.turns[max(0, resp_idx - max_turns):resp_idx + 1]
            turns = [
                Turn(speaker=t.speaker, text=t.text, index=i, role=t.role, source_index=t.index)
                for i, t in enumerate(window)
            ]
            chunks.append(DialogueSession(
                session_id=f"{session.session_id}#r{resp_idx}",
                turns=turns,
                domain_tag=session.domain_tag,
                knowledge_passages=list(session.knowledge_passages) if session.knowledge_passages else None,
                parent_id=session.session_id,
                response_offset=resp_idx,
            ))
    return chunks


def load_caption_pool(path) -> list[CaptionedImage]:
    """Load the image-caption pool, ordered by image_id.

    Rejects duplicate image ids and feature vectors of inconsistent dimension.
    """
    pool = []
    seen: dict[str, int] = {}
    feature_dim: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: not valid JSON ({exc.msg})") from exc
            image_id = str(rec.get("image_id", ""))
            if not image_id:
                raise SchemaError(f"line {lineno}: missing image_id")
            if image_id in seen:
                raise PoolError(f"duplicate image_id {image_id!r} (lines {seen[image_id]} and {lineno})")
            seen[image_id] = lineno
            feature = rec.get("feature")
            if feature is not None:
                feature = [float(x) for x in feature]
                if feature_dim is None:
                    feature_dim = len(feature)
                elif len(feature) != feature_dim:
                    raise PoolError(
                        f"feature dimension mismatch for {image_id!r}: got {len(feature)}, expected {feature_dim}")
            pool.append(CaptionedImage(
                image_id=image_id,
                caption=str(rec.get("caption", "")),
                source_tag=str(rec.get("source_tag", "")),
                feature=feature,
            ))
    if not pool:
        raise EmptyCorpusError(f"{path}: no captions found")
    pool.sort(key=lambda img: img.image_id)
    return pool


def compute_stats(examples) -> DatasetStats:
    """Aggregate per-session image/entity statistics over built examples.

    Averages and min/max are computed per parent dialogue session, matching
    the stats report layout (sessions, utterances, unique image and entity
    counts, average/max/min entity images per session).
    """
    if not examples:
        raise EmptyCorpusError("cannot compute stats over an empty example list")
    per_session_turns: dict[str, set[int]] = {}
    per_session_turn_imgs: dict[str, set[str]] = {}
    per_session_ent_imgs: dict[str, set[str]] = {}
    all_turn_imgs: set[str] = set()
    all_entities: set[str] = set()
    for ex in examples:
        sid = ex.provenance.session_id
        turns = per_session_turns.setdefault(sid, set())
        for turn in list(ex.context) + [ex.response]:
            turns.add(turn.source_index if turn.source_index is not None else turn.index)
        t_imgs = per_session_turn_imgs.setdefault(sid, set())
        for ref in ex.turn_images:
            t_imgs.add(ref.locator)
            all_turn_imgs.add(ref.locator)
        e_imgs = per_session_ent_imgs.setdefault(sid, set())
        for ref in ex.entity_images:
            e_imgs.add(ref.locator)
        for ent in ex.entities:
            all_entities.add(ent.surface)
    sessions = sorted(per_session_turns)
    n = len(sessions)
    ent_counts = [len(per_session_ent_imgs[s]) for s in sessions]
    turn_counts = [len(per_session_turn_imgs[s]) for s in sessions]
    return DatasetStats(
        num_sessions=n,
        num_utterances=sum(len(per_session_turns[s]) for s in sessions),
        unique_turn_images=len(all_turn_imgs),
        unique_entities=len(all_entities),
        avg_turn_images_per_session=sum(turn_counts) / n,
        avg_entity_images_per_session=sum(ent_counts) / n,
        max_entity_images_per_session=max(ent_counts),
        min_entity_images_per_session=min(ent_counts),
    )


_STATS_ROWS = (
    ("Dialog Session", "num_sessions", "{:d}"),
    ("Utterances", "num_utterances", "{:d}"),
    ("Turn-level Image", "unique_turn_images", "{:d}"),
    ("Entity (Image)", "unique_entities", "{:d}"),
    ("Avg. Turn Image", "avg_turn_images_per_session", "{:.2f}"),
    ("Avg. Ent. Image", "avg_entity_images_per_session", "{:.2f}"),
    ("Max. Ent. Image", "max_entity_images_per_session", "{:d}"),
    ("Min. Ent. Image", "min_entity_images_per_session", "{:d}"),
)


def format_stats(stats: DatasetStats) -> str:
    """Render stats as an aligned two-column report."""
    lines = []
    for label, attr, fmt in _STATS_ROWS:
        lines.append(f"{label:<18} {fmt.format(getattr(stats, attr))}")
    return "\n".join(lines)
