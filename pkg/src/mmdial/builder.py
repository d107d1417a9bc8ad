"""Build multimodal training examples out of chunks, retrieval results, and entities.

Every example bundles a context window, its textual entities, turn-level and
entity-level image references, the response, and optional document knowledge.
Caps and token budgets are enforced here so model input assembly never has to
error out. Serialization is line-delimited JSON with a strict schema.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

from .corpus import CaptionedImage, DialogueSession, Turn
from .entities import EntityRecord, ImageRef, match_surfaces
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
ABLATION_VARIANTS = ("full", "-E", "-EV", "-E-TV", "-E-EV")

POOL_PROVIDER = "caption-pool"


class BuildError(ValueError):
    pass


class SchemaVersionError(BuildError):
    pass


@dataclass
class Provenance:
    session_id: str
    response_offset: int
    turn_images: list[dict] = field(default_factory=list)    # {image_id, turn_index, rank}
    entity_images: list[dict] = field(default_factory=list)  # {locator, surface}


@dataclass
class MultimodalExample:
    example_id: str
    context: list[Turn]
    entities: list[EntityRecord]
    turn_images: list[ImageRef]
    entity_images: list[ImageRef]
    response: Turn
    provenance: Provenance
    knowledge: list[str] | None = None

    def __post_init__(self):
        if not self.context:
            raise BuildError(f"{self.example_id}: empty context")
        if self.response.speaker == self.context[-1].speaker:
            raise BuildError(f"{self.example_id}: response speaker must differ from last context turn")


@dataclass
class BuilderConfig:
    cap_turn: int = 5
    cap_entity: int = 8
    context_token_budget: int = 190
    response_token_budget: int = 35
    images_per_entity: int = 1
    include_entities: bool = True
    include_turn_images: bool = True
    include_entity_images: bool = True
    include_knowledge: bool = False

    def __post_init__(self):
        for name in ("cap_turn", "cap_entity", "context_token_budget",
                     "response_token_budget", "images_per_entity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class TurnImageManifest:
    """Retrieval results joined with the caption pool for feature lookup."""

    def __init__(self, results, pool: list[CaptionedImage]):
        self.ranked = {(r.session_id, r.turn_index): r.ranked for r in results}
        self.images = {img.image_id: img for img in pool}

    def ranked_for(self, session_id: str, turn_index: int):
        return self.ranked.get((session_id, turn_index))

    def ref_for(self, image_id: str) -> ImageRef:
        img = self.images[image_id]
        return ImageRef(locator=img.image_id, provider=POOL_PROVIDER,
                        license_tag="", feature=img.feature)


class EntityManifest:
    """Fetched entity records, keyed by normalized surface."""

    def __init__(self, records: list[EntityRecord]):
        self.records = {r.surface: r for r in records}

    @property
    def surfaces(self) -> list[str]:
        return list(self.records)

    def get(self, surface: str) -> EntityRecord | None:
        return self.records.get(surface)


def context_side_length(n_turn_imgs: int, n_ent_imgs: int,
                        entity_token_counts: list[int],
                        turn_token_counts: list[int],
                        knowledge_token_count: int = 0) -> int:
    """Length of the assembled context-side input, separators included.

    Mirrors the model input layout: each non-empty image/entity block ends
    with one SEP, every context turn ends with SEP, knowledge tokens (when
    present) are appended to the context block with their own SEP.
    """
    total = 0
    if n_turn_imgs:
        total += n_turn_imgs + 1
    if n_ent_imgs:
        total += n_ent_imgs + 1
    if entity_token_counts:
        total += sum(entity_token_counts) + 1
    total += sum(c + 1 for c in turn_token_counts)
    if knowledge_token_count:
        total += knowledge_token_count + 1
    return total


def example_context_length(ex: MultimodalExample) -> int:
    return context_side_length(
        len(ex.turn_images), len(ex.entity_images),
        [len(Tokenizer.tokenize(e.surface)) for e in ex.entities],
        [len(Tokenizer.tokenize(t.text)) for t in ex.context],
        sum(len(Tokenizer.tokenize(k)) for k in ex.knowledge) if ex.knowledge else 0,
    )


def _fill_turn_images(chunk: DialogueSession, manifest: TurnImageManifest,
                      cap: int) -> tuple[list[ImageRef], list[dict]]:
    # breadth-first over turns: rank-1 of every turn before rank-2 of any turn
    parent = chunk.parent_id or chunk.session_id
    context = chunk.turns[:-1]
    ranked_lists = []
    for turn in context:
        src = turn.source_index if turn.source_index is not None else turn.index
        ranked = manifest.ranked_for(parent, src)
        if ranked is None:
            log.warning("no retrieval result for %s turn %d; leaving it imageless", parent, src)
            ranked = []
        ranked_lists.append((src, ranked))
    refs, prov, taken = [], [], set()
    max_rank = max((len(r) for _, r in ranked_lists), default=0)
    for rank in range(max_rank):
        for src, ranked in ranked_lists:
            if len(refs) >= cap:
                return refs, prov
            if rank >= len(ranked):
                continue
            image_id = ranked[rank][0]
            if image_id in taken:
                continue
            taken.add(image_id)
            refs.append(manifest.ref_for(image_id))
            prov.append({"image_id": image_id, "turn_index": src, "rank": rank})
    return refs, prov


def _fill_entity_images(matched: list[EntityRecord], images_per_entity: int,
                        cap: int) -> tuple[list[ImageRef], list[dict]]:
    refs, prov = [], []
    for rec in matched:
        if not rec.images:
            continue  # skipped from V_E, entity itself stays in E
        for ref in rec.images[:images_per_entity]:
            if len(refs) >= cap:
                return refs, prov
            refs.append(ref)
            prov.append({"locator": ref.locator, "surface": rec.surface})
    return refs, prov


def build_examples(chunks: list[DialogueSession], retrieval: TurnImageManifest,
                   entities: EntityManifest, cfg: BuilderConfig) -> list[MultimodalExample]:
    """Assemble one example per chunk, enforcing caps and token budgets.

    Turn images fill breadth-first over turns in chronological order; entity
    images follow entity first-occurrence order with images_per_entity from
    each. Both image lists and the entity list are capped, then the context
    is left-truncated until the assembled input fits the token budget.
    """
    surfaces = entities.surfaces
    examples = []
    for chunk in chunks:
        context = chunk.turns[:-1]
        response = chunk.turns[-1]
        context_text = " ".join(t.text for t in context)
        matched: list[EntityRecord] = []
        seen: set[str] = set()
        for _, surf in match_surfaces(context_text, surfaces):
            if surf in seen:
                continue
            seen.add(surf)
            rec = entities.get(surf)
            if rec is not None:
                matched.append(rec)
        matched = matched[:cfg.cap_entity]

        turn_refs, turn_prov = ([], [])
        if cfg.include_turn_images:
            turn_refs, turn_prov = _fill_turn_images(chunk, retrieval, cfg.cap_turn)
        ent_refs, ent_prov = ([], [])
        if cfg.include_entity_images:
            ent_refs, ent_prov = _fill_entity_images(matched, cfg.images_per_entity, cfg.cap_entity)

        knowledge = None
        if cfg.include_knowledge and chunk.knowledge_passages:
            knowledge = list(chunk.knowledge_passages)

        ex = MultimodalExample(
            example_id=chunk.session_id,
            context=[dataclasses.replace(t) for t in context],
            entities=[dataclasses.replace(r, images=[]) for r in matched] if cfg.include_entities else [],
            turn_images=turn_refs,
            entity_images=ent_refs,
            response=dataclasses.replace(response),
            provenance=Provenance(
                session_id=chunk.parent_id or chunk.session_id,
                response_offset=chunk.response_offset if chunk.response_offset is not None else response.index,
                turn_images=turn_prov,
                entity_images=ent_prov,
            ),
            knowledge=knowledge,
        )
        examples.append(fit_to_budget(ex, cfg))
    return examples


def fit_to_budget(ex: MultimodalExample, cfg: BuilderConfig) -> MultimodalExample:
    """Truncate an example so the assembled input fits the token budgets.

    The response is cut from the right. On the context side, the oldest
    context tokens go first; document knowledge only keeps whatever space is
    left after the context. If the image/entity blocks alone overflow the
    budget (misconfigured caps), entities are dropped from the back, then
    entity images, then turn images.
    """
    budget = cfg.context_token_budget

    resp_tokens = Tokenizer.tokenize(ex.response.text)
    response = ex.response
    if len(resp_tokens) > cfg.response_token_budget:
        response = dataclasses.replace(
            response, text=" ".join(resp_tokens[:cfg.response_token_budget]))

    turn_imgs = list(ex.turn_images)
    ent_imgs = list(ex.entity_images)
    ents = list(ex.entities)

    def base_len() -> int:
        return context_side_length(
            len(turn_imgs), len(ent_imgs),
            [len(Tokenizer.tokenize(e.surface)) for e in ents], [])

    # last-resort ladder: leave at least room for one context token plus SEP
    while base_len() > budget - 2:
        if ents:
            ents.pop()
        elif ent_imgs:
            ent_imgs.pop()
        elif turn_imgs:
            turn_imgs.pop()
        else:
            break

    avail = budget - base_len()
    kept_rev: list[Turn] = []
    for turn in reversed(ex.context):
        toks = Tokenizer.tokenize(turn.text)
        cost = len(toks) + 1
        if avail >= cost:
            kept_rev.append(turn)
            avail -= cost
        elif avail >= 2:
            # partial turn: keep its most recent tokens
            kept_rev.append(dataclasses.replace(turn, text=" ".join(toks[-(avail - 1):])))
            avail = 0
        else:
            break
    context = [dataclasses.replace(t) for t in reversed(kept_rev)]
    if not context:
        raise BuildError(f"{ex.example_id}: context budget too small to keep any context")

    knowledge = ex.knowledge
    if knowledge:
        k_tokens = [tok for passage in knowledge for tok in Tokenizer.tokenize(passage)]
        if avail >= 2:
            kept = k_tokens[:avail - 1]
            knowledge = [" ".join(kept)] if kept else None
        else:
            knowledge = None

    for i, turn in enumerate(context):
        turn.index = i
    response = dataclasses.replace(response, index=len(context))
    return dataclasses.replace(ex, context=context, response=response,
                               turn_images=turn_imgs, entity_images=ent_imgs,
                               entities=ents, knowledge=knowledge)


def ablation_view(examples: list[MultimodalExample], variant: str) -> list[MultimodalExample]:
    """Empty the fields named by the ablation variant; everything else untouched."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; choose from {ABLATION_VARIANTS}")
    drop_entities = variant in ("-E", "-E-TV", "-E-EV")
    drop_turn_imgs = variant == "-E-TV"
    drop_ent_imgs = variant in ("-EV", "-E-EV")
    out = []
    for ex in examples:
        out.append(dataclasses.replace(
            ex,
            entities=[] if drop_entities else list(ex.entities),
            turn_images=[] if drop_turn_imgs else list(ex.turn_images),
            entity_images=[] if drop_ent_imgs else list(ex.entity_images),
        ))
    return out


# --- serialization ---------------------------------------------------------

_TURN_FIELDS = {"speaker", "text", "index", "role", "source_index"}
_ENTITY_FIELDS = {"surface", "kind", "corpus_frequency", "images", "fetch_failed", "raw_surface"}
_REF_FIELDS = {"locator", "provider", "license_tag", "feature"}
_PROV_FIELDS = {"session_id", "response_offset", "turn_images", "entity_images"}
_TOP_FIELDS = {"schema_version", "id", "C", "E", "V_T", "V_E", "R", "K", "provenance"}


def _check_fields(rec: dict, allowed: set[str], where: str) -> None:
    unknown = set(rec) - allowed
    if unknown:
        raise BuildError(f"{where}: unknown field {sorted(unknown)[0]!r}")


def serialize(examples: list[MultimodalExample], path) -> None:
    """Write examples as one strict JSON record per line; byte-stable."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {
                "schema_version": SCHEMA_VERSION,
                "id": ex.example_id,
                "C": [dataclasses.asdict(t) for t in ex.context],
                "E": [dataclasses.asdict(e) for e in ex.entities],
                "V_T": [dataclasses.asdict(r) for r in ex.turn_images],
                "V_E": [dataclasses.asdict(r) for r in ex.entity_images],
                "R": dataclasses.asdict(ex.response),
                "K": ex.knowledge,
                "provenance": dataclasses.asdict(ex.provenance),
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def deserialize(path) -> list[MultimodalExample]:
    """Load examples, rejecting unknown fields and schema version drift."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            where = f"line {lineno}"
            _check_fields(rec, _TOP_FIELDS, where)
            version = rec.get("schema_version")
            if version != SCHEMA_VERSION:
                raise SchemaVersionError(
                    f"{where}: schema version {version!r}, expected {SCHEMA_VERSION!r}")
            for t in rec["C"] + [rec["R"]]:
                _check_fields(t, _TURN_FIELDS, where)
            for e in rec["E"]:
                _check_fields(e, _ENTITY_FIELDS, where)
            for r in rec["V_T"] + rec["V_E"]:
                _check_fields(r, _REF_FIELDS, where)
            _check_fields(rec["provenance"], _PROV_FIELDS, where)
            out.append(MultimodalExample(
                example_id=rec["id"],
                context=[Turn(**t) for t in rec["C"]],
                entities=[EntityRecord(**{**e, "images": [ImageRef(**r) for r in e.get("images", [])]})
                          for e in rec["E"]],
                turn_images=[ImageRef(**r) for r in rec["V_T"]],
                entity_images=[ImageRef(**r) for r in rec["V_E"]],
                response=Turn(**rec["R"]),
                provenance=Provenance(**rec["provenance"]),
                knowledge=rec.get("K"),
            ))
    return out
