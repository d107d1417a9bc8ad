"""Model input assembly.

Lays an example out as [turn images][entity images][entities][context][response]
with SEP tokens closing each non-empty block and each context turn, and BOS/EOS
framing the response. Token, position, and segment ids plus the attention mask
all come from here. Image slots are sequence positions whose embedding is the
projected visual feature instead of a word embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .builder import BuilderConfig, MultimodalExample, fit_to_budget
from .tokenizer import Tokenizer

SEG_TURN_IMG, SEG_ENT_IMG, SEG_ENTITY, SEG_CONTEXT, SEG_RESPONSE = range(5)
N_SEGMENTS = 5
BLOCK_SEGMENTS = {
    "turn_images": SEG_TURN_IMG,
    "entity_images": SEG_ENT_IMG,
    "entities": SEG_ENTITY,
    "context": SEG_CONTEXT,
    "response": SEG_RESPONSE,
}


@dataclass
class InputBatch:
    token_ids: list[int]
    image_slots: list[int]
    image_features: np.ndarray          # (n_images, d_v), rows aligned with image_slots
    position_ids: list[int]
    segment_ids: list[int]
    loss_mask: list[bool]
    block_spans: dict[str, tuple[int, int]]
    response_target_span: tuple[int, int]   # response word tokens plus EOS; (L, L) when absent

    def __post_init__(self):
        n = len(self.token_ids)
        if not (len(self.position_ids) == len(self.segment_ids) == len(self.loss_mask) == n):
            raise ValueError("all id sequences must share one length")
        if len(self.image_slots) != self.image_features.shape[0]:
            raise ValueError("one feature vector per image slot required")
        r_lo, r_hi = self.block_spans.get("response", (n, n))
        if any(self.loss_mask[i] for i in range(n) if not (r_lo <= i < r_hi)):
            raise ValueError("loss mask must stay inside the response block")

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class MaskedResponse:
    original: list[int]
    corrupted: list[int]
    masked_positions: list[int]
    replacement_kinds: list[str]     # aligned with masked_positions

    def __post_init__(self):
        if len(self.original) != len(self.corrupted):
            raise ValueError("original and corrupted must have equal length")
        if len(self.masked_positions) != len(self.replacement_kinds):
            raise ValueError("one replacement kind per masked position")
        masked = set(self.masked_positions)
        for i, (a, b) in enumerate(zip(self.original, self.corrupted)):
            if (a != b) and i not in masked:
                raise ValueError(f"position {i} changed but not recorded as masked")
            if i in masked and a == b:
                raise ValueError(f"position {i} recorded as masked but unchanged")


def _feature_of(ref, d_v: int) -> np.ndarray:
    if ref.feature is None:
        return np.zeros(d_v, dtype=np.float32)
    feat = np.asarray(ref.feature, dtype=np.float32)
    if feat.shape != (d_v,):
        raise ValueError(f"image feature for {ref.locator} has dim {feat.shape}, expected ({d_v},)")
    return feat


def assemble_input(example: MultimodalExample, tokenizer: Tokenizer, cfg,
                   include_response: bool = True) -> InputBatch:
    """Turn one example into the model's flat input sequence.

    `cfg` is a ModelConfig (needs d_v, max_positions, variant). Block order is
    turn images, entity images, entities, context (+ appended knowledge),
    response. SEPs carry the segment id of the block they close. Position ids
    run 0..L-1; for the separate variant they restart at 0 on the response
    block, which the decoder consumes on its own. If the sequence would
    overflow max_positions the example is re-truncated, never rejected.
    """
    resp_tokens = tokenizer.tokenize(example.response.text)
    needed = _assembled_length(example, include_response)
    if needed > cfg.max_positions:
        resp_budget = max(1, min(len(resp_tokens), cfg.max_positions // 4))
        ctx_budget = cfg.max_positions - (resp_budget + 2 if include_response else 0)
        example = fit_to_budget(example, BuilderConfig(
            context_token_budget=ctx_budget, response_token_budget=resp_budget))

    ids: list[int] = []
    segs: list[int] = []
    slots: list[int] = []
    feats: list[np.ndarray] = []
    spans: dict[str, tuple[int, int]] = {}

    def close_block(name: str, start: int, seg: int) -> None:
        ids.append(tokenizer.sep_id)
        segs.append(seg)
        spans[name] = (start, len(ids))

    if example.turn_images:
        start = len(ids)
        for ref in example.turn_images:
            slots.append(len(ids))
            feats.append(_feature_of(ref, cfg.d_v))
            ids.append(tokenizer.pad_id)
            segs.append(SEG_TURN_IMG)
        close_block("turn_images", start, SEG_TURN_IMG)
    if example.entity_images:
        start = len(ids)
        for ref in example.entity_images:
            slots.append(len(ids))
            feats.append(_feature_of(ref, cfg.d_v))
            ids.append(tokenizer.pad_id)
            segs.append(SEG_ENT_IMG)
        close_block("entity_images", start, SEG_ENT_IMG)
    if example.entities:
        start = len(ids)
        for ent in example.entities:
            for tid in tokenizer.encode(ent.surface):
                ids.append(tid)
                segs.append(SEG_ENTITY)
        close_block("entities", start, SEG_ENTITY)

    start = len(ids)
    for turn in example.context:
        for tid in tokenizer.encode(turn.text):
            ids.append(tid)
            segs.append(SEG_CONTEXT)
        ids.append(tokenizer.sep_id)
        segs.append(SEG_CONTEXT)
    if example.knowledge:
        for passage in example.knowledge:
            for tid in tokenizer.encode(passage):
                ids.append(tid)
                segs.append(SEG_CONTEXT)
        ids.append(tokenizer.sep_id)
        segs.append(SEG_CONTEXT)
    spans["context"] = (start, len(ids))

    target_span = (len(ids), len(ids))
    if include_response:
        start = len(ids)
        ids.append(tokenizer.bos_id)
        segs.append(SEG_RESPONSE)
        word_start = len(ids)
        for tid in (tokenizer.token_to_id(t) for t in resp_tokens):
            ids.append(tid)
            segs.append(SEG_RESPONSE)
        ids.append(tokenizer.eos_id)
        segs.append(SEG_RESPONSE)
        spans["response"] = (start, len(ids))
        target_span = (word_start, len(ids))  # words + EOS are predictable positions

    r_start = spans.get("response", (len(ids), len(ids)))[0]
    if cfg.variant == "separate" and include_response:
        positions = list(range(r_start)) + list(range(len(ids) - r_start))
    else:
        positions = list(range(len(ids)))

    loss_mask = [False] * len(ids)
    for i in range(*target_span):
        loss_mask[i] = True

    return InputBatch(
        token_ids=ids,
        image_slots=slots,
        image_features=np.stack(feats) if feats else np.zeros((0, cfg.d_v), dtype=np.float32),
        position_ids=positions,
        segment_ids=segs,
        loss_mask=loss_mask,
        block_spans=spans,
        response_target_span=target_span,
    )


def _assembled_length(example: MultimodalExample, include_response: bool) -> int:
    from .builder import example_context_length

    total = example_context_length(example)
    if include_response:
        total += len(Tokenizer.tokenize(example.response.text)) + 2
    return total


def build_attention_mask(batch: InputBatch, variant: str = "shared") -> np.ndarray:
    """Visibility matrix: True where the row position may attend to the column.

    Context-side positions see every context-side position and nothing in the
    response; response positions see all of the context side plus response
    positions up to themselves. The separate variant realizes the same
    contract through three pieces (bidirectional encoder self-attention,
    causal decoder self-attention, full cross-attention); split_mask carves
    them out of this combined matrix.
    """
    if variant not in ("shared", "separate"):
        raise ValueError(f"unknown variant {variant!r}")
    n = len(batch)
    r_start, _ = batch.block_spans.get("response", (n, n))
    return mixed_visibility(n, r_start)


def mixed_visibility(length: int, r_start: int) -> np.ndarray:
    """The mask rule itself: bidirectional over [0, r_start), causal after."""
    mask = np.zeros((length, length), dtype=bool)
    mask[:r_start, :r_start] = True
    for i in range(r_start, length):
        mask[i, :r_start] = True
        mask[i, r_start:i + 1] = True
    return mask


def split_mask(mask: np.ndarray, r_start: int):
    """Carve the combined mask into (encoder self, decoder self, cross) pieces."""
    return mask[:r_start, :r_start], mask[r_start:, r_start:], mask[r_start:, :r_start]
