"""Response generation for both model variants.

The separate variant encodes the multimodal context once and decodes
autoregressively. The shared variant grows its input sequence: a MASK token is
appended, the model predicts at that position, the MASK is replaced by the
sampled token and a fresh MASK appended, until EOS or the length budget.
A decode-time additive bias can favor tokens from the extracted entities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .inputs import SEG_RESPONSE, assemble_input, mixed_visibility
from .tokenizer import Tokenizer

STRATEGIES = ("greedy", "top-k")


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    top_k: int = 10
    max_len: int = 35
    entity_bias_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.max_len < 1 or self.top_k < 1:
            raise ValueError("max_len and top_k must be >= 1")
        if self.entity_bias_weight < 0:
            raise ValueError("entity_bias_weight must be >= 0")


def entity_logit_bias(logits: torch.Tensor, entities, weight: float,
                      tokenizer: Tokenizer) -> torch.Tensor:
    """Add `weight` to the logit of the leading token of every entity surface.

    weight=0 returns the logits unchanged. Each vocabulary token is biased at
    most once, however many entities start with it.
    """
    if weight < 0:
        raise ValueError("weight must be >= 0")
    if weight == 0 or not entities:
        return logits
    ids = set()
    for ent in entities:
        surface = getattr(ent, "surface", ent)
        toks = tokenizer.tokenize(str(surface))
        if not toks:
            continue
        tid = tokenizer.token_to_id(toks[0])
        if tid != tokenizer.unk_id:
            ids.add(tid)
    if not ids:
        return logits
    out = logits.clone()
    for tid in ids:
        out[tid] = out[tid] + weight
    return out


def _pick_token(logits: torch.Tensor, decode: DecodeConfig, rng: np.random.Generator,
                tokenizer: Tokenizer) -> int:
    # structural tokens other than EOS are never emitted
    logits = logits.clone()
    for tid in (tokenizer.pad_id, tokenizer.unk_id, tokenizer.sep_id,
                tokenizer.mask_id, tokenizer.bos_id):
        logits[tid] = float("-inf")
    if decode.strategy == "greedy":
        return int(torch.argmax(logits))
    k = min(decode.top_k, logits.shape[0])
    values, indices = torch.topk(logits, k)
    probs = torch.softmax(values, dim=-1).numpy().astype(np.float64)
    probs /= probs.sum()
    return int(indices[rng.choice(k, p=probs)])


def generate_separate(model, example, tokenizer: Tokenizer, cfg,
                      decode: DecodeConfig, trace: list | None = None,
                      bias_entities=None) -> list[str]:
    """Autoregressive decoding against the encoded multimodal context.

    Returns generated word tokens; EOS terminates and is excluded.
    `bias_entities` overrides the entity list the decode-time bias reads
    (defaults to the example's own entities).
    """
    bias_list = example.entities if bias_entities is None else bias_entities
    batch = assemble_input(example, tokenizer, cfg, include_response=False)
    rng = np.random.default_rng(decode.seed)
    dtype = next(model.parameters()).dtype
    le = len(batch)
    enc_mask = torch.from_numpy(np.ones((1, le, le), dtype=bool))
    with torch.no_grad():
        memory = model.encode(
            torch.tensor([batch.token_ids], dtype=torch.long),
            torch.tensor([batch.position_ids], dtype=torch.long),
            torch.tensor([batch.segment_ids], dtype=torch.long),
            enc_mask,
            torch.tensor(batch.image_features, dtype=dtype).unsqueeze(0),
            torch.tensor([batch.image_slots], dtype=torch.long),
        )
        out_ids = [tokenizer.bos_id]
        while len(out_ids) - 1 < decode.max_len:
            ld = len(out_ids)
            self_mask = torch.from_numpy(np.tril(np.ones((ld, ld), dtype=bool))).unsqueeze(0)
            cross = torch.from_numpy(np.ones((1, ld, le), dtype=bool))
            logits = model.decode(
                torch.tensor([out_ids], dtype=torch.long),
                torch.tensor([list(range(ld))], dtype=torch.long),
                torch.tensor([[SEG_RESPONSE] * ld], dtype=torch.long),
                self_mask, memory, cross,
            )[0, -1]
            logits = entity_logit_bias(logits, bias_list,
                                       decode.entity_bias_weight, tokenizer)
            tid = _pick_token(logits, decode, rng, tokenizer)
            if trace is not None:
                trace.append(list(out_ids))
            if tid == tokenizer.eos_id:
                break
            out_ids.append(tid)
    return [tokenizer.id_to_token(t) for t in out_ids[1:]]


def generate_shared(model, example, tokenizer: Tokenizer, cfg,
                    decode: DecodeConfig, trace: list | None = None,
                    bias_entities=None) -> list[str]:
    """Mask-append decoding for the shared variant.

    The input always ends with exactly one MASK; the model predicts there,
    the MASK becomes the sampled token, and a new MASK is appended. Stops on
    EOS or after max_len generated tokens; the unresolved trailing MASK is
    dropped from the output.
    """
    bias_list = example.entities if bias_entities is None else bias_entities
    batch = assemble_input(example, tokenizer, cfg, include_response=False)
    rng = np.random.default_rng(decode.seed)
    dtype = next(model.parameters()).dtype
    r_start = len(batch)
    ids = list(batch.token_ids) + [tokenizer.bos_id]
    segs = list(batch.segment_ids) + [SEG_RESPONSE]
    feats = torch.tensor(batch.image_features, dtype=dtype).unsqueeze(0)
    slots = torch.tensor([batch.image_slots], dtype=torch.long)
    generated: list[int] = []
    with torch.no_grad():
        while len(generated) < decode.max_len:
            cur_ids = ids + [tokenizer.mask_id]
            cur_segs = segs + [SEG_RESPONSE]
            n = len(cur_ids)
            if trace is not None:
                trace.append(list(cur_ids))
            mask = torch.from_numpy(mixed_visibility(n, r_start)).unsqueeze(0)
            logits = model(
                torch.tensor([cur_ids], dtype=torch.long),
                torch.tensor([list(range(n))], dtype=torch.long),
                torch.tensor([cur_segs], dtype=torch.long),
                mask, feats, slots,
            )[0, -1]
            logits = entity_logit_bias(logits, bias_list,
                                       decode.entity_bias_weight, tokenizer)
            tid = _pick_token(logits, decode, rng, tokenizer)
            if tid == tokenizer.eos_id:
                break
            ids.append(tid)
            segs.append(SEG_RESPONSE)
            generated.append(tid)
    return [tokenizer.id_to_token(t) for t in generated]


def generate(model, example, tokenizer: Tokenizer, cfg, decode: DecodeConfig,
             trace: list | None = None, bias_entities=None) -> list[str]:
    if cfg.variant == "separate":
        return generate_separate(model, example, tokenizer, cfg, decode, trace,
                                 bias_entities)
    return generate_shared(model, example, tokenizer, cfg, decode, trace,
                           bias_entities)
