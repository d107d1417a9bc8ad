"""Transformer dialogue models.

Two variants over the same multimodal input layout: a shared encoder-decoder
(one parameter stack, bidirectional attention over the context side, causal
attention over the response, trained by masked response prediction) and a
separate encoder-decoder (distinct stacks bridged by cross-attention, trained
to generate the response autoregressively). Token, position, and segment
embeddings are summed token-wise; image slots contribute a projected visual
feature in place of a word embedding.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .inputs import InputBatch, MaskedResponse, build_attention_mask, split_mask

VARIANTS = ("shared", "separate")


class ShapeError(ValueError):
    pass


class NumericsError(RuntimeError):
    """Non-finite activations; message names the layer."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_positions: int = 256
    d_v: int = 16
    n_segments: int = 5
    variant: str = "shared"
    dropout: float = 0.0
    pad_id: int = 0
    unk_id: int = 1
    sep_id: int = 2
    mask_id: int = 3
    bos_id: int = 4
    eos_id: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_segments != 5:
            raise ValueError("the input layout defines exactly 5 segments")
        specials = (self.pad_id, self.unk_id, self.sep_id, self.mask_id, self.bos_id, self.eos_id)
        if len(set(specials)) != len(specials):
            raise ValueError("special token ids must be distinct")
        if max(specials) >= self.vocab_size:
            raise ValueError("special token ids must be < vocab_size")

    @classmethod
    def for_tokenizer(cls, tokenizer, **kwargs) -> "ModelConfig":
        return cls(vocab_size=tokenizer.vocab_size, pad_id=tokenizer.pad_id,
                   unk_id=tokenizer.unk_id, sep_id=tokenizer.sep_id,
                   mask_id=tokenizer.mask_id, bos_id=tokenizer.bos_id,
                   eos_id=tokenizer.eos_id, **kwargs)


class VisualProjector(nn.Module):
    """Two-layer map from raw visual features into the word embedding space."""

    def __init__(self, d_v: int, d_model: int):
        super().__init__()
        self.d_v = d_v
        self.fc1 = nn.Linear(d_v, d_model)
        self.fc2 = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.tanh(self.fc1(x)))


def project_image_features(features, proj: VisualProjector) -> torch.Tensor:
    """Project a list/array of d_v feature vectors to d_model, order preserved."""
    feats = torch.as_tensor(np.asarray(features), dtype=proj.fc1.weight.dtype)
    if feats.ndim == 1:
        feats = feats.unsqueeze(0)
    if feats.ndim != 2 or feats.shape[1] != proj.d_v:
        raise ShapeError(f"expected (n, {proj.d_v}) features, got {tuple(feats.shape)}")
    return proj(feats)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.out._residual_out = True

    def forward(self, query: torch.Tensor, memory: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
        # mask: (B, Lq, Lk) bool, True = may attend
        b, lq, d = query.shape
        lk = memory.shape[1]
        h, hd = self.n_heads, self.head_dim
        q = self.q(query).view(b, lq, h, hd).transpose(1, 2)
        k = self.k(memory).view(b, lk, h, hd).transpose(1, 2)
        v = self.v(memory).view(b, lk, h, hd).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, lq, d)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, 4 * d_model)
        self.fc2 = nn.Linear(4 * d_model, d_model)
        self.fc2._residual_out = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = FeedForward(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, mask))
        x = x + self.drop(self.mlp(self.ln2(x)))
        return x


class DecoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ln3 = nn.LayerNorm(d_model)
        self.mlp = FeedForward(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, self_mask: torch.Tensor,
                memory: torch.Tensor, cross_mask: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.drop(self.self_attn(h, h, self_mask))
        x = x + self.drop(self.cross_attn(self.ln2(x), memory, cross_mask))
        x = x + self.drop(self.mlp(self.ln3(x)))
        return x


class InputEmbedding(nn.Module):
    """Token + position + segment embeddings, with image slots spliced in.

    The decoder side of the separate variant never receives images, so it
    skips the projector entirely (no dead parameters).
    """

    def __init__(self, cfg: ModelConfig, with_projector: bool = True):
        super().__init__()
        self.token = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.position = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.segment = nn.Embedding(cfg.n_segments, cfg.d_model)
        self.projector = VisualProjector(cfg.d_v, cfg.d_model) if with_projector else None

    def forward(self, token_ids, position_ids, segment_ids,
                image_features=None, image_slots=None) -> torch.Tensor:
        x = self.token(token_ids)
        if image_slots is not None and image_slots.numel() > 0:
            valid = image_slots >= 0
            if valid.any():
                if self.projector is None:
                    raise ShapeError("this embedding layer does not take image slots")
                b_idx, m_idx = valid.nonzero(as_tuple=True)
                proj = self.projector(image_features[b_idx, m_idx])
                x = x.index_put((b_idx, image_slots[b_idx, m_idx]), proj)
        return x + self.position(position_ids) + self.segment(segment_ids)


def _check_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericsError(f"non-finite activations at {where}")


class SharedEncoderDecoder(nn.Module):
    """One transformer stack over [context side, response] with a mixed mask."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = InputEmbedding(cfg)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.d_model, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_layers))
        self.final_ln = nn.LayerNorm(cfg.d_model) if cfg.n_layers > 0 else nn.Identity()
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        _init_parameters(self, cfg.n_layers)

    def forward(self, token_ids, position_ids, segment_ids, attn_mask,
                image_features=None, image_slots=None) -> torch.Tensor:
        x = self.embed(token_ids, position_ids, segment_ids, image_features, image_slots)
        for i, block in enumerate(self.blocks):
            x = block(x, attn_mask)
            _check_finite(x, f"layer {i}")
        return self.head(self.final_ln(x))


class SeparateEncoderDecoder(nn.Module):
    """Distinct encoder and decoder stacks bridged by cross-attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.enc_embed = InputEmbedding(cfg)
        self.dec_embed = InputEmbedding(cfg, with_projector=False)
        self.enc_blocks = nn.ModuleList(
            EncoderBlock(cfg.d_model, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_layers))
        self.dec_blocks = nn.ModuleList(
            DecoderBlock(cfg.d_model, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_layers))
        self.enc_ln = nn.LayerNorm(cfg.d_model) if cfg.n_layers > 0 else nn.Identity()
        self.dec_ln = nn.LayerNorm(cfg.d_model) if cfg.n_layers > 0 else nn.Identity()
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        _init_parameters(self, cfg.n_layers)

    def encode(self, token_ids, position_ids, segment_ids, self_mask,
               image_features=None, image_slots=None) -> torch.Tensor:
        x = self.enc_embed(token_ids, position_ids, segment_ids, image_features, image_slots)
        for i, block in enumerate(self.enc_blocks):
            x = block(x, self_mask)
            _check_finite(x, f"encoder layer {i}")
        return self.enc_ln(x)

    def decode(self, token_ids, position_ids, segment_ids, self_mask,
               memory, cross_mask) -> torch.Tensor:
        x = self.dec_embed(token_ids, position_ids, segment_ids)
        for i, block in enumerate(self.dec_blocks):
            x = block(x, self_mask, memory, cross_mask)
            _check_finite(x, f"decoder layer {i}")
        return self.head(self.dec_ln(x))

    def forward(self, enc_inputs: dict, dec_inputs: dict) -> torch.Tensor:
        memory = self.encode(**enc_inputs)
        return self.decode(memory=memory, **dec_inputs)


def _init_parameters(model: nn.Module, n_layers: int) -> None:
    # scaled-normal init; residual output projections shrunk with depth
    for m in model.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    scale = 1.0 / math.sqrt(2 * max(1, n_layers))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Linear) and getattr(m, "_residual_out", False):
                m.weight.mul_(scale)


def build_model(cfg: ModelConfig) -> nn.Module:
    if cfg.variant == "shared":
        return SharedEncoderDecoder(cfg)
    return SeparateEncoderDecoder(cfg)


# --- single-example forward helpers ----------------------------------------


def batch_tensors(batch: InputBatch, device=None, dtype=torch.float32) -> dict:
    """InputBatch -> tensors with a leading batch dim of 1."""
    return {
        "token_ids": torch.tensor([batch.token_ids], dtype=torch.long, device=device),
        "position_ids": torch.tensor([batch.position_ids], dtype=torch.long, device=device),
        "segment_ids": torch.tensor([batch.segment_ids], dtype=torch.long, device=device),
        "image_features": torch.tensor(batch.image_features, dtype=dtype,
                                       device=device).unsqueeze(0),
        "image_slots": torch.tensor([batch.image_slots], dtype=torch.long, device=device),
    }


def shared_logits(model: SharedEncoderDecoder, batch: InputBatch) -> torch.Tensor:
    """Full-sequence logits (L, vocab) for the shared variant."""
    t = batch_tensors(batch, dtype=next(model.parameters()).dtype)
    mask = torch.from_numpy(build_attention_mask(batch, "shared")).unsqueeze(0)
    logits = model(t["token_ids"], t["position_ids"], t["segment_ids"], mask,
                   t["image_features"], t["image_slots"])
    return logits[0]


def separate_logits(model: SeparateEncoderDecoder, batch: InputBatch):
    """Teacher-forced decoder logits for the separate variant.

    Returns (logits, targets): logits at each decoder input position
    [BOS, r_1..r_n], predicting targets [r_1..r_n, EOS].
    """
    r_lo, r_hi = batch.block_spans["response"]
    dtype = next(model.parameters()).dtype
    full = build_attention_mask(batch, "separate")
    enc_m, dec_m, cross_m = split_mask(full, r_lo)
    dec_len = r_hi - r_lo - 1  # drop EOS from the input side
    enc_inputs = {
        "token_ids": torch.tensor([batch.token_ids[:r_lo]], dtype=torch.long),
        "position_ids": torch.tensor([batch.position_ids[:r_lo]], dtype=torch.long),
        "segment_ids": torch.tensor([batch.segment_ids[:r_lo]], dtype=torch.long),
        "self_mask": torch.from_numpy(enc_m).unsqueeze(0),
        "image_features": torch.tensor(batch.image_features, dtype=dtype).unsqueeze(0),
        "image_slots": torch.tensor([batch.image_slots], dtype=torch.long),
    }
    dec_inputs = {
        "token_ids": torch.tensor([batch.token_ids[r_lo:r_lo + dec_len]], dtype=torch.long),
        "position_ids": torch.tensor([batch.position_ids[r_lo:r_lo + dec_len]], dtype=torch.long),
        "segment_ids": torch.tensor([batch.segment_ids[r_lo:r_lo + dec_len]], dtype=torch.long),
        "self_mask": torch.from_numpy(dec_m[:dec_len, :dec_len]).unsqueeze(0),
        "cross_mask": torch.from_numpy(cross_m[:dec_len, :]).unsqueeze(0),
    }
    logits = model(enc_inputs, dec_inputs)[0]
    targets = torch.tensor(batch.token_ids[r_lo + 1:r_hi], dtype=torch.long)
    return logits, targets


# --- losses -----------------------------------------------------------------


class LossValue(NamedTuple):
    total: torch.Tensor   # summed NLL, the optimized quantity
    mean: torch.Tensor    # per-token NLL, the reported quantity
    n_tokens: int


def loss_separate(logits: torch.Tensor, targets) -> LossValue:
    """Teacher-forced NLL over every response position (words plus EOS)."""
    if not torch.is_tensor(targets):
        targets = torch.tensor(targets, dtype=torch.long, device=logits.device)
    logits = logits.reshape(-1, logits.shape[-1])
    targets = targets.reshape(-1)
    if logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"{logits.shape[0]} logit rows for {targets.shape[0]} targets")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(1, targets.unsqueeze(1)).squeeze(1)
    return LossValue(total=nll.sum(), mean=nll.mean(), n_tokens=targets.shape[0])


def loss_shared(logits: torch.Tensor, masked: MaskedResponse) -> LossValue:
    """NLL at masked response positions only; unmasked positions contribute zero.

    `logits` holds one row per masked position, in masked_positions order.
    """
    if not masked.masked_positions:
        warnings.warn("loss_shared called with no masked positions; loss is 0")
        zero = torch.zeros((), dtype=logits.dtype if torch.is_tensor(logits) else torch.float32)
        return LossValue(total=zero, mean=zero.clone(), n_tokens=0)
    targets = torch.tensor([masked.original[i] for i in masked.masked_positions],
                           dtype=torch.long, device=logits.device)
    if logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"expected {targets.shape[0]} logit rows, got {logits.shape[0]}")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(1, targets.unsqueeze(1)).squeeze(1)
    return LossValue(total=nll.sum(), mean=nll.mean(), n_tokens=targets.shape[0])


# --- checkpoints -------------------------------------------------------------

_CKPT_MAGIC = b"MMCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: nn.Module, cfg: ModelConfig) -> None:
    """Versioned binary: JSON header (config + tensor manifest), then raw
    little-endian float32 payloads in manifest order."""
    state = model.state_dict()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(cfg),
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in state.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in state.values():
            fh.write(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (magic {magic!r})")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        cfg = ModelConfig(**header["config"])
        state: dict[str, torch.Tensor] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 4), dtype="<f4").copy()
            if data.size != count:
                raise ValueError(f"{path}: truncated tensor {entry['name']}")
            state[entry["name"]] = torch.from_numpy(data.reshape(shape))
    return cfg, state


def load_model(path) -> tuple[nn.Module, ModelConfig]:
    cfg, state = load_checkpoint(path)
    model = build_model(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, cfg
