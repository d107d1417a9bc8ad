"""Training loop, response masking, and the trapezoidal learning-rate schedule.

The shared variant trains by masked response prediction: a fresh corruption of
the response is drawn every step (Bernoulli per token by default, exact-count
behind a flag) and only corrupted positions are supervised. The separate
variant trains teacher-forced. The optimized quantity is the summed NLL; the
reported one is the per-token mean. Seeded runs are bit-reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .inputs import InputBatch, MaskedResponse, assemble_input, build_attention_mask, split_mask
from .model import LossValue, ModelConfig, loss_separate, loss_shared
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

MASK_KIND = "mask-token"
RANDOM_KIND = "random-token"


class DivergenceError(RuntimeError):
    """Training loss went non-finite; message names the step."""


@dataclass
class TrainSchedule:
    peak_lr: float = 5e-3
    warmup_fraction: float = 0.2
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    seed: int = 0
    mask_ratio: float = 0.7
    mask_prob_within: float = 0.9
    exact_count_masking: bool = False
    eval_every: int = 0     # 0 disables validation / early stop
    patience: int = 3

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie strictly between 0 and 1")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be >= 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")


def lr_at(step: int, schedule: TrainSchedule) -> float:
    """Piecewise-linear LR for 1-indexed steps: 0 -> peak over the warmup
    fraction of total steps, then linearly back to 0 at the last step."""
    total = schedule.total_steps
    warm = schedule.warmup_fraction * total
    if step <= warm:
        return schedule.peak_lr * step / warm
    return schedule.peak_lr * (total - step) / (total - warm)


def mask_response(r_tokens: list[int], ratio: float, mask_prob_within: float,
                  rng: np.random.Generator, tokenizer: Tokenizer,
                  exact_count: bool = False) -> MaskedResponse:
    """Corrupt response tokens for masked response prediction.

    Each position is picked independently with probability `ratio` (or exactly
    round(ratio*n) positions with exact_count). A picked position becomes the
    MASK token with probability mask_prob_within, otherwise a uniformly random
    non-special vocabulary token different from the original.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    if not r_tokens:
        raise ValueError("response must be non-empty")
    n = len(r_tokens)
    if exact_count:
        k = int(round(ratio * n))
        chosen = sorted(rng.choice(n, size=k, replace=False).tolist()) if k else []
    else:
        chosen = [i for i in range(n) if rng.random() < ratio]
    non_special = [t for t in range(tokenizer.vocab_size) if t not in tokenizer.special_ids]
    corrupted = list(r_tokens)
    kinds = []
    for i in chosen:
        if rng.random() < mask_prob_within or len(non_special) < 2:
            corrupted[i] = tokenizer.mask_id
            kinds.append(MASK_KIND)
        else:
            options = [t for t in non_special if t != r_tokens[i]]
            corrupted[i] = int(options[rng.integers(len(options))])
            kinds.append(RANDOM_KIND)
    return MaskedResponse(original=list(r_tokens), corrupted=corrupted,
                          masked_positions=chosen, replacement_kinds=kinds)


# --- batching ----------------------------------------------------------------


def _pad_collate(rows: list[InputBatch], token_overrides: list[list[int]] | None,
                 pad_id: int, dtype) -> dict:
    """Pad a list of single examples into batch tensors with per-example masks."""
    b = len(rows)
    lmax = max(len(r) for r in rows)
    mmax = max((len(r.image_slots) for r in rows), default=0)
    d_v = rows[0].image_features.shape[1]
    token_ids = np.full((b, lmax), pad_id, dtype=np.int64)
    position_ids = np.zeros((b, lmax), dtype=np.int64)
    segment_ids = np.zeros((b, lmax), dtype=np.int64)
    attn = np.zeros((b, lmax, lmax), dtype=bool)
    slots = np.full((b, max(mmax, 1)), -1, dtype=np.int64)
    feats = np.zeros((b, max(mmax, 1), d_v), dtype=np.float32)
    for i, row in enumerate(rows):
        n = len(row)
        ids = token_overrides[i] if token_overrides is not None else row.token_ids
        token_ids[i, :n] = ids
        position_ids[i, :n] = row.position_ids
        segment_ids[i, :n] = row.segment_ids
        attn[i, :n, :n] = build_attention_mask(row)
        attn[i, range(n, lmax), range(n, lmax)] = True  # pad rows attend themselves
        for m, pos in enumerate(row.image_slots):
            slots[i, m] = pos
            feats[i, m] = row.image_features[m]
    return {
        "token_ids": torch.from_numpy(token_ids),
        "position_ids": torch.from_numpy(position_ids),
        "segment_ids": torch.from_numpy(segment_ids),
        "attn_mask": torch.from_numpy(attn),
        "image_slots": torch.from_numpy(slots),
        "image_features": torch.from_numpy(feats).to(dtype),
    }


def _shared_step_loss(model, rows: list[InputBatch], rng, schedule, tokenizer,
                      fixed_all_mask: bool = False) -> LossValue:
    overrides, masked_list, gather = [], [], []
    for i, row in enumerate(rows):
        lo, hi = row.response_target_span
        targets = row.token_ids[lo:hi]
        if fixed_all_mask:
            masked = MaskedResponse(
                original=list(targets),
                corrupted=[tokenizer.mask_id] * len(targets),
                masked_positions=list(range(len(targets))),
                replacement_kinds=[MASK_KIND] * len(targets),
            )
        else:
            masked = mask_response(targets, schedule.mask_ratio, schedule.mask_prob_within,
                                   rng, tokenizer, schedule.exact_count_masking)
        ids = list(row.token_ids)
        for p in masked.masked_positions:
            ids[lo + p] = masked.corrupted[p]
        overrides.append(ids)
        masked_list.append(masked)
        gather.extend((i, lo + p) for p in masked.masked_positions)
    dtype = next(model.parameters()).dtype
    tensors = _pad_collate(rows, overrides, tokenizer.pad_id, dtype)
    logits = model(tensors["token_ids"], tensors["position_ids"], tensors["segment_ids"],
                   tensors["attn_mask"], tensors["image_features"], tensors["image_slots"])
    total = torch.zeros((), dtype=logits.dtype)
    n_tokens = 0
    cursor = 0
    for i, masked in enumerate(masked_list):
        count = len(masked.masked_positions)
        if count == 0:
            continue
        rows_idx = torch.tensor([g[1] for g in gather[cursor:cursor + count]], dtype=torch.long)
        part = loss_shared(logits[i, rows_idx], masked)
        total = total + part.total
        n_tokens += part.n_tokens
        cursor += count
    mean = total / max(n_tokens, 1)
    return LossValue(total=total, mean=mean, n_tokens=n_tokens)


def _separate_step_loss(model, rows: list[InputBatch], tokenizer) -> LossValue:
    dtype = next(model.parameters()).dtype
    b = len(rows)
    spans = [row.block_spans["response"] for row in rows]
    le_max = max(lo for lo, _ in spans)
    ld_max = max(hi - lo - 1 for lo, hi in spans)
    mmax = max((len(r.image_slots) for r in rows), default=0)
    d_v = rows[0].image_features.shape[1]
    enc_ids = np.full((b, le_max), tokenizer.pad_id, dtype=np.int64)
    enc_pos = np.zeros((b, le_max), dtype=np.int64)
    enc_seg = np.zeros((b, le_max), dtype=np.int64)
    enc_mask = np.zeros((b, le_max, le_max), dtype=bool)
    dec_ids = np.full((b, ld_max), tokenizer.pad_id, dtype=np.int64)
    dec_pos = np.zeros((b, ld_max), dtype=np.int64)
    dec_seg = np.zeros((b, ld_max), dtype=np.int64)
    dec_mask = np.zeros((b, ld_max, ld_max), dtype=bool)
    cross = np.zeros((b, ld_max, le_max), dtype=bool)
    slots = np.full((b, max(mmax, 1)), -1, dtype=np.int64)
    feats = np.zeros((b, max(mmax, 1), d_v), dtype=np.float32)
    targets = np.full((b, ld_max), -1, dtype=np.int64)
    for i, row in enumerate(rows):
        lo, hi = spans[i]
        ld = hi - lo - 1
        enc_ids[i, :lo] = row.token_ids[:lo]
        enc_pos[i, :lo] = row.position_ids[:lo]
        enc_seg[i, :lo] = row.segment_ids[:lo]
        full = build_attention_mask(row)
        enc_m, dec_m, cross_m = split_mask(full, lo)
        enc_mask[i, :lo, :lo] = enc_m
        enc_mask[i, range(lo, le_max), range(lo, le_max)] = True
        dec_ids[i, :ld] = row.token_ids[lo:lo + ld]
        dec_pos[i, :ld] = row.position_ids[lo:lo + ld]
        dec_seg[i, :ld] = row.segment_ids[lo:lo + ld]
        dec_mask[i, :ld, :ld] = dec_m[:ld, :ld]
        dec_mask[i, range(ld, ld_max), range(ld, ld_max)] = True
        cross[i, :ld, :lo] = cross_m[:ld, :]
        cross[i, ld:, 0] = True  # pad decoder rows need one visible key
        for m, pos in enumerate(row.image_slots):
            slots[i, m] = pos
            feats[i, m] = row.image_features[m]
        targets[i, :ld] = row.token_ids[lo + 1:hi]
    memory = model.encode(torch.from_numpy(enc_ids), torch.from_numpy(enc_pos),
                          torch.from_numpy(enc_seg), torch.from_numpy(enc_mask),
                          torch.from_numpy(feats).to(dtype), torch.from_numpy(slots))
    logits = model.decode(torch.from_numpy(dec_ids), torch.from_numpy(dec_pos),
                          torch.from_numpy(dec_seg), torch.from_numpy(dec_mask),
                          memory, torch.from_numpy(cross))
    tgt = torch.from_numpy(targets)
    keep = tgt.reshape(-1) >= 0
    flat_logits = logits.reshape(-1, logits.shape[-1])[keep]
    flat_targets = tgt.reshape(-1)[keep]
    return loss_separate(flat_logits, flat_targets)


@dataclass
class TrainResult:
    records: list[tuple[int, float, float]]   # (step, lr, mean loss)
    final_loss: float
    stopped_early: bool = False
    best_val: float | None = None


def evaluate_loss(model, rows: list[InputBatch], cfg: ModelConfig,
                  tokenizer: Tokenizer, batch_size: int = 16) -> float:
    """Deterministic validation loss: all-MASK scoring for shared, teacher
    forcing for separate. Mean NLL per token."""
    model.eval()
    total, n_tokens = 0.0, 0
    with torch.no_grad():
        for at in range(0, len(rows), batch_size):
            chunk = rows[at:at + batch_size]
            if cfg.variant == "shared":
                value = _shared_step_loss(model, chunk, None, None, tokenizer, fixed_all_mask=True)
            else:
                value = _separate_step_loss(model, chunk, tokenizer)
            total += float(value.total)
            n_tokens += value.n_tokens
    model.train()
    return total / max(n_tokens, 1)


def train(model, examples, tokenizer: Tokenizer, cfg: ModelConfig,
          schedule: TrainSchedule, val_examples=None) -> TrainResult:
    """Optimize the model on built examples; deterministic for a fixed seed.

    Early-stops when `eval_every` is set and the validation loss fails to
    improve for `patience` consecutive rounds. Raises DivergenceError with the
    step index if the loss goes non-finite.
    """
    if not examples:
        raise ValueError("training set must be non-empty")
    torch.manual_seed(schedule.seed)
    torch.set_num_threads(1)  # bit-reproducible reductions
    rng = np.random.default_rng(schedule.seed)
    rows = [assemble_input(ex, tokenizer, cfg, include_response=True) for ex in examples]
    val_rows = ([assemble_input(ex, tokenizer, cfg, include_response=True) for ex in val_examples]
                if val_examples else None)
    opt = torch.optim.AdamW(model.parameters(), lr=schedule.peak_lr,
                            betas=(schedule.beta1, schedule.beta2),
                            eps=schedule.eps, weight_decay=schedule.weight_decay)
    model.train()
    records: list[tuple[int, float, float]] = []
    order: list[int] = []
    best_val: float | None = None
    bad_rounds = 0
    stopped_early = False
    for step in range(1, schedule.total_steps + 1):
        if len(order) < schedule.batch_size:
            order.extend(rng.permutation(len(rows)).tolist())
        take, order = order[:schedule.batch_size], order[schedule.batch_size:]
        chunk = [rows[i] for i in take]
        lr = lr_at(step, schedule)
        for group in opt.param_groups:
            group["lr"] = lr
        if cfg.variant == "shared":
            value = _shared_step_loss(model, chunk, rng, schedule, tokenizer)
        else:
            value = _separate_step_loss(model, chunk, tokenizer)
        mean = float(value.mean.detach())
        if not np.isfinite(mean):
            raise DivergenceError(f"loss became non-finite at step {step}")
        opt.zero_grad()
        if value.n_tokens > 0:
            value.total.backward()
            opt.step()
        records.append((step, lr, mean))
        if val_rows and schedule.eval_every and step % schedule.eval_every == 0:
            val = evaluate_loss(model, val_rows, cfg, tokenizer)
            if best_val is None or val < best_val - 1e-6:
                best_val = val
                bad_rounds = 0
            else:
                bad_rounds += 1
                if bad_rounds >= schedule.patience:
                    log.info("early stop at step %d (val %.4f)", step, val)
                    stopped_early = True
                    break
    model.eval()
    return TrainResult(records=records, final_loss=records[-1][2] if records else float("nan"),
                       stopped_early=stopped_early, best_val=best_val)


def save_loss_curve(path, records: list[tuple[int, float, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in records:
            fh.write(f"{step},{lr!r},{loss!r}\n")


# --- response scoring (used for perplexity) ----------------------------------


def response_nll(model, batch: InputBatch, cfg: ModelConfig, tokenizer: Tokenizer,
                 mode: str = "causal") -> tuple[float, int]:
    """Total NLL and token count of one response under the model.

    separate: teacher-forced decoder pass. shared, mode="causal": one pass
    with every response position fed as MASK under the causal response mask.
    shared, mode="masked": one pass per position, true prefix plus MASK at the
    scored position (matches generation-time conditions exactly).
    """
    from .model import separate_logits, shared_logits

    with torch.no_grad():
        if cfg.variant == "separate":
            logits, targets = separate_logits(model, batch)
            value = loss_separate(logits, targets)
            return float(value.total), value.n_tokens
        lo, hi = batch.response_target_span
        targets = batch.token_ids[lo:hi]
        if mode == "causal":
            ids = list(batch.token_ids)
            for p in range(lo, hi):
                ids[p] = tokenizer.mask_id
            scored = _clone_with_tokens(batch, ids)
            logits = shared_logits(model, scored)
            masked = MaskedResponse(original=list(targets),
                                    corrupted=[tokenizer.mask_id] * len(targets),
                                    masked_positions=list(range(len(targets))),
                                    replacement_kinds=[MASK_KIND] * len(targets))
            value = loss_shared(logits[lo:hi], masked)
            return float(value.total), value.n_tokens
        if mode != "masked":
            raise ValueError(f"unknown scoring mode {mode!r}")
        total = 0.0
        for p in range(lo, hi):
            ids = list(batch.token_ids[:p + 1])
            ids[p] = tokenizer.mask_id
            prefix = _truncated_batch(batch, ids, p + 1)
            logits = shared_logits(model, prefix)
            logp = torch.log_softmax(logits[p], dim=-1)
            total += float(-logp[batch.token_ids[p]])
        return total, hi - lo


def _clone_with_tokens(batch: InputBatch, ids: list[int]) -> InputBatch:
    return InputBatch(token_ids=ids, image_slots=batch.image_slots,
                      image_features=batch.image_features,
                      position_ids=batch.position_ids, segment_ids=batch.segment_ids,
                      loss_mask=batch.loss_mask, block_spans=batch.block_spans,
                      response_target_span=batch.response_target_span)


def _truncated_batch(batch: InputBatch, ids: list[int], n: int) -> InputBatch:
    r_lo = batch.block_spans["response"][0]
    return InputBatch(token_ids=ids[:n], image_slots=batch.image_slots,
                      image_features=batch.image_features,
                      position_ids=batch.position_ids[:n], segment_ids=batch.segment_ids[:n],
                      loss_mask=[False] * n,
                      block_spans={**{k: v for k, v in batch.block_spans.items() if k != "response"},
                                   "response": (r_lo, n)},
                      response_target_span=(r_lo + 1, n))
