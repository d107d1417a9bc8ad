"""Whitespace tokenizer over a fixed vocabulary with reserved special tokens.

Deterministic by construction: vocab order is (frequency desc, token asc),
so the same corpus always yields the same ids. Good enough for desk-scale
models and keeps every metric and model test tokenizer-stable.
"""

from __future__ import annotations

import json
from collections import Counter

PAD, UNK, SEP, MASK, BOS, EOS = "[PAD]", "[UNK]", "[SEP]", "[MASK]", "[BOS]", "[EOS]"
SPECIAL_TOKENS = (PAD, UNK, SEP, MASK, BOS, EOS)


class Tokenizer:
    def __init__(self, word_tokens: list[str]):
        for tok in word_tokens:
            if tok in SPECIAL_TOKENS:
                raise ValueError(f"{tok} is reserved")
        self.tokens = list(SPECIAL_TOKENS) + list(word_tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    # special-token ids
    @property
    def pad_id(self) -> int: return self._ids[PAD]
    @property
    def unk_id(self) -> int: return self._ids[UNK]
    @property
    def sep_id(self) -> int: return self._ids[SEP]
    @property
    def mask_id(self) -> int: return self._ids[MASK]
    @property
    def bos_id(self) -> int: return self._ids[BOS]
    @property
    def eos_id(self) -> int: return self._ids[EOS]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self._ids[t] for t in SPECIAL_TOKENS)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @staticmethod
    def tokenize(text: str) -> list[str]:
        return text.lower().split()

    def token_to_id(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    def id_to_token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id(t) for t in self.tokenize(text)]

    def decode(self, ids: list[int], skip_special: bool = True) -> str:
        toks = []
        for i in ids:
            tok = self.tokens[i]
            if skip_special and tok in SPECIAL_TOKENS:
                continue
            toks.append(tok)
        return " ".join(toks)

    @classmethod
    def from_texts(cls, texts: list[str], max_size: int | None = None,
                   min_freq: int = 1) -> "Tokenizer":
        counts = Counter()
        for text in texts:
            counts.update(cls.tokenize(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        word_tokens = [tok for tok, c in ranked if c >= min_freq]
        if max_size is not None:
            word_tokens = word_tokens[:max(0, max_size - len(SPECIAL_TOKENS))]
        return cls(word_tokens)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"word_tokens": self.tokens[len(SPECIAL_TOKENS):]}, fh)

    @classmethod
    def load(cls, path) -> "Tokenizer":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(payload["word_tokens"])
