"""Automatic dialogue evaluation metrics.

PPL, corpus BLEU (up to 4-grams, brevity penalty, epsilon smoothing), Rouge-L
(LCS F-measure, beta=1.2 as in the classic dialogue eval scripts), embedding
Average/Extrema/Greedy over a pluggable word-vector table, and Distinct-1/2.
Sentence punctuation is stripped before any metric sees the tokens: tokens
made purely of punctuation are dropped and trailing .,!?;: are removed.
"""

from __future__ import annotations

import json
import math
import string
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2
_TRAILING_PUNCT = ".,!?;:"


class UndefinedMetricError(ValueError):
    """A metric has an empty denominator (no grams, all-OOV corpus, ...)."""


def strip_punctuation(tokens: list[str]) -> list[str]:
    out = []
    for tok in tokens:
        if tok and all(c in string.punctuation for c in tok):
            continue
        t = tok.rstrip(_TRAILING_PUNCT)
        if t:
            out.append(t)
    return out


@dataclass
class EvalPair:
    hypothesis: list[str]
    reference: list[str]
    raw_hypothesis: str = ""
    raw_reference: str = ""


def make_pairs(hypotheses: list[str], references: list[str]) -> list[EvalPair]:
    """Tokenize (lowercase whitespace split) and punctuation-strip both sides."""
    if len(hypotheses) != len(references):
        raise ValueError("need one reference per hypothesis")
    pairs = []
    for hyp, ref in zip(hypotheses, references):
        pairs.append(EvalPair(
            hypothesis=strip_punctuation(hyp.lower().split()),
            reference=strip_punctuation(ref.lower().split()),
            raw_hypothesis=hyp,
            raw_reference=ref,
        ))
    return pairs


# --- diversity ---------------------------------------------------------------


def distinct_n(hypotheses: list[list[str]], n: int) -> float:
    """Unique n-grams divided by total n-grams over the whole corpus."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    seen: set[tuple[str, ...]] = set()
    total = 0
    for toks in hypotheses:
        for i in range(len(toks) - n + 1):
            seen.add(tuple(toks[i:i + n]))
            total += 1
    if total == 0:
        raise UndefinedMetricError(f"no {n}-grams in the corpus")
    return len(seen) / total


# --- token overlap -----------------------------------------------------------


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(pairs: list[EvalPair], max_n: int = 4) -> float:
    """Corpus BLEU with standard brevity penalty and add-epsilon smoothing."""
    if not pairs:
        raise ValueError("need at least one pair")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for pair in pairs:
        hyp_len += len(pair.hypothesis)
        ref_len += len(pair.reference)
        for n in range(1, max_n + 1):
            hyp_counts = _ngram_counts(pair.hypothesis, n)
            ref_counts = _ngram_counts(pair.reference, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            totals[n - 1] += sum(hyp_counts.values())
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = (m if m > 0 else BLEU_EPS) / t if t > 0 else BLEU_EPS
        log_p += math.log(p) / max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pairs: list[EvalPair]) -> float:
    """Mean per-pair LCS F-measure (beta weighting recall, beta=1.2)."""
    if not pairs:
        raise ValueError("need at least one pair")
    scores = []
    for pair in pairs:
        if not pair.hypothesis or not pair.reference:
            scores.append(0.0)
            continue
        lcs = _lcs_length(pair.hypothesis, pair.reference)
        prec = lcs / len(pair.hypothesis)
        rec = lcs / len(pair.reference)
        if prec == 0.0 or rec == 0.0:
            scores.append(0.0)
            continue
        beta2 = ROUGE_BETA ** 2
        scores.append((1 + beta2) * prec * rec / (rec + beta2 * prec))
    return sum(scores) / len(scores)


# --- embedding metrics --------------------------------------------------------


class WordVectorTable:
    def __init__(self, vectors: dict[str, np.ndarray]):
        if not vectors:
            raise ValueError("empty vector table")
        dims = {v.shape for v in vectors.values()}
        if len(dims) != 1:
            raise ValueError("all word vectors must share one dimension")
        self.vectors = vectors
        self.dim = next(iter(vectors.values())).shape[0]

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def __getitem__(self, token: str) -> np.ndarray:
        return self.vectors[token]

    @classmethod
    def load(cls, path) -> "WordVectorTable":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls({w: np.asarray(v, dtype=np.float64) for w, v in payload["vectors"].items()})

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"dim": self.dim,
                       "vectors": {w: v.tolist() for w, v in self.vectors.items()}},
                      fh, sort_keys=True)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _extrema(vecs: list[np.ndarray]) -> np.ndarray:
    stacked = np.stack(vecs)
    hi = stacked.max(axis=0)
    lo = stacked.min(axis=0)
    return np.where(np.abs(lo) > hi, lo, hi)


class EmbeddingScores(NamedTuple):
    avg: float
    ext: float
    gre: float
    skipped: int


def embedding_metrics(pairs: list[EvalPair], table: WordVectorTable) -> EmbeddingScores:
    """Embedding Average / Vector Extrema / Greedy Matching, meaned over pairs.

    OOV tokens map to nothing and are excluded; a pair whose hypothesis or
    reference is entirely OOV is skipped and counted in `skipped`.
    """
    avg_s, ext_s, gre_s = [], [], []
    skipped = 0
    for pair in pairs:
        hyp_vecs = [table[t] for t in pair.hypothesis if t in table]
        ref_vecs = [table[t] for t in pair.reference if t in table]
        if not hyp_vecs or not ref_vecs:
            skipped += 1
            continue
        avg_s.append(_cosine(np.mean(hyp_vecs, axis=0), np.mean(ref_vecs, axis=0)))
        ext_s.append(_cosine(_extrema(hyp_vecs), _extrema(ref_vecs)))
        fwd = np.mean([max(_cosine(h, r) for r in ref_vecs) for h in hyp_vecs])
        bwd = np.mean([max(_cosine(r, h) for h in hyp_vecs) for r in ref_vecs])
        gre_s.append((fwd + bwd) / 2.0)
    if not avg_s:
        raise UndefinedMetricError("every pair was entirely out of vocabulary")
    return EmbeddingScores(avg=float(np.mean(avg_s)), ext=float(np.mean(ext_s)),
                           gre=float(np.mean(gre_s)), skipped=skipped)


# --- perplexity ---------------------------------------------------------------


def perplexity(model, examples, tokenizer, cfg, mode: str = "causal") -> float:
    """exp(mean per-token NLL) of the reference responses under the model.

    The shared variant scores with causal response logits by default (every
    response position fed as MASK in one pass); mode="masked" re-scores each
    position with the true prefix instead, at one pass per token.
    """
    from .inputs import assemble_input
    from .training import response_nll

    if not examples:
        raise ValueError("need at least one example")
    total, count = 0.0, 0
    for ex in examples:
        batch = assemble_input(ex, tokenizer, cfg, include_response=True)
        nll, n = response_nll(model, batch, cfg, tokenizer, mode=mode)
        total += nll
        count += n
    if count == 0:
        raise UndefinedMetricError("no scoreable response tokens")
    return math.exp(total / count)


# --- the report ---------------------------------------------------------------


@dataclass
class MetricReport:
    ppl: float
    bleu: float
    rouge_l: float
    emb_avg: float
    emb_ext: float
    emb_gre: float
    dist1: float
    dist2: float
    n_pairs: int
    emb_skipped: int = 0

    def __post_init__(self):
        for name in ("dist1", "dist2"):
            v = getattr(self, name)
            if not math.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("emb_avg", "emb_ext", "emb_gre"):
            v = getattr(self, name)
            if not math.isnan(v) and not -1.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1]")
        for name in ("bleu", "rouge_l"):
            v = getattr(self, name)
            if not math.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def evaluate_pairs(pairs: list[EvalPair], table: WordVectorTable | None = None,
                   ppl: float = float("nan")) -> MetricReport:
    """All corpus metrics over tokenized pairs; ppl is passed through."""
    if not pairs:
        raise ValueError("need at least one pair")
    hyps = [p.hypothesis for p in pairs]
    emb = EmbeddingScores(float("nan"), float("nan"), float("nan"), 0)
    if table is not None:
        emb = embedding_metrics(pairs, table)
    return MetricReport(
        ppl=ppl,
        bleu=bleu(pairs),
        rouge_l=rouge_l(pairs),
        emb_avg=emb.avg,
        emb_ext=emb.ext,
        emb_gre=emb.gre,
        dist1=distinct_n(hyps, 1),
        dist2=distinct_n(hyps, 2),
        n_pairs=len(pairs),
        emb_skipped=emb.skipped,
    )


_COLUMNS = (("PPL", "ppl", "{:.2f}"), ("BLEU", "bleu", "{:.4f}"),
            ("Rouge-L", "rouge_l", "{:.4f}"), ("Avg.", "emb_avg", "{:.3f}"),
            ("Ext.", "emb_ext", "{:.3f}"), ("Gre.", "emb_gre", "{:.3f}"),
            ("Dist-1", "dist1", "{:.3f}"), ("Dist-2", "dist2", "{:.3f}"))


def format_report(report: MetricReport, name: str = "model") -> str:
    """Aligned table with the familiar metric column layout."""
    header, row = [], []
    for label, attr, fmt in _COLUMNS:
        value = getattr(report, attr)
        cell = "-" if math.isnan(value) else fmt.format(value)
        width = max(len(label), len(cell))
        header.append(label.rjust(width))
        row.append(cell.rjust(width))
    name_w = max(len("Model"), len(name))
    lines = ["Model".ljust(name_w) + "  " + "  ".join(header),
             name.ljust(name_w) + "  " + "  ".join(row),
             f"(n_pairs={report.n_pairs}, emb_skipped={report.emb_skipped})"]
    return "\n".join(lines)


def report_to_json(report: MetricReport) -> str:
    from dataclasses import asdict

    payload = {}
    for key, value in asdict(report).items():
        payload[key] = None if isinstance(value, float) and math.isnan(value) else value
    return json.dumps(payload, sort_keys=True)
