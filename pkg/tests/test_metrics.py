import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DATA_DIR, build_fixture_examples, toy_model_config
from mmdial.metrics import (EvalPair, MetricReport, UndefinedMetricError,
                            WordVectorTable, bleu, distinct_n, embedding_metrics,
                            evaluate_pairs, format_report, make_pairs, perplexity,
                            report_to_json, rouge_l, strip_punctuation)
from mmdial.model import build_model
from mmdial.tokenizer import Tokenizer
from oracles import bleu_oracle, distinct_oracle, embedding_oracle, rouge_l_oracle

GOLDEN_HYPS = [
    "i really like the flower garden",
    "the dog plays in the park .",
    "music is great fun",
    "we eat good food today",
    "you see a big movie tonight",
]
GOLDEN_REFS = [
    "i like the flower garden very much",
    "a dog is playing in the park",
    "music is really great fun !",
    "they eat bad food every day",
    "you saw a small movie yesterday",
]


@pytest.fixture(scope="module")
def table():
    return WordVectorTable.load(DATA_DIR / "toy_vectors.json")


@pytest.fixture
def golden_pairs():
    return make_pairs(GOLDEN_HYPS, GOLDEN_REFS)


class TestPunctuation:
    def test_standalone_tokens_dropped(self):
        assert strip_punctuation(["hi", ".", "!", "there"]) == ["hi", "there"]

    def test_trailing_sentence_punct_removed(self):
        assert strip_punctuation(["okay.", "right!?", "mid-word"]) == \
            ["okay", "right", "mid-word"]

    def test_pairs_are_tokenized_and_stripped(self):
        (pair,) = make_pairs(["Hello there."], ["HELLO there !"])
        assert pair.hypothesis == ["hello", "there"]
        assert pair.reference == ["hello", "there"]
        assert pair.raw_hypothesis == "Hello there."


class TestDistinct:
    def test_all_distinct(self):
        assert distinct_n([["a", "b", "c"]], 1) == pytest.approx(1.0)

    def test_one_unique_of_four(self):
        assert distinct_n([["a", "a", "a", "a"]], 1) == pytest.approx(0.25)

    def test_bigrams(self):
        assert distinct_n([["a", "b", "a", "b"]], 2) == pytest.approx(2 / 3)

    def test_matches_oracle_on_golden(self, golden_pairs):
        hyps = [p.hypothesis for p in golden_pairs]
        for n in (1, 2):
            assert distinct_n(hyps, n) == pytest.approx(distinct_oracle(hyps, n),
                                                        abs=1e-9)

    def test_zero_grams_error(self):
        with pytest.raises(UndefinedMetricError):
            distinct_n([[]], 2)

    def test_duplicate_response_never_increases(self):
        hyps = [["a", "b"], ["c", "d"]]
        base = distinct_n(hyps, 1)
        assert distinct_n(hyps + [["a", "b"]], 1) <= base


class TestBleu:
    def test_identity_is_one(self):
        pairs = make_pairs(["the cat sat on the mat"], ["the cat sat on the mat"])
        assert bleu(pairs) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint_goes_to_zero(self):
        pairs = make_pairs(["aa bb cc dd"], ["xx yy zz ww"])
        assert bleu(pairs) < 1e-6

    def test_matches_oracle_on_golden(self, golden_pairs):
        hyps = [p.hypothesis for p in golden_pairs]
        refs = [p.reference for p in golden_pairs]
        assert bleu(golden_pairs) == pytest.approx(bleu_oracle(hyps, refs), abs=1e-6)

    def test_empty_hypothesis_smoothed_not_crashing(self):
        pairs = make_pairs(["", "the cat"], ["the cat sat", "the cat"])
        assert 0.0 <= bleu(pairs) <= 1.0

    def test_brevity_penalty_applies(self):
        short = make_pairs(["the cat"], ["the cat sat on the mat"])
        assert bleu(short) < 1.0


class TestRouge:
    def test_identity_is_one(self):
        pairs = make_pairs(["a b c d"], ["a b c d"])
        assert rouge_l(pairs) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint_is_zero(self):
        pairs = make_pairs(["aa bb"], ["cc dd"])
        assert rouge_l(pairs) == 0.0

    def test_matches_oracle_on_golden(self, golden_pairs):
        hyps = [p.hypothesis for p in golden_pairs]
        refs = [p.reference for p in golden_pairs]
        assert rouge_l(golden_pairs) == pytest.approx(rouge_l_oracle(hyps, refs),
                                                      abs=1e-6)

    def test_subsequence_not_substring(self):
        pairs = [EvalPair(hypothesis=["a", "x", "b", "y", "c"],
                          reference=["a", "b", "c"])]
        # LCS = 3 -> P=3/5, R=1
        p, r, b2 = 3 / 5, 1.0, 1.2 ** 2
        expected = (1 + b2) * p * r / (r + b2 * p)
        assert rouge_l(pairs) == pytest.approx(expected, abs=1e-9)


class TestEmbedding:
    def test_identity_all_ones(self, table):
        pairs = make_pairs(["i like music"], ["i like music"])
        scores = embedding_metrics(pairs, table)
        assert scores.avg == pytest.approx(1.0, abs=1e-6)
        assert scores.ext == pytest.approx(1.0, abs=1e-6)
        assert scores.gre == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_single_tokens_all_zero(self):
        table = WordVectorTable({"aa": np.array([1.0, 0.0]),
                                 "bb": np.array([0.0, 1.0])})
        pairs = make_pairs(["aa"], ["bb"])
        scores = embedding_metrics(pairs, table)
        assert scores.avg == pytest.approx(0.0, abs=1e-9)
        assert scores.ext == pytest.approx(0.0, abs=1e-9)
        assert scores.gre == pytest.approx(0.0, abs=1e-9)

    def test_hand_computed_three_pairs(self):
        table = WordVectorTable({
            "red": np.array([1.0, 0.0, 0.0]),
            "blue": np.array([0.0, 1.0, 0.0]),
            "sky": np.array([0.0, 0.8, 0.6]),
            "sun": np.array([0.9, 0.1, 0.0]),
            "sea": np.array([-0.6, 0.8, 0.0]),
        })
        pairs = make_pairs(["red sun", "blue sky", "sea"],
                           ["red", "sky blue", "sun"])
        got = embedding_metrics(pairs, table)
        # pair-by-pair with the independent loop implementation
        exp_avg, exp_ext, exp_gre, _ = embedding_oracle(
            [p.hypothesis for p in pairs], [p.reference for p in pairs],
            {w: v for w, v in table.vectors.items()})
        assert got.avg == pytest.approx(exp_avg, abs=1e-9)
        assert got.ext == pytest.approx(exp_ext, abs=1e-9)
        assert got.gre == pytest.approx(exp_gre, abs=1e-9)

    def test_matches_oracle_on_golden(self, table, golden_pairs):
        got = embedding_metrics(golden_pairs, table)
        exp = embedding_oracle([p.hypothesis for p in golden_pairs],
                               [p.reference for p in golden_pairs],
                               table.vectors)
        assert got.avg == pytest.approx(exp[0], abs=1e-6)
        assert got.ext == pytest.approx(exp[1], abs=1e-6)
        assert got.gre == pytest.approx(exp[2], abs=1e-6)
        assert got.skipped == exp[3]

    def test_all_oov_pair_skipped_and_counted(self, table):
        pairs = make_pairs(["qqqq zzzz", "i like music"],
                           ["wwww", "i like music"])
        scores = embedding_metrics(pairs, table)
        assert scores.skipped == 1
        assert scores.avg == pytest.approx(1.0, abs=1e-6)

    def test_every_pair_oov_raises(self, table):
        with pytest.raises(UndefinedMetricError):
            embedding_metrics(make_pairs(["qqqq"], ["zzzz"]), table)

    def test_avg_invariant_to_positive_scaling(self, table, golden_pairs):
        scaled = WordVectorTable({w: 7.5 * v for w, v in table.vectors.items()})
        a = embedding_metrics(golden_pairs, table)
        b = embedding_metrics(golden_pairs, scaled)
        assert a.avg == pytest.approx(b.avg, abs=1e-9)


class TestPermutationInvariance:
    def test_all_metrics_pair_order_invariant(self, table, golden_pairs):
        flipped = list(reversed(golden_pairs))
        assert bleu(golden_pairs) == pytest.approx(bleu(flipped), abs=1e-12)
        assert rouge_l(golden_pairs) == pytest.approx(rouge_l(flipped), abs=1e-12)
        a = embedding_metrics(golden_pairs, table)
        b = embedding_metrics(flipped, table)
        assert a.avg == pytest.approx(b.avg, abs=1e-12)
        hyps = [p.hypothesis for p in golden_pairs]
        assert distinct_n(hyps, 1) == distinct_n(list(reversed(hyps)), 1)


class TestPerplexity:
    def test_uniform_model_ppl_is_vocab_size(self):
        examples, *_ = build_fixture_examples()
        texts = [t.text for ex in examples for t in ex.context] + \
                [ex.response.text for ex in examples]
        tok = Tokenizer.from_texts(texts, max_size=100)
        # pad the vocabulary to exactly 100 entries
        extra = [f"filler{i}" for i in range(100 - tok.vocab_size)]
        tok = Tokenizer(tok.tokens[6:] + extra)
        assert tok.vocab_size == 100
        cfg = toy_model_config(tok, n_layers=0)
        model = build_model(cfg)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        ppl = perplexity(model, examples, tok, cfg)
        assert ppl == pytest.approx(100.0, abs=0.5)

    def test_modes_agree_for_uniform(self):
        examples, *_ = build_fixture_examples()
        texts = [t.text for ex in examples for t in ex.context] + \
                [ex.response.text for ex in examples]
        tok = Tokenizer.from_texts(texts)
        cfg = toy_model_config(tok, n_layers=0)
        model = build_model(cfg)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        assert perplexity(model, examples, tok, cfg, mode="causal") == \
            pytest.approx(perplexity(model, examples, tok, cfg, mode="masked"),
                          rel=1e-6)


class TestReport:
    def test_evaluate_pairs_full_report(self, table, golden_pairs):
        report = evaluate_pairs(golden_pairs, table, ppl=12.5)
        assert report.n_pairs == 5
        assert 0.0 <= report.bleu <= 1.0
        assert 0.0 <= report.dist1 <= 1.0
        text = format_report(report, name="toy")
        assert "BLEU" in text and "Dist-2" in text and "toy" in text
        payload = report_to_json(report)
        assert '"bleu"' in payload

    def test_report_validates_ranges(self):
        with pytest.raises(ValueError):
            MetricReport(ppl=1.0, bleu=1.5, rouge_l=0.5, emb_avg=0.5, emb_ext=0.5,
                         emb_gre=0.5, dist1=0.5, dist2=0.5, n_pairs=1)

    def test_nan_fields_render_as_dash(self, golden_pairs):
        report = evaluate_pairs(golden_pairs, table=None)
        text = format_report(report)
        assert " -" in text


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcde"), min_size=1, max_size=6),
                min_size=1, max_size=6))
def test_distinct_bounds_property(corpus):
    value = distinct_n(corpus, 1)
    assert 0.0 < value <= 1.0
