import math

import numpy as np
import pytest
import torch

from conftest import DATA_DIR, toy_model_config
from mmdial.inputs import MaskedResponse, assemble_input
from mmdial.model import (ModelConfig, NumericsError, ShapeError,
                          VisualProjector, batch_tensors, build_model,
                          load_checkpoint, load_model, loss_separate, loss_shared,
                          project_image_features, save_checkpoint, separate_logits,
                          shared_logits)
from mmdial.retrieval import load_embedding_matrix
from mmdial.tokenizer import Tokenizer
from test_inputs import tiny_example


@pytest.fixture
def tok():
    return Tokenizer([f"w{i}" for i in range(10)] + ["k0", "k1"])


def zero_parameters(model):
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


class TestConfig:
    def test_heads_must_divide(self, tok):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig.for_tokenizer(tok, d_model=30, n_heads=4)

    def test_special_ids_distinct(self):
        with pytest.raises(ValueError, match="distinct"):
            ModelConfig(vocab_size=50, sep_id=3, mask_id=3)

    def test_variant_checked(self, tok):
        with pytest.raises(ValueError, match="variant"):
            ModelConfig.for_tokenizer(tok, variant="fused")


class TestVisualProjector:
    def test_zero_input_bias_only(self):
        proj = VisualProjector(4, 8)
        out = project_image_features([np.zeros(4)], proj)
        expected = proj.fc2(torch.tanh(proj.fc1.bias)).detach()
        assert torch.allclose(out[0].detach(), expected)

    def test_hand_computed_two_layer_map(self):
        proj = VisualProjector(4, 8).double()
        x = np.array([0.5, -1.0, 2.0, 0.25])
        w1 = proj.fc1.weight.detach().numpy()
        b1 = proj.fc1.bias.detach().numpy()
        w2 = proj.fc2.weight.detach().numpy()
        b2 = proj.fc2.bias.detach().numpy()
        expected = w2 @ np.tanh(w1 @ x + b1) + b2
        out = project_image_features([x], proj).detach().numpy()[0]
        assert np.allclose(out, expected, atol=1e-12)

    def test_batch_order_preserved(self):
        proj = VisualProjector(4, 8)
        feats = [np.full(4, i, dtype=float) for i in range(3)]
        batch = project_image_features(feats, proj)
        singles = [project_image_features([f], proj)[0] for f in feats]
        for row, single in zip(batch, singles):
            assert torch.allclose(row, single)

    def test_shape_error(self):
        proj = VisualProjector(4, 8)
        with pytest.raises(ShapeError):
            project_image_features([np.zeros(5)], proj)


class TestLosses:
    def test_uniform_logits_mean_is_log_vocab(self):
        logits = torch.zeros(5, 100)
        value = loss_separate(logits, [3, 7, 11, 13, 17])
        assert float(value.mean) == pytest.approx(math.log(100), abs=1e-6)
        assert float(value.total) == pytest.approx(5 * math.log(100), abs=1e-5)

    def test_one_hot_logits_loss_near_zero(self):
        targets = [2, 4, 1]
        logits = torch.full((3, 6), -1e4)
        for i, t in enumerate(targets):
            logits[i, t] = 1e4
        value = loss_separate(logits, targets)
        assert float(value.mean) == pytest.approx(0.0, abs=1e-6)

    def test_hand_computed_cross_entropy_3x5(self):
        logits = torch.tensor([
            [0.1, 0.2, 0.3, 0.4, 0.5],
            [1.0, -1.0, 0.0, 2.0, -2.0],
            [0.0, 0.0, 3.0, 0.0, 0.0],
        ])
        targets = [4, 3, 2]
        expected = []
        for row, t in zip(logits.tolist(), targets):
            z = sum(math.exp(v) for v in row)
            expected.append(-math.log(math.exp(row[t]) / z))
        value = loss_separate(logits, targets)
        assert float(value.total) == pytest.approx(sum(expected), abs=1e-5)
        assert float(value.mean) == pytest.approx(sum(expected) / 3, abs=1e-6)

    def test_shared_all_masked_equals_separate(self):
        torch.manual_seed(0)
        logits = torch.randn(6, 40)
        original = [7, 8, 9, 10, 11, 12]
        masked = MaskedResponse(original=original, corrupted=[3] * 6,
                                masked_positions=list(range(6)),
                                replacement_kinds=["mask-token"] * 6)
        assert float(loss_shared(logits, masked).total) == \
            pytest.approx(float(loss_separate(logits, original).total), abs=1e-5)

    def test_shared_no_masked_positions_zero_with_warning(self):
        masked = MaskedResponse(original=[1, 2], corrupted=[1, 2],
                                masked_positions=[], replacement_kinds=[])
        with pytest.warns(UserWarning, match="no masked positions"):
            value = loss_shared(torch.zeros(0, 10), masked)
        assert float(value.total) == 0.0 and value.n_tokens == 0

    def test_shared_uniform_seven_of_ten(self):
        original = list(range(6, 16))
        masked_pos = list(range(7))
        corrupted = [3 if i in masked_pos else t for i, t in enumerate(original)]
        masked = MaskedResponse(original=original, corrupted=corrupted,
                                masked_positions=masked_pos,
                                replacement_kinds=["mask-token"] * 7)
        value = loss_shared(torch.zeros(7, 50), masked)
        assert float(value.total) == pytest.approx(7 * math.log(50), abs=1e-4)


class TestForward:
    def test_golden_logits(self, tok):
        cfg = toy_model_config(tok, variant="shared")
        torch.manual_seed(1234)
        model = build_model(cfg)
        batch = assemble_input(tiny_example(), tok, cfg)
        logits = shared_logits(model, batch).detach().numpy()
        golden = load_embedding_matrix(DATA_DIR / "golden_logits.bin")
        assert logits.shape == golden.shape
        assert np.allclose(logits, golden, atol=2e-5)  # float32 storage

    def test_zero_layer_head_on_embeddings(self, tok):
        cfg = toy_model_config(tok, n_layers=0)
        model = build_model(cfg)
        batch = assemble_input(tiny_example(), tok, cfg)
        logits = shared_logits(model, batch)
        t = batch_tensors(batch)
        emb = model.embed(t["token_ids"], t["position_ids"], t["segment_ids"],
                          t["image_features"], t["image_slots"])
        expected = model.head(emb)[0]
        assert torch.equal(logits, expected)

    def test_softmax_rows_normalized(self, tok):
        cfg = toy_model_config(tok)
        torch.manual_seed(0)
        model = build_model(cfg)
        batch = assemble_input(tiny_example(), tok, cfg)
        probs = torch.softmax(shared_logits(model, batch), dim=-1)
        assert torch.allclose(probs.sum(-1), torch.ones(len(batch)), atol=1e-6)

    def test_identical_image_slots_permutable_with_equal_positions(self, tok):
        cfg = toy_model_config(tok)
        torch.manual_seed(3)
        model = build_model(cfg).double()
        ex = tiny_example(turn_imgs=0, ent_imgs=2)
        batch = assemble_input(ex, tok, cfg)
        s0, s1 = batch.image_slots
        batch.position_ids[s1] = batch.position_ids[s0]  # equalize position ids
        r_lo, r_hi = batch.block_spans["response"]
        base = shared_logits(model, batch)[r_lo:r_hi]
        batch.image_features = batch.image_features[::-1].copy()  # permute the slots
        fwd = shared_logits(model, batch)[r_lo:r_hi]
        assert torch.allclose(base, fwd, atol=1e-9)

    def test_numerics_error_names_layer(self, tok):
        cfg = toy_model_config(tok)
        model = build_model(cfg)
        with torch.no_grad():
            model.blocks[1].mlp.fc2.weight.fill_(float("inf"))
        batch = assemble_input(tiny_example(), tok, cfg)
        with pytest.raises(NumericsError, match="layer 1"):
            shared_logits(model, batch)

    def test_separate_shapes(self, tok):
        cfg = toy_model_config(tok, variant="separate")
        torch.manual_seed(0)
        model = build_model(cfg)
        batch = assemble_input(tiny_example(), tok, cfg)
        logits, targets = separate_logits(model, batch)
        r_lo, r_hi = batch.block_spans["response"]
        assert logits.shape == (r_hi - r_lo - 1, cfg.vocab_size)
        assert targets.tolist() == batch.token_ids[r_lo + 1:r_hi]


class TestSegmentEmbedding:
    def test_segment_swap_shifts_embedding_by_difference(self, tok):
        cfg = toy_model_config(tok)
        torch.manual_seed(5)
        model = build_model(cfg).double()
        batch = assemble_input(tiny_example(), tok, cfg)
        t = batch_tensors(batch, dtype=torch.float64)
        base = model.embed(t["token_ids"], t["position_ids"], t["segment_ids"],
                           t["image_features"], t["image_slots"])
        lo, hi = batch.block_spans["entities"]
        swapped = t["segment_ids"].clone()
        swapped[0, lo:hi] = 3
        moved = model.embed(t["token_ids"], t["position_ids"], swapped,
                            t["image_features"], t["image_slots"])
        delta = (model.embed.segment.weight[3] - model.embed.segment.weight[2]).detach()
        diff = (moved - base)[0]
        assert torch.allclose(diff[lo:hi], delta.expand(hi - lo, -1), atol=1e-9)
        assert torch.allclose(diff[:lo], torch.zeros_like(diff[:lo]))
        assert torch.allclose(diff[hi:], torch.zeros_like(diff[hi:]))


class TestCheckpoint:
    def test_roundtrip_state_and_config(self, tok, tmp_path):
        cfg = toy_model_config(tok, variant="separate")
        torch.manual_seed(2)
        model = build_model(cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, cfg)
        cfg2, state = load_checkpoint(path)
        assert cfg2 == cfg
        for name, tensor in model.state_dict().items():
            assert torch.equal(state[name], tensor)
        reloaded, _ = load_model(path)
        batch = assemble_input(tiny_example(), tok, cfg)
        a, _ = separate_logits(model, batch)
        b, _ = separate_logits(reloaded, batch)
        assert torch.allclose(a, b, atol=1e-7)

    def test_byte_stable(self, tok, tmp_path):
        cfg = toy_model_config(tok)
        torch.manual_seed(2)
        model = build_model(cfg)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, model, cfg)
        save_checkpoint(p2, model, cfg)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"nope" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)
