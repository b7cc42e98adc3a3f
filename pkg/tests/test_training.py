import math

import numpy as np
import pytest
import torch

from vipnet.config import ModelConfig, TrainConfig
from vipnet.cues import make_sentence_embedder
from vipnet.model import VIPNet, featurize
from vipnet.scene_synth import DominanceInterval, ScenarioSpec, make_corpus, \
    synthesize
from vipnet.training import (DataError, TrainingError, batch_losses,
                             cosine_similarity, grad_check, learning_rate,
                             load_checkpoint, loss_cls, loss_cont, loss_reg,
                             loss_text, masked_log_prob, rank1_accuracy,
                             save_checkpoint, train)

from conftest import small_config


def tiny_corpus(count=4, seed=2, profile="mixed"):
    return [c for c, _ in make_corpus(count, seed=seed, profile=profile)]


def tiny_train_cfg(**kw):
    base = dict(epochs=2, batch_size=2, base_lr=1e-3, warmup_epochs=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class _FakeResult:
    def __init__(self, logits, valid):
        self.logits = torch.as_tensor(logits, dtype=torch.float32)
        self.person_valid = torch.as_tensor(valid, dtype=torch.bool)


class TestLossCls:
    def test_uniform_over_four(self):
        r = _FakeResult([0.0, 0.0, 0.0, 0.0], [True] * 4)
        assert float(loss_cls([r], [0])) == pytest.approx(math.log(4.0), abs=1e-6)

    def test_masked_person_excluded_from_denominator(self):
        # the invalid third logit must not change the result at all
        a = _FakeResult([0.0, 0.0, 50.0], [True, True, False])
        b = _FakeResult([0.0, 0.0, -50.0], [True, True, False])
        la, lb = float(loss_cls([a], [0])), float(loss_cls([b], [0]))
        assert la == lb == pytest.approx(math.log(2.0), abs=1e-6)

    def test_masked_target_raises(self):
        r = _FakeResult([0.0, 0.0], [True, False])
        with pytest.raises(DataError):
            masked_log_prob(r.logits, r.person_valid, 1)

    def test_batch_mean(self):
        r1 = _FakeResult([0.0, 0.0], [True, True])
        r2 = _FakeResult([0.0, 0.0, 0.0], [True] * 3)
        want = 0.5 * (math.log(2.0) + math.log(3.0))
        assert float(loss_cls([r1, r2], [0, 0])) == pytest.approx(want, abs=1e-6)


class TestLossText:
    def test_identical_texts(self):
        emb = make_sentence_embedder()
        assert loss_text("the same words", "the same words", emb) == pytest.approx(0.0)

    def test_disjoint_texts(self):
        emb = make_sentence_embedder()
        assert loss_text("alpha beta", "gamma delta", emb) == pytest.approx(1.0)

    def test_empty_truth_skipped(self):
        assert loss_text("anything", "   ", make_sentence_embedder()) is None

    def test_cosine_zero_vector(self):
        assert cosine_similarity(np.zeros(3), np.ones(3)) == 0.0


class TestLossCont:
    def test_no_negatives_is_zero(self):
        a = torch.randn(8)
        assert float(loss_cont(a, a, torch.zeros(0, 8), 0.1)) == 0.0

    def test_equal_similarities_give_log_counts(self):
        e = torch.zeros(4)
        e[0] = 1.0
        # positive and negatives all identical to the anchor: ln(1 + #neg)
        one = float(loss_cont(e, e, e.unsqueeze(0), 0.1))
        two = float(loss_cont(e, e, torch.stack([e, e]), 0.1))
        assert one == pytest.approx(math.log(2.0), abs=1e-6)
        assert two == pytest.approx(math.log(3.0), abs=1e-6)

    def test_perfect_separation_limit(self):
        a = torch.tensor([1.0, 0.0])
        neg = torch.tensor([[-1.0, 0.0]])
        # anchor==positive, negative diametrically opposed, sharp temperature
        val = float(loss_cont(a, a, neg, 0.01))
        assert val < 1e-6

    def test_normalization_makes_scale_irrelevant(self):
        a = torch.tensor([2.0, 1.0, 0.0])
        p = torch.tensor([1.0, 2.0, 0.5])
        n = torch.randn(3, 3)
        assert float(loss_cont(a, p, n, 0.1)) == pytest.approx(
            float(loss_cont(5 * a, 0.1 * p, 3 * n, 0.1)), abs=1e-5)


class TestSchedule:
    def test_zero_at_step_zero(self):
        assert learning_rate(0, 100, 10, 1e-3) == 0.0

    def test_base_at_warmup_end(self):
        assert learning_rate(10, 100, 10, 1e-3) == pytest.approx(1e-3)

    def test_zero_at_end(self):
        assert learning_rate(100, 100, 10, 1e-3) == pytest.approx(0.0, abs=1e-12)

    def test_linear_warmup(self):
        lrs = [learning_rate(s, 100, 10, 1.0) for s in range(11)]
        assert lrs == pytest.approx([s / 10 for s in range(11)])

    def test_cosine_midpoint(self):
        assert learning_rate(55, 100, 10, 1.0) == pytest.approx(0.5)

    def test_monotone_decay_after_warmup(self):
        lrs = [learning_rate(s, 100, 10, 1.0) for s in range(10, 101)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestBatchLosses:
    def test_decomposition_identity(self):
        model = VIPNet(small_config())
        feats = [featurize(c) for c in tiny_corpus()[:2]]
        cfg = tiny_train_cfg()
        total, bd = batch_losses(model, feats, cfg, np.random.default_rng(0))
        recomposed = (bd.cls + cfg.lambda_text * bd.text
                      + cfg.lambda_cont * bd.cont + cfg.lambda_reg * bd.reg)
        assert bd.total == pytest.approx(recomposed, abs=1e-9)
        assert float(total.detach()) == pytest.approx(bd.total, rel=1e-4)

    def test_lambda_cont_zero_structurally_absent(self):
        model = VIPNet(small_config())
        feats = [featurize(c) for c in tiny_corpus()[:2]]
        cfg = tiny_train_cfg(lambda_cont=0.0)
        _, bd = batch_losses(model, feats, cfg, np.random.default_rng(0))
        assert bd.cont == 0.0

    def test_nan_parameter_aborts_with_term_name(self):
        model = VIPNet(small_config())
        with torch.no_grad():
            model.classifier[0] = float("nan")
        feats = [featurize(c) for c in tiny_corpus()[:2]]
        with pytest.raises(TrainingError, match="cls|reg"):
            batch_losses(model, feats, tiny_train_cfg(), np.random.default_rng(0))

    def test_vip_missing_raises(self):
        model = VIPNet(small_config())
        feats = [featurize(c) for c in tiny_corpus()[:2]]
        feats[0].vip_person_id = 42
        with pytest.raises(DataError):
            batch_losses(model, feats, tiny_train_cfg(), np.random.default_rng(0))

    def test_masked_person_input_gradient_exactly_zero(self):
        spec = ScenarioSpec(seed=4, num_persons=3, num_frames=6,
                            schedule=[DominanceInterval(0, 6, 0, "speech")])
        clip, _ = synthesize(spec)
        clip.persons[2].present[:] = False  # person 2 fully absent
        model = VIPNet(small_config())
        feats = featurize(clip)
        override = {k: torch.tensor(v, dtype=torch.float32, requires_grad=True)
                    for k, v in feats.series.items()}
        result = model(feats, series_override=override)
        loss = -torch.log(result.probabilities[0])
        loss.backward()
        for name, t in override.items():
            assert torch.all(t.grad[2] == 0), name

    def test_regularizer_is_squared_norm(self):
        model = VIPNet(small_config())
        want = sum(float((p.detach() ** 2).sum()) for p in model.parameters())
        assert float(loss_reg(model).detach()) == pytest.approx(want, rel=1e-6)


class TestTrainLoop:
    def test_deterministic_repeat(self):
        corpus = tiny_corpus(4)
        cfg = tiny_train_cfg()
        m1, log1 = train(corpus, cfg, model_config=small_config())
        m2, log2 = train(corpus, cfg, model_config=small_config())
        for (k1, p1), (k2, p2) in zip(m1.state_dict().items(), m2.state_dict().items()):
            assert k1 == k2
            assert torch.equal(p1, p2), k1
        assert log1 == log2

    def test_empty_corpus_raises(self):
        with pytest.raises(DataError):
            train([], tiny_train_cfg())

    def test_metrics_log_written(self, tmp_path):
        corpus = tiny_corpus(4)
        log = tmp_path / "m.jsonl"
        _, metrics = train(corpus, tiny_train_cfg(), model_config=small_config(),
                           val_corpus=corpus[:1], log_path=log)
        assert len(metrics) == 2
        assert "val_rank1" in metrics[0]
        assert len(log.read_text().strip().splitlines()) == 2

    def test_rank1_accuracy_bounds(self):
        model = VIPNet(small_config())
        feats = [featurize(c) for c in tiny_corpus(4)]
        acc = rank1_accuracy(model, feats)
        assert 0.0 <= acc <= 1.0


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        corpus = tiny_corpus()[:3]
        cfg = tiny_train_cfg(epochs=1)
        model, _ = train(corpus, cfg, model_config=small_config())
        save_checkpoint(model, cfg, tmp_path / "ck")
        loaded, cfg2 = load_checkpoint(tmp_path / "ck")
        assert cfg2 == cfg
        assert loaded.config == model.config
        for (k, a), (_, b) in zip(model.state_dict().items(),
                                  loaded.state_dict().items()):
            assert torch.equal(a, b), k

    def test_loaded_model_predicts_identically(self, tmp_path):
        from vipnet.inference import predict
        corpus = tiny_corpus()[:3]
        cfg = tiny_train_cfg(epochs=1)
        model, _ = train(corpus, cfg, model_config=small_config())
        save_checkpoint(model, cfg, tmp_path / "ck")
        loaded, _ = load_checkpoint(tmp_path / "ck")
        for clip in corpus:
            assert predict(model, clip).probabilities == \
                predict(loaded, clip).probabilities


class TestGradCheck:
    def test_requires_double(self):
        model = VIPNet(small_config())
        feats = [featurize(c) for c in tiny_corpus()[:2]]
        with pytest.raises(TrainingError, match="64-bit"):
            grad_check(model, feats, tiny_train_cfg())

    def test_small_model_passes(self):
        cfg = ModelConfig(dim=8, heads=2, text_layers=1, relate_layers=1,
                          vocab_size=64, max_frames=16, seed=0)
        model = VIPNet(cfg).double()
        spec = ScenarioSpec(seed=1, num_persons=2, num_frames=5,
                            schedule=[DominanceInterval(0, 5, 0, "speech")])
        clip, _ = synthesize(spec)
        errors = grad_check(model, [featurize(clip)],
                            tiny_train_cfg(lambda_text=0.0),
                            samples_per_param=4, seed=0)
        assert errors
        assert max(errors.values()) < 1e-4
