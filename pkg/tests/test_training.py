"""Adam updates, teacher-forced training, and the two-stage transfer protocol."""

import math

import numpy as np
import pytest

from molora.adapters import RankVector
from molora.autodiff import GradTape, Param
from molora.corpus import SEP_ID, STOP_ID, standard_corpora
from molora.model import MODE_FROZEN, MODE_FULL, DecoderConfig, build_model
from molora.training import (
    AdamConfig,
    AdamState,
    RetentionReport,
    adam_step,
    bleu4_validation,
    evaluate_model,
    forgetting_experiment,
    sample_loss,
    teacher_arrays,
    token_accuracy,
    train,
)


def tiny_setup(seed=0, n_train=16, n_val=4):
    cfg = DecoderConfig(vocab=160, blocks=2, d_model=16, heads=2, max_seq=64, scenes=256)
    r_l, r_m = RankVector((4, 2)), RankVector((4, 4))
    a, b, vocab = standard_corpora(n_train, n_val, seed, cfg.vocab)
    model = build_model(cfg, r_l, r_m, seed=seed)
    return cfg, model, a, b, vocab


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = Param("w", np.full((2, 3), 1.5))
        state = AdamState([p], AdamConfig(lr=0.1))
        adam_step(state, {"w": np.zeros((2, 3))})
        np.testing.assert_array_equal(p.value, np.full((2, 3), 1.5))

    def test_first_step_closed_form(self):
        # m_hat = 1, v_hat = 1, so the update is -lr / (1 + eps) = -0.001.
        p = Param("w", [[0.0]])
        state = AdamState([p], AdamConfig(lr=1e-3))
        adam_step(state, {"w": np.array([[1.0]])})
        assert p.value[0, 0] == pytest.approx(-1e-3, rel=1e-7)
        assert state.step == 1

    def test_missing_gradient_rejected(self):
        p = Param("w", [[0.0]])
        state = AdamState([p])
        with pytest.raises(ValueError, match="missing gradient"):
            adam_step(state, {})

    def test_untracked_parameters_untouched(self):
        tracked = Param("a", [[0.0]])
        outsider = Param("b", [[7.0]])
        state = AdamState([tracked])
        adam_step(state, {"a": np.array([[1.0]]), "b": np.array([[1.0]])})
        assert outsider.value[0, 0] == 7.0


class TestTeacherArrays:
    def test_prefixed_layout(self):
        inputs, targets, weights = teacher_arrays([10, 11], [20, 21], prefixed=True)
        assert inputs == [10, 11, SEP_ID, 20, 21]
        assert targets == [10, 11, SEP_ID, 20, 21, STOP_ID]
        assert weights == [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]

    def test_unprefixed_layout(self):
        inputs, targets, weights = teacher_arrays([10, 11], [20], prefixed=False)
        assert inputs == [10, 11, SEP_ID, 20]
        assert targets == [11, SEP_ID, 20, STOP_ID]
        assert weights == [0.0, 0.0, 1.0, 1.0]


class TestTrain:
    def test_zero_epochs_is_identity(self):
        _, model, a, _, vocab = tiny_setup()
        before = [p.value.copy() for p in model.params()]
        curve = train(model, a.train, vocab, MODE_FULL, epochs=0, seed=0)
        assert curve == []
        for p, snap in zip(model.params(), before):
            np.testing.assert_array_equal(p.value, snap)

    def test_initial_loss_near_log_vocab(self):
        """A fresh model is close to uniform over the padded vocabulary."""
        _, model, a, _, vocab = tiny_setup()
        losses = []
        for s in a.train[:8]:
            tape = GradTape()
            losses.append(float(sample_loss(tape, model, s, vocab, MODE_FULL).value[0, 0]))
        assert np.mean(losses) == pytest.approx(math.log(160), rel=0.10)

    def test_loss_decreases_over_epochs(self):
        _, model, a, _, vocab = tiny_setup(n_train=24)
        curve = train(model, a.train, vocab, MODE_FULL, epochs=5, seed=0,
                      adam=AdamConfig(lr=2e-3), batch_size=4)
        assert curve[-1] < curve[0]

    def test_empty_corpus_rejected(self):
        _, model, _, _, vocab = tiny_setup()
        with pytest.raises(ValueError, match="empty"):
            train(model, [], vocab, MODE_FULL, epochs=1, seed=0)

    def test_bitwise_determinism(self):
        _, m1, a, _, vocab = tiny_setup(seed=3)
        _, m2, _, _, _ = tiny_setup(seed=3)
        for m in (m1, m2):
            train(m, a.train, vocab, MODE_FULL, epochs=2, seed=3, batch_size=4)
        for p1, p2 in zip(m1.params(), m2.params()):
            np.testing.assert_array_equal(p1.value, p2.value)

    def test_adapter_training_leaves_backbone_bitwise_intact(self):
        _, model, a, _, vocab = tiny_setup(seed=4)
        before = [p.value.copy() for p in model.backbone_params()]
        train(model, a.train, vocab, MODE_FROZEN, epochs=2, seed=4, batch_size=4)
        for p, snap in zip(model.backbone_params(), before):
            np.testing.assert_array_equal(p.value, snap, err_msg=p.name)
        assert any(np.linalg.norm(p.value) > 0 for p in model.adapter_params() if p.name.endswith(".B"))

    def test_question_positions_carry_no_loss_gradient(self):
        _, model, a, _, vocab = tiny_setup(seed=5)
        sample = a.train[0]
        q_len = len(vocab.encode(sample.question))
        tape = GradTape()
        inputs, targets, weights = teacher_arrays(
            vocab.encode(sample.question), vocab.encode(sample.answer))
        logits = model.forward(tape, inputs, scene_id=sample.scene_id, mode=MODE_FULL)
        loss = tape.cross_entropy(logits, targets, weights=weights)
        tape.backward(loss)
        # Rows 0..q_len predict question/separator tokens; their logit
        # gradients must vanish because the loss is answer-masked.
        np.testing.assert_array_equal(logits.grad[: q_len + 1], 0.0)
        assert np.any(logits.grad[q_len + 1:] != 0.0)

    def test_epoch_callback_sees_every_epoch(self):
        _, model, a, _, vocab = tiny_setup()
        seen = []
        train(model, a.train, vocab, MODE_FULL, epochs=3, seed=0,
              on_epoch=lambda e, loss: seen.append((e, loss)))
        assert [e for e, _ in seen] == [0, 1, 2]


class TestEvaluate:
    def test_scored_samples_are_complete(self):
        _, model, a, _, vocab = tiny_setup()
        scored = evaluate_model(model, a.val, vocab, max_new=6)
        assert len(scored) == len(a.val)
        for s in scored:
            assert s.uncertainty >= 0
            assert 0.0 <= s.rouge_l <= 1.0
            assert 0.0 <= s.token_accuracy <= 1.0
            assert s.reference

    def test_token_accuracy_is_one_on_a_memorizing_model(self):
        _, model, a, _, vocab = tiny_setup(n_train=8)
        train(model, a.train, vocab, MODE_FULL, epochs=60, seed=0,
              adam=AdamConfig(lr=3e-3), batch_size=4)
        accs = [token_accuracy(model, s, vocab) for s in a.train]
        assert np.mean(accs) > 0.9

    def test_bleu4_validation_bounds(self):
        _, model, a, _, vocab = tiny_setup()
        score = bleu4_validation(model, a.val, vocab, max_new=6)
        assert 0.0 <= score <= 1.0


class TestRetentionReport:
    def test_strategy_and_range_validation(self):
        with pytest.raises(ValueError, match="strategy"):
            RetentionReport("other", 0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5)
        with pytest.raises(ValueError, match="outside"):
            RetentionReport("fft", 0, 1.5, 0.5, 0.5, 0.5, 0.5, 0.5)


class TestForgettingExperiment:
    def test_zero_stage2_branches_match_stage1_model(self):
        """With no stage-2 updates both strategies are the stage-1 model."""
        cfg = DecoderConfig(vocab=160, blocks=2, d_model=16, heads=2, max_seq=64, scenes=256)
        pairs = forgetting_experiment(cfg, RankVector((4, 2)), RankVector((4, 4)),
                                      seeds=[0], n_train=12, n_val=4,
                                      stage1_epochs=1, stage2_epochs=0, batch_size=4)
        fft, ada = pairs[0]
        assert fft.pre_token_acc == ada.pre_token_acc
        assert fft.pre_rouge_l == ada.pre_rouge_l
        assert fft.train_token_acc == ada.train_token_acc

    def test_one_pair_per_seed_with_tagged_strategies(self):
        cfg = DecoderConfig(vocab=160, blocks=2, d_model=16, heads=2, max_seq=64, scenes=256)
        pairs = forgetting_experiment(cfg, RankVector((2, 2)), RankVector((2, 2)),
                                      seeds=[0, 1], n_train=8, n_val=2,
                                      stage1_epochs=1, stage2_epochs=1, batch_size=4)
        assert [(f.seed, a.seed) for f, a in pairs] == [(0, 0), (1, 1)]
        for fft, ada in pairs:
            assert fft.strategy == "fft" and ada.strategy == "adapter"

    def test_needs_seeds_and_scene_capacity(self):
        cfg = DecoderConfig(vocab=160, blocks=2, d_model=16, heads=2, max_seq=64, scenes=256)
        with pytest.raises(ValueError, match="seed"):
            forgetting_experiment(cfg, RankVector((2, 2)), RankVector((2, 2)), [],
                                  8, 2, 1, 1)
        small = DecoderConfig(vocab=160, blocks=2, d_model=16, heads=2, max_seq=64, scenes=8)
        with pytest.raises(ValueError, match="scene"):
            forgetting_experiment(small, RankVector((2, 2)), RankVector((2, 2)), [0],
                                  8, 2, 1, 1)
