import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odnlp import corpus
from odnlp import encoder_finetune as enc
from odnlp.errors import ConfigurationError, TrainingError, ValidationError

from helpers import SCHEMA, TINY_VOCAB, build_tiny_encoder, make_keyword_corpus

SMOKE_SEED = 42


@pytest.fixture(scope="module")
def tiny_encoder(tmp_path_factory):
    return build_tiny_encoder(tmp_path_factory.mktemp("enc"))


@pytest.fixture(scope="module")
def smoke(tiny_encoder):
    cases = make_keyword_corpus(500, seed=SMOKE_SEED)
    split = corpus.make_splits(cases, "random_60_20_20", seed=SMOKE_SEED)
    train, val, test = corpus.split_cases(cases, split)
    config = enc.FineTuneConfig(
        encoder_id=tiny_encoder, batch_size=16, learning_rate=5e-3,
        epochs=5, seed=SMOKE_SEED)
    model = enc.finetune_encoder(train, val, config)
    return model, train, val, test, config


class TestConfig:
    def test_documented_defaults(self):
        config = enc.FineTuneConfig(encoder_id="x")
        assert config.batch_size == 32
        assert config.weight_decay == 0.01
        assert config.learning_rate == 2e-5
        assert config.threshold == 0.5
        assert config.selection_metric == "macro_f1"

    def test_round_trip(self):
        config = enc.FineTuneConfig(encoder_id="x", epochs=3, seed=9)
        assert enc.FineTuneConfig.from_dict(config.as_dict()) == config

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            enc.FineTuneConfig(encoder_id="")
        with pytest.raises(ConfigurationError):
            enc.FineTuneConfig(encoder_id="x", batch_size=0)
        with pytest.raises(ConfigurationError):
            enc.FineTuneConfig(encoder_id="x", epochs=0)
        with pytest.raises(ConfigurationError):
            enc.FineTuneConfig(encoder_id="x", threshold=1.0)
        with pytest.raises(ConfigurationError):
            enc.FineTuneConfig(encoder_id="x", selection_metric="accuracy")


class TestFineTune:
    def test_head_width_matches_schema(self, smoke):
        model, *_ = smoke
        assert model.head.out_features == len(SCHEMA.classes) == 10

    def test_validation_subset_accuracy(self, smoke):
        model, *_ = smoke
        best = model.epoch_log[model.best_epoch]
        assert best["val_subset_accuracy"] >= 0.9

    def test_best_checkpoint_dominates_log(self, smoke):
        model, *_ = smoke
        best_f1 = model.epoch_log[model.best_epoch]["val_macro_f1"]
        assert all(best_f1 >= e["val_macro_f1"] for e in model.epoch_log)

    def test_loss_decreases_early(self, smoke):
        model, *_ = smoke
        losses = [e["train_loss"] for e in model.epoch_log[:3]]
        non_decreases = sum(1 for a, b in zip(losses, losses[1:]) if b >= a)
        assert non_decreases <= 1

    def test_epoch_log_complete(self, smoke):
        model, _, _, _, config = smoke
        assert len(model.epoch_log) == config.epochs
        assert [e["epoch"] for e in model.epoch_log] == list(range(5))

    def test_empty_splits_rejected(self, tiny_encoder):
        config = enc.FineTuneConfig(encoder_id=tiny_encoder, epochs=1)
        cases = make_keyword_corpus(10, seed=0)
        with pytest.raises(TrainingError):
            enc.finetune_encoder([], cases, config)
        with pytest.raises(TrainingError):
            enc.finetune_encoder(cases, [], config)

    def test_unloadable_encoder(self, tmp_path):
        config = enc.FineTuneConfig(encoder_id=str(tmp_path / "none"), epochs=1)
        cases = make_keyword_corpus(10, seed=0)
        with pytest.raises(ConfigurationError):
            enc.finetune_encoder(cases, cases, config)

    def test_seed_reproducibility(self, tiny_encoder):
        cases = make_keyword_corpus(80, seed=3)
        split = corpus.make_splits(cases, "random_60_20_20", seed=3)
        train, val, _ = corpus.split_cases(cases, split)
        config = enc.FineTuneConfig(
            encoder_id=tiny_encoder, batch_size=16, learning_rate=5e-3,
            epochs=2, seed=11)
        texts = [c.normalized_text for c in val]
        a = enc.finetune_encoder(train, val, config)
        b = enc.finetune_encoder(train, val, config)
        pa = enc.predict_probabilities(a, texts).values
        pb = enc.predict_probabilities(b, texts).values
        assert np.allclose(pa, pb, atol=1e-6)


class TestPredict:
    def test_shapes_and_determinism(self, smoke):
        model, _, _, test, _ = smoke
        texts = [c.normalized_text for c in test]
        first = enc.predict_probabilities(model, texts, batch_size=16)
        assert first.shape == (len(test), 10)
        assert first.values.min() >= 0.0 and first.values.max() <= 1.0
        second = enc.predict_probabilities(model, texts, batch_size=64)
        assert np.allclose(first.values, second.values, atol=1e-6)

    def test_empty_input(self, smoke):
        model, *_ = smoke
        probs = enc.predict_probabilities(model, [])
        assert probs.shape == (0, 10)

    def test_random_texts_stay_in_range(self, smoke):
        model, *_ = smoke
        rng = np.random.default_rng(0)
        pool = [t for t in TINY_VOCAB if not t.startswith("[")]
        texts = [" ".join(rng.choice(pool, size=rng.integers(1, 10)))
                 for _ in range(200)]
        probs = enc.predict_probabilities(model, texts, batch_size=50)
        assert probs.values.min() >= 0.0 and probs.values.max() <= 1.0
        assert np.all(np.isfinite(probs.values))

    def test_truncation_warns(self, smoke):
        model, *_ = smoke
        with pytest.warns(UserWarning, match="truncated"):
            enc.predict_probabilities(model, [" ".join(["toxicity"] * 60)])

    def test_throughput_logged(self, smoke, caplog):
        model, _, _, test, _ = smoke
        texts = [c.normalized_text for c in test][:30]
        with caplog.at_level(logging.INFO, logger="odnlp.encoder_finetune"):
            enc.predict_probabilities(model, texts)
        assert any("cases/s" in message for message in caplog.messages)

    def test_smoke_quality_on_test_split(self, smoke):
        model, _, _, test, config = smoke
        from odnlp.eval_metrics import subset_accuracy
        texts = [c.normalized_text for c in test]
        probs = enc.predict_probabilities(model, texts)
        pred = np.stack([v.to_array()
                         for v in enc.threshold_labels(probs, config.threshold)])
        gold = corpus.gold_matrix(test, SCHEMA)
        assert subset_accuracy(pred, gold) >= 0.85


class TestThreshold:
    def test_inclusive_boundary_at_half(self):
        probs = enc.ProbabilityMatrix(np.array([[0.58], [0.5], [0.49]]))
        vectors = enc.threshold_labels(probs, 0.5)
        assert [v.bits[0] for v in vectors] == [1, 1, 0]

    def test_zero_matrix(self):
        probs = enc.ProbabilityMatrix(np.zeros((3, 10)))
        assert all(set(v.bits) == {0} for v in enc.threshold_labels(probs))

    def test_threshold_domain(self):
        probs = enc.ProbabilityMatrix(np.zeros((1, 2)))
        for bad in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(ValidationError):
                enc.threshold_labels(probs, bad)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_in_threshold(self, seed):
        rng = np.random.default_rng(seed)
        probs = enc.ProbabilityMatrix(rng.random((8, 5)))
        low, high = sorted(rng.uniform(0.05, 0.95, size=2))
        if low == high:
            return
        pred_low = np.stack([v.to_array()
                             for v in enc.threshold_labels(probs, low)])
        pred_high = np.stack([v.to_array()
                              for v in enc.threshold_labels(probs, high)])
        assert np.all(pred_high <= pred_low)

    def test_probability_matrix_validation(self):
        with pytest.raises(ValidationError):
            enc.ProbabilityMatrix(np.array([[1.2]]))
        with pytest.raises(ValidationError):
            enc.ProbabilityMatrix(np.array([[np.nan]]))
        with pytest.raises(ValidationError):
            enc.ProbabilityMatrix(np.zeros(4))


class TestRepair:
    def test_parents_forced_on(self):
        pred = np.zeros((2, 10), dtype=np.int64)
        pred[0, SCHEMA.index("fentanyl")] = 1
        repaired = enc.repair_implications(pred, SCHEMA)
        assert repaired[0, SCHEMA.index("any_opioids")] == 1
        assert repaired[0, SCHEMA.index("any_drugs")] == 1
        assert repaired[1].sum() == 0
        # input untouched
        assert pred[0, SCHEMA.index("any_opioids")] == 0

    def test_consistent_input_unchanged(self):
        pred = np.zeros((1, 10), dtype=np.int64)
        for name in ("cocaine", "any_drugs"):
            pred[0, SCHEMA.index(name)] = 1
        assert np.array_equal(enc.repair_implications(pred, SCHEMA), pred)


class TestCheckpoint:
    def test_round_trip(self, smoke, tmp_path):
        model, _, _, test, _ = smoke
        texts = [c.normalized_text for c in test][:20]
        directory = tmp_path / "ckpt"
        enc.save_checkpoint(model, str(directory))
        loaded = enc.load_checkpoint(str(directory))
        assert loaded.classes == model.classes
        assert loaded.best_epoch == model.best_epoch
        assert loaded.config_snapshot == model.config_snapshot
        a = enc.predict_probabilities(model, texts).values
        b = enc.predict_probabilities(loaded, texts).values
        assert np.allclose(a, b, atol=1e-6)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(ConfigurationError):
            enc.load_checkpoint(str(tmp_path / "nope"))
