import numpy as np
import pytest

import tensor as tc
from classifiers import (
    CascadeModel,
    ClassifierModel,
    accuracy,
    build_classifier,
    default_input_shape,
    fit,
    predict,
    train,
)
from data_synth import stack_values
from encoder import random_init
from exceptions import CheckpointError, ShapeError
from models import Architecture, InputMode, LabeledExample, Spectrogram, TrainConfig
from tensor import Tensor


def params_equal(a, b) -> bool:
    return all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


class SignGuesser:
    """Predicts spoof when the mean value is positive."""

    def predict_logits(self, values):
        score = values.reshape(len(values), -1).mean(axis=1)
        return np.stack([-score, score], axis=1)


class CoinFlipper:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def predict_logits(self, values):
        return self.rng.normal(size=(len(values), 2))


def sign_examples(n, flip=False):
    examples = []
    for i in range(n):
        label = i % 2
        value = 1.0 if label else -1.0
        examples.append(LabeledExample(Spectrogram(np.full((4, 3), value)), 1 - label if flip else label))
    return examples


@pytest.mark.parametrize("architecture", list(Architecture))
class TestBuild:
    def test_same_seed_same_init(self, architecture):
        a = build_classifier(architecture, InputMode.RAW, 3, input_shape=(16, 8))
        b = build_classifier(architecture, InputMode.RAW, 3, input_shape=(16, 8))
        c = build_classifier(architecture, InputMode.RAW, 4, input_shape=(16, 8))
        assert params_equal(a, b)
        assert not params_equal(a, c)

    @pytest.mark.parametrize("mode", list(InputMode))
    def test_batch_of_four_gives_two_logits(self, architecture, mode, tiny_encoder_config):
        shape = default_input_shape(mode, tiny_encoder_config, frames=16, bins=8)
        model = build_classifier(architecture, mode, 0, input_shape=shape)
        assert model.predict_logits(np.zeros((4,) + shape)).shape == (4, 2)

    def test_default_shapes(self, architecture):
        assert build_classifier(architecture, "raw-spectrogram", 0).input_shape == (128, 40)
        assert build_classifier(architecture, "encoder-features", 0).input_shape == (64, 64)

    def test_parameter_count(self, architecture):
        model = build_classifier(architecture, InputMode.RAW, 0)
        assert 20_000 <= sum(p.data.size for p in model.parameters()) <= 60_000

    def test_input_too_small_for_pooling(self, architecture):
        with pytest.raises(ShapeError):
            build_classifier(architecture, InputMode.RAW, 0, input_shape=(8, 6))

    def test_input_mismatch(self, architecture):
        model = build_classifier(architecture, InputMode.RAW, 0, input_shape=(16, 8))
        with pytest.raises(ShapeError):
            predict(model, np.zeros((16, 7)))

    @pytest.mark.parametrize("seed", range(20))
    def test_input_gradient_finite_differences(self, architecture, seed):
        model = build_classifier(architecture, InputMode.RAW, seed, input_shape=(8, 8))
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 8, 8))
        labels = np.array([0, 1])

        def loss(values):
            return float(tc.cross_entropy(model.logits(Tensor(values)), labels, reduction="sum").data)

        xt = Tensor(x, requires_grad=True)
        tc.cross_entropy(model.logits(xt), labels, reduction="sum").backward()
        numeric = np.zeros_like(x)
        h = 1e-6  # max-feature-map and pooling kinks
        for idx in np.ndindex(x.shape):
            p, m = x.copy(), x.copy()
            p[idx] += h
            m[idx] -= h
            numeric[idx] = (loss(p) - loss(m)) / (2 * h)
        err = np.linalg.norm(numeric - xt.grad) / max(np.linalg.norm(numeric) + np.linalg.norm(xt.grad), 1e-8)
        assert err < 1e-4


class TestPredictAndAccuracy:
    def test_predict_is_repeatable(self, tiny_splits):
        model = build_classifier("B", InputMode.RAW, 1, input_shape=(16, 8))
        spec = tiny_splits.eval[0].spec
        (l1, c1), (l2, c2) = predict(model, spec), predict(model, spec)
        assert np.array_equal(l1, l2) and c1 == c2

    def test_all_correct(self):
        assert accuracy(SignGuesser(), sign_examples(10)) == 1.0

    def test_flipped_labels_complement(self):
        examples = sign_examples(10)
        examples[0] = LabeledExample(examples[0].spec, 1)
        flipped = [LabeledExample(ex.spec, 1 - ex.label) for ex in examples]
        assert accuracy(SignGuesser(), flipped) == pytest.approx(1 - accuracy(SignGuesser(), examples))

    def test_random_guesser(self):
        assert abs(accuracy(CoinFlipper(0), sign_examples(1000)) - 0.5) <= 0.05

    def test_empty(self):
        with pytest.raises(ValueError):
            accuracy(SignGuesser(), [])


class TestTraining:
    def test_zero_epochs_unchanged(self, tiny_splits):
        model = build_classifier("A", InputMode.RAW, 2, input_shape=(16, 8))
        reference = build_classifier("A", InputMode.RAW, 2, input_shape=(16, 8))
        _, history = train(model, tiny_splits.train, TrainConfig(epochs=0))
        assert history == []
        assert params_equal(model, reference)

    def test_empty_corpus(self):
        model = build_classifier("A", InputMode.RAW, 2, input_shape=(16, 8))
        with pytest.raises(ValueError):
            train(model, [], TrainConfig(epochs=1))

    def test_bitwise_deterministic(self, tiny_splits, quick_train):
        a = build_classifier("B", InputMode.RAW, 2, input_shape=(16, 8))
        b = build_classifier("B", InputMode.RAW, 2, input_shape=(16, 8))
        _, ha = train(a, tiny_splits.train, quick_train, dev=tiny_splits.dev)
        _, hb = train(b, tiny_splits.train, quick_train, dev=tiny_splits.dev)
        assert ha == hb
        assert params_equal(a, b)
        assert set(ha[0]) == {"epoch", "train_loss", "dev_accuracy"}

    def test_training_leaves_model_frozen(self, tiny_splits, quick_train):
        model = build_classifier("A", InputMode.RAW, 2, input_shape=(16, 8))
        train(model, tiny_splits.train, quick_train)
        assert not any(p.requires_grad for p in model.parameters())

    def test_cascade_trains_encoder_and_classifier(self, tiny_splits, tiny_encoder_config, quick_train):
        encoder = random_init(tiny_encoder_config, 0)
        before = {k: p.data.copy() for k, p in encoder.params.items()}
        classifier = build_classifier("A", InputMode.ENCODER_FEATURES, 1,
                                      input_shape=default_input_shape(InputMode.ENCODER_FEATURES,
                                                                      tiny_encoder_config, frames=16, bins=8))
        cascade = CascadeModel(encoder, classifier)
        values, labels = stack_values(tiny_splits.train)
        fit(cascade, values, labels, quick_train)
        assert any(not np.array_equal(before[k], p.data) for k, p in encoder.params.items())
        assert cascade.predict_logits(values[:3]).shape == (3, 2)

    def test_cascade_leaves_reconstruction_head_alone(self, tiny_splits, tiny_encoder_config, quick_train):
        encoder = random_init(tiny_encoder_config, 3)
        head_before = {k: p.data.copy() for k, p in encoder.params.items() if k.startswith("head.")}
        classifier = build_classifier("B", InputMode.ENCODER_FEATURES, 4, input_shape=(8, 8))
        cascade = CascadeModel(encoder, classifier)
        assert not any(p is encoder.params[k] for k in head_before for p in cascade.parameters())
        values, labels = stack_values(tiny_splits.train[:8])
        history = fit(cascade, values, labels, quick_train)
        assert len(history) == quick_train.epochs
        assert all(np.array_equal(head_before[k], encoder.params[k].data) for k in head_before)
        assert not any(p.requires_grad for p in encoder.parameters())

    def test_cascade_requires_features_classifier(self, tiny_encoder_config):
        raw = build_classifier("A", InputMode.RAW, 1, input_shape=(16, 8))
        with pytest.raises(CheckpointError):
            CascadeModel(random_init(tiny_encoder_config, 0), raw)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = build_classifier("B", InputMode.RAW, 6, input_shape=(16, 8))
        model.model_id = "B/Mel"
        model.save(tmp_path / "b.npz")
        loaded = ClassifierModel.load(tmp_path / "b.npz", input_mode=InputMode.RAW, architecture=Architecture.B)
        assert params_equal(model, loaded)
        assert loaded.model_id == "B/Mel" and loaded.input_shape == (16, 8)

    def test_role_mismatch(self, tmp_path):
        build_classifier("B", InputMode.RAW, 6, input_shape=(16, 8)).save(tmp_path / "b.npz")
        with pytest.raises(CheckpointError, match="expected encoder-features"):
            ClassifierModel.load(tmp_path / "b.npz", input_mode=InputMode.ENCODER_FEATURES)
        with pytest.raises(CheckpointError, match="expected A"):
            ClassifierModel.load(tmp_path / "b.npz", architecture=Architecture.A)

    def test_wrong_kind(self, tmp_path, tiny_encoder_config):
        random_init(tiny_encoder_config, 0).save(tmp_path / "enc.npz")
        with pytest.raises(CheckpointError, match="not a classifier"):
            ClassifierModel.load(tmp_path / "enc.npz")
