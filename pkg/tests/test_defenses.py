import hashlib

import numpy as np
import pytest

from classifiers import build_classifier
from defenses import (
    ARM_NAMES,
    FILTER_ARMS,
    Defender,
    apply_filter,
    build_defender_suite,
    defend_predict,
    gaussian_kernel,
    load_suite,
    rand_encoder,
    save_suite_manifest,
    train_arm,
)
from encoder import EncoderModel, random_init
from exceptions import CheckpointError, ContractError, ShapeError
from models import Architecture, FilterConfig, FilterKind, FrontEndKind, InputMode, Spectrogram, TrainConfig

IMPULSE = np.array([[0.0, 0.0, 0.0], [0.0, 9.0, 0.0], [0.0, 0.0, 0.0]])


def parameter_digest(model) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(model.params[name].data.tobytes())
    return h.hexdigest()


class TestFilters:
    @pytest.mark.parametrize("kind", list(FilterKind))
    def test_constant_is_fixed_point(self, kind):
        spec = Spectrogram(np.full((6, 5), 2.5))
        out = apply_filter(spec, FilterConfig(kind, 3))
        assert isinstance(out, Spectrogram)
        assert np.allclose(out.values, 2.5, atol=1e-12)

    def test_value_range_preserved(self):
        spec = Spectrogram(np.zeros((6, 5)), (0.0, 1.0))
        assert apply_filter(spec, FilterConfig(FilterKind.MEDIAN, 3)).value_range == (0.0, 1.0)

    def test_median_removes_impulse(self):
        assert apply_filter(IMPULSE, FilterConfig(FilterKind.MEDIAN, 3))[1, 1] == 0.0

    def test_mean_spreads_impulse(self):
        assert apply_filter(IMPULSE, FilterConfig(FilterKind.MEAN, 3))[1, 1] == pytest.approx(1.0)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            apply_filter(np.zeros((4, 2)), FilterConfig(FilterKind.MEAN, 3))

    def test_gaussian_kernel_normalized(self):
        assert abs(gaussian_kernel(3, 1.0).sum() - 1.0) <= 1e-12
        assert abs(gaussian_kernel(5, 0.7).sum() - 1.0) <= 1e-12

    def test_mean_is_wide_gaussian_limit(self, rng):
        x = rng.normal(size=(7, 6))
        wide = apply_filter(x, FilterConfig(FilterKind.GAUSSIAN, 3, sigma=1e6))
        mean = apply_filter(x, FilterConfig(FilterKind.MEAN, 3))
        assert np.allclose(wide, mean, atol=1e-6)

    @pytest.mark.parametrize("kind", list(FilterKind))
    def test_shift_equivariant_in_interior(self, kind):
        config = FilterConfig(kind, 3)
        impulse = np.zeros((12, 12))
        impulse[4, 4] = 5.0
        shifted = np.roll(impulse, (2, 3), axis=(0, 1))
        a = np.roll(apply_filter(impulse, config), (2, 3), axis=(0, 1))
        b = apply_filter(shifted, config)
        assert np.allclose(a[2:-2, 3:-2], b[2:-2, 3:-2])

    def test_invalid_kernel(self):
        with pytest.raises(ValueError):
            FilterConfig(FilterKind.MEDIAN, 4)


class TestDefender:
    def test_front_end_must_match_classifier(self, tiny_encoder_config):
        raw = build_classifier("A", InputMode.RAW, 0, input_shape=(16, 8))
        features = build_classifier("A", InputMode.ENCODER_FEATURES, 0, input_shape=(8, 8))
        encoder = random_init(tiny_encoder_config, 0)
        with pytest.raises(ContractError):
            Defender("bad", FrontEndKind.ENCODER, raw, encoder=encoder)
        with pytest.raises(ContractError):
            Defender("bad", FrontEndKind.IDENTITY, features)
        with pytest.raises(ContractError):
            Defender("bad", FrontEndKind.FILTER, raw)

    def test_filter_defender_classifies_filtered_input(self, tiny_splits):
        raw = build_classifier("B", InputMode.RAW, 0, input_shape=(16, 8))
        config = FilterConfig(FilterKind.MEDIAN, 3)
        defender = Defender("median", FrontEndKind.FILTER, raw, filter_config=config)
        spec = tiny_splits.eval[0].spec
        logits, _ = defend_predict(defender, spec)
        assert np.allclose(logits, raw.predict_logits(apply_filter(spec.values, config)[None])[0])

    def test_predict_is_pure(self, tiny_splits, tiny_encoder_config):
        encoder = random_init(tiny_encoder_config, 0)
        classifier = build_classifier("A", InputMode.ENCODER_FEATURES, 0, input_shape=(8, 8))
        defender = Defender("Mock", FrontEndKind.ENCODER, classifier, encoder=encoder)
        before = (parameter_digest(encoder), parameter_digest(classifier))
        spec = tiny_splits.eval[2].spec
        (l1, c1), (l2, c2) = defend_predict(defender, spec), defend_predict(defender, spec)
        assert np.array_equal(l1, l2) and c1 == c2
        assert (parameter_digest(encoder), parameter_digest(classifier)) == before


    def test_batch_predict_matches_single(self, tiny_splits):
        raw = build_classifier("A", InputMode.RAW, 0, input_shape=(16, 8))
        defender = Defender("mean", FrontEndKind.FILTER, raw, filter_config=FilterConfig(FilterKind.MEAN, 3))
        batch = np.stack([ex.spec.values for ex in tiny_splits.eval[:3]])
        logits, classes = defend_predict(defender, batch)
        assert logits.shape == (3, 2) and classes.shape == (3,)
        for i, ex in enumerate(tiny_splits.eval[:3]):
            single, label = defend_predict(defender, ex.spec)
            assert np.allclose(single, logits[i]) and label == classes[i]


class TestSuite:
    @pytest.fixture
    def suite_inputs(self, tmp_path, tiny_splits, tiny_encoder_config):
        encoder = random_init(tiny_encoder_config, 21)
        path = tmp_path / "pretrained.npz"
        encoder.save(path)
        return path, encoder

    def test_seven_arms_with_sharing(self, suite_inputs, tiny_splits, quick_train):
        path, pretrained = suite_inputs
        digest = parameter_digest(pretrained)
        suite = build_defender_suite(tiny_splits.train, tiny_splits.dev, path, Architecture.B,
                                     quick_train, TrainConfig(epochs=2, batch_size=4, seed=1), seed=0)
        assert sorted(suite) == sorted(ARM_NAMES)
        assert all(suite[f].classifier is suite["Mel"].classifier for f in FILTER_ARMS)
        mock, rand = suite["Mock"], suite["rand"]
        assert {k: p.shape for k, p in mock.encoder.params.items()} == \
               {k: p.shape for k, p in rand.encoder.params.items()}
        assert parameter_digest(mock.encoder) != parameter_digest(rand.encoder)
        assert parameter_digest(mock.encoder) == digest
        assert all(d.architecture is Architecture.B for d in suite.values())

    def test_missing_checkpoint(self, tmp_path, tiny_splits, quick_train):
        with pytest.raises(CheckpointError):
            build_defender_suite(tiny_splits.train, None, tmp_path / "absent.npz", Architecture.A,
                                 quick_train, quick_train, seed=0)

    def test_manifest_roundtrip(self, tmp_path, tiny_encoder_config):
        mel = build_classifier("A", InputMode.RAW, 0, input_shape=(16, 8))
        mock = build_classifier("A", InputMode.ENCODER_FEATURES, 1, input_shape=(8, 8))
        mel.save(tmp_path / "classifiers" / "A_Mel.npz")
        mock.save(tmp_path / "classifiers" / "A_Mock.npz")
        random_init(tiny_encoder_config, 0).save(tmp_path / "encoders" / "pretrained.npz")
        entries = {
            "Mel": {"front_end": "identity", "classifier_checkpoint": "classifiers/A_Mel.npz"},
            "mean": {"front_end": "filter", "classifier_checkpoint": "classifiers/A_Mel.npz",
                     "filter": {"kind": "mean", "kernel_size": 3, "sigma": 1.0}},
            "Mock": {"front_end": "encoder", "classifier_checkpoint": "classifiers/A_Mock.npz",
                     "encoder_checkpoint": "encoders/pretrained.npz"},
        }
        save_suite_manifest(tmp_path / "defenders_A.json", entries)
        suite = load_suite(tmp_path / "defenders_A.json")
        assert suite["mean"].classifier is suite["Mel"].classifier
        assert suite["mean"].filter_config.kind is FilterKind.MEAN
        assert isinstance(suite["Mock"].encoder, EncoderModel)
        assert suite["Mock"].front_end is FrontEndKind.ENCODER

    def test_suite_matches_per_arm_training(self, suite_inputs, tiny_splits, tiny_encoder_config, quick_train):
        path, pretrained = suite_inputs
        suite = build_defender_suite(tiny_splits.train, tiny_splits.dev, path, Architecture.A,
                                     quick_train, quick_train, seed=4)
        _, mel = train_arm("mel", Architecture.A, tiny_splits.train, tiny_splits.dev, quick_train, 4)
        encoder, rand = train_arm("rand", Architecture.A, tiny_splits.train, tiny_splits.dev, quick_train, 4,
                                  encoder=rand_encoder(tiny_encoder_config, 4))
        assert parameter_digest(mel) == parameter_digest(suite["Mel"].classifier)
        assert parameter_digest(rand) == parameter_digest(suite["rand"].classifier)
        assert parameter_digest(encoder) == parameter_digest(suite["rand"].encoder)

    def test_train_arm_inputs(self, tiny_splits, quick_train):
        with pytest.raises(ContractError, match="needs an encoder"):
            train_arm("mock", Architecture.A, tiny_splits.train, None, quick_train, 0)
        with pytest.raises(ContractError, match="encoder config"):
            train_arm("scratch", Architecture.A, tiny_splits.train, None, quick_train, 0)
        with pytest.raises(ContractError, match="unknown arm"):
            train_arm("median", Architecture.A, tiny_splits.train, None, quick_train, 0)
