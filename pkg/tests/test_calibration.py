"""
Regression bounds measured on the default corpus. These train full-size
models and are skipped unless pytest runs with --runslow.
"""

import csv
import json

import numpy as np
import pytest

import tensor as tc
from attacks import attack_corpus, build_attack_config, per_example_loss
from classifiers import accuracy, accuracy_on_arrays
from config import experiment_config_from_dict
from data_synth import generate_labeled_corpus, generate_unlabeled_corpus, stack_values
from defenses import FILTER_ARMS, apply_filter, train_raw_classifier
from diagnostics import read_curves_csv
from encoder import pretrain, random_init, reconstruction_error
from harness import ExperimentRunner
from models import Architecture, CorpusSpec, FilterConfig, FilterKind, LabeledExample, TrainConfig
from tensor import Tensor

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def default_splits():
    return generate_labeled_corpus(CorpusSpec())


@pytest.fixture(scope="module")
def classifier_a(default_splits):
    return train_raw_classifier(Architecture.A, default_splits.train, default_splits.dev, TrainConfig(epochs=15))


@pytest.fixture(scope="module")
def classifier_b(default_splits):
    return train_raw_classifier(Architecture.B, default_splits.train, default_splits.dev,
                                TrainConfig(epochs=15, seed=1))


@pytest.fixture(scope="module")
def pretrained_run(default_splits):
    """The default pre-training run: (held-out error at init, after pre-training)."""
    config = experiment_config_from_dict({})
    corpus = generate_unlabeled_corpus(config.unlabeled_count, seed=0)
    held_out = [ex.spec for ex in default_splits.dev]
    model = random_init(config.encoder, 0)
    before = reconstruction_error(model, held_out, config.masking, seed=1)
    model, _ = pretrain(model, corpus, config.masking, config.pretrain)
    return before, reconstruction_error(model, held_out, config.masking, seed=1)


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("default")
    ExperimentRunner(experiment_config_from_dict({}), out).run_all()
    return out


def test_classifier_a_accuracy(classifier_a, default_splits):
    assert accuracy(classifier_a, default_splits.eval) >= 0.95


def test_classifier_b_accuracy(classifier_a, classifier_b, default_splits):
    acc_b = accuracy(classifier_b, default_splits.eval)
    assert acc_b >= 0.95
    assert abs(accuracy(classifier_a, default_splits.eval) - acc_b) <= 0.05


def test_softmax_rows_sum_to_one(classifier_b, default_splits):
    values, _ = stack_values(default_splits.eval)
    logits = classifier_b.predict_logits(values)
    probs = tc.softmax(Tensor(np.concatenate([logits, 50.0 * logits])), axis=1).data
    assert np.all(probs >= 0)
    assert np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-9)


def test_unlabeled_magnitude():
    values, _ = stack_values(generate_unlabeled_corpus(500, seed=0))
    assert 0.1 <= np.mean(np.abs(values)) <= 10


def test_zero_separation_is_chance():
    splits = generate_labeled_corpus(CorpusSpec(class_separation=0.0, n_train=500, n_eval=1000))
    model = train_raw_classifier(Architecture.A, splits.train, None, TrainConfig(epochs=5))
    assert abs(accuracy(model, splits.eval) - 0.5) <= 0.05


def test_pretraining_loss_decreases():
    config = experiment_config_from_dict({})
    corpus = generate_unlabeled_corpus(500, seed=2)
    _, history = pretrain(random_init(config.encoder, 2), corpus, config.masking, config.pretrain)
    assert len(history) == 10
    assert np.mean(history[-3:]) < np.mean(history[:3])
    assert history[-1] < history[0]


def test_pretraining_beats_random_init_on_held_out(pretrained_run):
    before, after = pretrained_run
    assert after <= 0.8 * before


@pytest.mark.parametrize("kind", FILTER_ARMS)
def test_filters_cost_little_clean_accuracy(classifier_b, default_splits, kind):
    config = FilterConfig(FilterKind(kind), 3, 1.0)
    filtered = [LabeledExample(apply_filter(ex.spec, config), ex.label) for ex in default_splits.eval]
    assert accuracy(classifier_b, filtered) >= accuracy(classifier_b, default_splits.eval) - 0.05


def test_pgd_beats_fgsm(classifier_a, default_splits):
    eval_set = default_splits.eval
    labels = np.array([ex.label for ex in eval_set])
    fgsm_pairs = attack_corpus(classifier_a, eval_set, build_attack_config("fgsm", 4.0))
    pgd_pairs = attack_corpus(classifier_a, eval_set, build_attack_config("pgd", 4.0, pgd_steps=10, seed=1))
    fgsm_loss = per_example_loss(classifier_a, np.stack([p.adversarial for p in fgsm_pairs]), labels)
    pgd_loss = per_example_loss(classifier_a, np.stack([p.adversarial for p in pgd_pairs]), labels)
    assert np.mean(pgd_loss > fgsm_loss) >= 0.80


def test_white_box_collapse(classifier_a, default_splits):
    eval_set = default_splits.eval
    labels = np.array([ex.label for ex in eval_set])
    pairs = attack_corpus(classifier_a, eval_set, build_attack_config("pgd", 8.0, pgd_steps=10, seed=2))
    assert accuracy_on_arrays(classifier_a, np.stack([p.adversarial for p in pairs]), labels) <= 0.10


def test_white_box_threat_is_monotone(classifier_a, default_splits):
    eval_set = default_splits.eval
    labels = np.array([ex.label for ex in eval_set])
    accuracies = [accuracy(classifier_a, eval_set)]
    for eps in (0.1, 1.0, 2.0, 4.0, 8.0, 16.0):
        pairs = attack_corpus(classifier_a, eval_set, build_attack_config("pgd", eps, seed=3))
        accuracies.append(accuracy_on_arrays(classifier_a, np.stack([p.adversarial for p in pairs]), labels))
    assert all(b <= a + 0.03 for a, b in zip(accuracies, accuracies[1:]))


class TestDefaultRun:
    def test_curve_grid(self, default_run):
        curves = read_curves_csv(default_run / "curves.csv")
        assert len(curves) == 7 * 2 * 7 * 2

    @pytest.mark.parametrize("target", ["A", "B"])
    def test_mel_arm_falls_under_transfer_pgd(self, default_run, target):
        acc = {float(row["epsilon"]): float(row["accuracy"])
               for row in read_curves_csv(default_run / "curves.csv")
               if row["defender"] == f"{target}-Mel" and row["algorithm"] == "pgd"}
        assert acc[8.0] < acc[0.0] - 0.3

    def test_mock_arm_ordering(self, default_run):
        summary = json.loads((default_run / "summary.json").read_text())
        assert summary["ordering_total"] == 12
        assert summary["ordering_held"] >= 10

    def test_pretraining_matters(self, default_run):
        summary = json.loads((default_run / "summary.json").read_text())
        assert {row["target"] for row in summary["pretraining"]} == {"A", "B"}
        for row in summary["pretraining"]:
            assert row["rand_gap_holds"] and row["scratch_holds"]

    @pytest.mark.parametrize("eps", [8.0, 16.0])
    def test_lnsr_attenuates_with_depth(self, default_run, eps):
        with open(default_run / "lnsr.csv", newline="") as f:
            rows = [row for row in csv.DictReader(f) if float(row["epsilon"]) == eps]
        by_arm = {arm: [float(r["lnsr_mean"]) for r in sorted((r for r in rows if r["arm"] == arm),
                                                             key=lambda r: int(r["layer"]))]
                  for arm in ("mock", "rand")}
        mock = by_arm["mock"]
        assert mock[-1] < mock[1]
        assert all(b <= 1.1 * a for a, b in zip(mock[1:], mock[2:]))
        assert by_arm["rand"][-1] > mock[-1]
