"""
L-infinity bounded FGSM and PGD attacks in spectrogram space.

The objective is the cross-entropy against the true label (untargeted).
Perturbations are tracked as delta, which is authoritative: the adversarial
spectrogram is always original + delta, and delta is clamped to [-eps, eps].
There is no clipping to the data range.
"""

import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

import tensor as tc
from config import Config
from exceptions import AttackError, CorpusFormatError, LabError
from models import AdversarialPair, AttackAlgorithm, AttackConfig, LabeledExample
from tensor import Tensor
from utils import ensure_finite, parallel_map

logger = logging.getLogger(__name__)


def _require_raw_input(model) -> None:
    if not getattr(model, "accepts_raw_input", False):
        raise AttackError(f"model {getattr(model, 'model_id', model)!r} has no raw-spectrogram input path; "
                          f"attacks perturb input spectrograms")


def input_gradient(model, values: np.ndarray, labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-example cross-entropy and its gradient with respect to the input.

    Args:
        model: Raw-input model exposing logits(Tensor)
        values: (N, T, F) spectrograms
        labels: (N,) true classes

    Returns:
        (losses of shape (N,), gradient of shape (N, T, F))
    """
    x = Tensor(values, requires_grad=True)
    losses = tc.cross_entropy(model.logits(x), np.asarray(labels, dtype=np.int64), reduction="none")
    tc.sum_(losses).backward()
    return losses.data, ensure_finite(x.grad, "input gradient")


def per_example_loss(model, values: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Cross-entropy of each example without building a tape."""
    return tc.cross_entropy(model.logits(Tensor(values)), np.asarray(labels, dtype=np.int64),
                            reduction="none").data


def project(original: np.ndarray, candidate: np.ndarray, epsilon: float) -> np.ndarray:
    """Elementwise clamp of candidate to [original - eps, original + eps]."""
    return np.clip(candidate, original - epsilon, original + epsilon)


def fgsm(model, example: LabeledExample, epsilon: float, source_model_id: Optional[str] = None,
         index: int = 0) -> AdversarialPair:
    """
    Fast gradient-sign attack: delta = eps * sign(grad_x CE(f(x), y)), sign(0) = 0.

    Args:
        model: Raw-input model
        example: Clean labeled spectrogram
        epsilon: L-infinity budget

    Returns:
        The adversarial pair
    """
    _require_raw_input(model)
    if epsilon < 0:
        raise AttackError(f"epsilon must be >= 0, got {epsilon}")
    x = example.spec.values
    if epsilon == 0:
        delta = np.zeros_like(x)
    else:
        _, grad = input_gradient(model, x[None], [example.label])
        delta = epsilon * np.sign(grad[0])
    return AdversarialPair(x, delta, example.label, source_model_id or model.model_id,
                           float(epsilon), AttackAlgorithm.FGSM.value, index)


def pgd(model, example: LabeledExample, config: AttackConfig, source_model_id: Optional[str] = None,
        index: int = 0) -> AdversarialPair:
    """
    Projected gradient-sign ascent inside the L-infinity ball.

    Starts from a uniform random point in the ball when random_start is set;
    the start is drawn from a generator seeded by (config.seed, index).

    Args:
        model: Raw-input model
        example: Clean labeled spectrogram
        config: Epsilon, steps, step size, random start, seed
        index: Position of the example in its corpus

    Returns:
        The adversarial pair
    """
    _require_raw_input(model)
    x = example.spec.values
    eps = config.epsilon
    if eps == 0:
        delta = np.zeros_like(x)
    else:
        if config.random_start:
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
            delta = rng.uniform(-eps, eps, size=x.shape)
        else:
            delta = np.zeros_like(x)
        for _ in range(config.steps):
            _, grad = input_gradient(model, (x + delta)[None], [example.label])
            delta = np.clip(delta + config.alpha * np.sign(grad[0]), -eps, eps)
    return AdversarialPair(x, delta, example.label, source_model_id or model.model_id,
                           float(eps), AttackAlgorithm.PGD.value, index)


def attack_example(model, example: LabeledExample, config: AttackConfig,
                   source_model_id: Optional[str] = None, index: int = 0) -> AdversarialPair:
    if config.algorithm is AttackAlgorithm.FGSM:
        return fgsm(model, example, config.epsilon, source_model_id, index)
    return pgd(model, example, config, source_model_id, index)


def attack_corpus(model, examples: Sequence[LabeledExample], config: AttackConfig,
                  source_model_id: Optional[str] = None, threads: Optional[int] = None) -> List[AdversarialPair]:
    """
    Attack every example independently, preserving order.

    Each example gets its own graph and its own (seed, index) stream, so the
    threaded run is identical to the sequential one.

    Args:
        model: Raw-input attacking model
        examples: Non-empty labeled examples
        config: Attack settings
        source_model_id: Recorded in each pair
        threads: Worker count; defaults to LAB_THREADS

    Returns:
        One pair per example
    """
    _require_raw_input(model)
    if not examples:
        raise AttackError("attack_corpus needs at least one example")
    threads = Config.THREADS if threads is None else threads

    def run(item):
        index, example = item
        try:
            return attack_example(model, example, config, source_model_id, index)
        except LabError as e:
            raise AttackError(f"example {index}: {e}") from e

    pairs = parallel_map(run, enumerate(examples), threads)
    logger.info(f"Generated {len(pairs)} {config.summary()} pairs against "
                f"{source_model_id or model.model_id}")
    return pairs


def attack_success_rate(model, pairs: Sequence[AdversarialPair]) -> float:
    """Fraction of pairs whose predicted class differs between original and adversarial."""
    if not pairs:
        raise ValueError("no pairs")
    clean = np.argmax(model.predict_logits(np.stack([p.original for p in pairs])), axis=1)
    adv = np.argmax(model.predict_logits(np.stack([p.adversarial for p in pairs])), axis=1)
    return float(np.mean(clean != adv))


def save_pairs(pairs: Iterable[AdversarialPair], path: Path) -> None:
    """One JSON record per line; the adversarial input is rebuilt on load."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for pair in pairs:
            f.write(json.dumps(pair.to_record()) + "\n")


def _matrix(record, key: str, lineno: int) -> np.ndarray:
    try:
        block = record[key]
        values = np.asarray(block["values"], dtype=np.float64)
        return values.reshape(tuple(block["shape"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusFormatError(f"bad '{key}' block ({e})", lineno) from None


def load_pairs(path: Path) -> List[AdversarialPair]:
    """Read a pair file written by save_pairs."""
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"invalid JSON ({e.msg})", lineno) from None
            original = _matrix(record, "original", lineno)
            delta = _matrix(record, "delta", lineno)
            if original.shape != delta.shape:
                raise CorpusFormatError(f"original {original.shape} and delta {delta.shape} differ", lineno)
            try:
                pairs.append(AdversarialPair(original, delta, int(record["label"]), record["source-model-id"],
                                             float(record["epsilon"]), record["algorithm"], int(record["index"])))
            except KeyError as e:
                raise CorpusFormatError(f"missing field {e}", lineno) from None
    return pairs


def build_attack_config(algorithm, epsilon: float, pgd_steps: int = 10, pgd_step_size: Optional[float] = None,
                        random_start: bool = True, seed: int = 0) -> AttackConfig:
    """AttackConfig for one sweep cell; FGSM ignores the PGD-only settings."""
    algorithm = AttackAlgorithm(algorithm)
    if algorithm is AttackAlgorithm.FGSM:
        return AttackConfig(algorithm, float(epsilon), steps=1, random_start=False, seed=seed)
    return AttackConfig(algorithm, float(epsilon), steps=pgd_steps, step_size=pgd_step_size,
                        random_start=random_start, seed=seed)
