"""
Layerwise noise-to-signal ratios and accuracy-versus-epsilon sweeps.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from attacks import attack_corpus, build_attack_config
from classifiers import ClassifierModel
from config import Config
from data_synth import stack_values
from defenses import FILTER_ARMS, Defender, defend_predict
from encoder import EncoderModel
from exceptions import ContractError, DegenerateSignalError
from models import AdversarialPair, AttackAlgorithm, LabeledExample, LnsrReport, RobustnessCurve
from utils import parallel_map

logger = logging.getLogger(__name__)

LNSR_HEADER = ("layer", "arm", "epsilon", "lnsr_sum", "lnsr_mean", "n")
CURVES_HEADER = ("defender", "algorithm", "epsilon", "accuracy", "n_examples")

PairProvider = Callable[[AttackAlgorithm, float], List[AdversarialPair]]


def _pair_ratios(encoder: EncoderModel, index: int, pair: AdversarialPair) -> List[float]:
    clean = encoder.encode(pair.original)
    noisy = encoder.encode(pair.adversarial)
    ratios = []
    for layer, (h, h_adv) in enumerate(zip(clean, noisy)):
        signal = np.linalg.norm(h.ravel())
        if signal == 0:
            raise DegenerateSignalError(index, layer)
        ratios.append(float(np.linalg.norm((h_adv - h).ravel()) / signal))
    return ratios


def lnsr(encoder: EncoderModel, pairs: Sequence[AdversarialPair], model_id: str = "encoder",
         threads: Optional[int] = None) -> LnsrReport:
    """
    LNSR_i = sum_n ||h_adv_i^n - h_i^n||_2 / ||h_i^n||_2 for i = 0..K.

    Norms run over the flattened per-utterance layer output; layer 0 is the
    stacked-frame input itself. The sum is exactly rounded (math.fsum), so the
    result does not depend on pair order.

    Args:
        encoder: Encoder whose layers are measured
        pairs: At least one adversarial pair
        model_id: Label for the report

    Returns:
        The per-layer sums over all pairs

    Raises:
        DegenerateSignalError: If a clean activation has zero norm
    """
    if not pairs:
        raise ValueError("lnsr needs at least one pair")
    threads = Config.THREADS if threads is None else threads
    per_pair = parallel_map(lambda item: _pair_ratios(encoder, *item), list(enumerate(pairs)), threads)
    values = [math.fsum(column) for column in zip(*per_pair)]
    summary = f"{pairs[0].algorithm}(eps={pairs[0].epsilon:g})"
    return LnsrReport(model_id, summary, values, len(pairs))


def lnsr_comparison(pretrained: EncoderModel, random_encoder: EncoderModel,
                    pairs_by_eps: Mapping[float, Sequence[AdversarialPair]]) -> List[Dict[str, object]]:
    """
    LNSR of the pretrained ("mock") and random ("rand") encoders on shared pairs.

    Args:
        pretrained: Pre-trained encoder
        random_encoder: Randomly initialized encoder of the same config
        pairs_by_eps: Adversarial pairs per epsilon

    Returns:
        Rows with the lnsr.csv columns, ordered by epsilon, arm, layer
    """
    if pretrained.config.shape_signature() != random_encoder.config.shape_signature():
        raise ContractError("pretrained and random encoders have different configs")
    rows = []
    for eps in sorted(pairs_by_eps):
        for arm, encoder in (("mock", pretrained), ("rand", random_encoder)):
            report = lnsr(encoder, pairs_by_eps[eps], model_id=arm)
            for layer, (total, avg) in enumerate(zip(report.values, report.means)):
                rows.append({"layer": layer, "arm": arm, "epsilon": eps,
                             "lnsr_sum": total, "lnsr_mean": avg, "n": report.n_pairs})
            logger.info(f"LNSR {arm} eps={eps:g}: " + ", ".join(f"{v:.3f}" for v in report.means))
    return rows


def _check_black_box(defenders: Mapping[str, Defender], attacking_model: ClassifierModel) -> None:
    for name, defender in defenders.items():
        if defender.classifier is attacking_model or defender.architecture is attacking_model.architecture:
            raise ContractError(f"defender {name} shares architecture {attacking_model.architecture.value} "
                                f"with the attacking model; the sweep evaluates transfer attacks only")


def robustness_sweep(defenders: Mapping[str, Defender], attacking_model: ClassifierModel,
                     eval_examples: Sequence[LabeledExample], algorithms: Sequence[AttackAlgorithm],
                     epsilons: Sequence[float], pair_provider: Optional[PairProvider] = None,
                     attack_seed: int = 0, pgd_steps: int = 10, pgd_step_size: Optional[float] = None,
                     random_start: bool = True, name_prefix: str = "") -> List[RobustnessCurve]:
    """
    Evaluate every defender on one shared adversarial set per (algorithm, epsilon).

    Args:
        defenders: Name to defender; none may share the attacking model's architecture
        attacking_model: Raw-input classifier crafting the transfer attacks
        eval_examples: Clean labeled evaluation examples
        algorithms: Attack families
        epsilons: Positive, increasing budgets; the clean point eps=0 is added
        pair_provider: Supplies precomputed pairs; attacks are generated when None
        name_prefix: Prepended to defender names in the curves

    Returns:
        One curve per (defender, algorithm), all on the same grid

    Raises:
        ContractError: On a white-box configuration
    """
    _check_black_box(defenders, attacking_model)
    values, labels = stack_values(eval_examples)
    names = list(defenders)

    def accuracies(inputs: np.ndarray) -> List[float]:
        def score(name: str) -> float:
            _, predicted = defend_predict(defenders[name], inputs)
            return float(np.mean(predicted == labels))

        return parallel_map(score, names, Config.THREADS)

    clean = dict(zip(names, accuracies(values)))
    curves = []
    for algorithm in algorithms:
        algorithm = AttackAlgorithm(algorithm)
        points = {name: [(0.0, clean[name])] for name in names}
        for eps in epsilons:
            if pair_provider is not None:
                pairs = pair_provider(algorithm, eps)
            else:
                config = build_attack_config(algorithm, eps, pgd_steps, pgd_step_size, random_start, attack_seed)
                pairs = attack_corpus(attacking_model, eval_examples, config)
            adversarial = np.stack([p.adversarial for p in pairs])
            for name, acc in zip(names, accuracies(adversarial)):
                points[name].append((float(eps), acc))
            logger.info(f"{name_prefix}{algorithm.value} eps={eps:g}: " +
                        ", ".join(f"{n}={points[n][-1][1]:.3f}" for n in names))
        for name in names:
            curves.append(RobustnessCurve(f"{name_prefix}{name}", algorithm.value, points[name], len(labels)))
    return curves


def write_curves_csv(curves: Sequence[RobustnessCurve], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CURVES_HEADER)
        for curve in curves:
            for eps, acc in curve.points:
                writer.writerow([curve.defender, curve.algorithm, f"{eps:g}", repr(acc), curve.n_examples])


def write_lnsr_csv(rows: Sequence[Dict[str, object]], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LNSR_HEADER)
        for row in rows:
            writer.writerow([row["layer"], row["arm"], f"{row['epsilon']:g}",
                             repr(row["lnsr_sum"]), repr(row["lnsr_mean"]), row["n"]])


def read_curves_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def defense_report(curves: Sequence[RobustnessCurve], targets: Sequence[str],
                   epsilons: Sequence[float] = (4.0, 8.0, 16.0), margin: float = 0.10) -> Dict[str, object]:
    """
    Summarize the qualitative claims on a finished sweep.

    Curves are named "<target>-<arm>". For each (target, algorithm, epsilon)
    cell, checks Mock >= every filter arm and Mock >= Mel + margin; at the
    largest epsilon under PGD compares Mock with rand and scratch.
    """
    by_name = {(c.defender, c.algorithm): c for c in curves}
    algorithms = sorted({c.algorithm for c in curves})
    cells, held = [], 0
    for target in targets:
        for algorithm in algorithms:
            for eps in epsilons:
                try:
                    acc = {arm: by_name[(f"{target}-{arm}", algorithm)].accuracy_at(eps)
                           for arm in ("Mock", "Mel") + FILTER_ARMS}
                except KeyError:
                    continue
                ok = all(acc["Mock"] >= acc[f] for f in FILTER_ARMS) and acc["Mock"] >= acc["Mel"] + margin
                held += ok
                cells.append({"target": target, "algorithm": algorithm, "epsilon": eps, "holds": ok})

    pretraining = []
    top = max(epsilons)
    for target in targets:
        try:
            mock = by_name[(f"{target}-Mock", "pgd")].accuracy_at(top)
            rand = by_name[(f"{target}-rand", "pgd")].accuracy_at(top)
            scratch_curve = by_name[(f"{target}-scratch", "pgd")]
        except KeyError:
            continue
        scratch_clean = scratch_curve.clean_accuracy
        if scratch_clean is not None and scratch_clean <= 0.70:
            branch, scratch_ok = "scratch-clean-low", True
        else:
            branch = "scratch-attacked-gap"
            scratch_ok = mock >= scratch_curve.accuracy_at(top) + margin
        pretraining.append({"target": target, "epsilon": top, "mock_minus_rand": mock - rand,
                            "rand_gap_holds": mock >= rand + margin, "scratch_branch": branch,
                            "scratch_holds": scratch_ok})
    return {"ordering_cells": cells, "ordering_held": held, "ordering_total": len(cells),
            "pretraining": pretraining}
