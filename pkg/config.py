"""
Configuration settings for the lab: runtime settings from the environment and
the experiment configuration loaded from JSON.
"""

import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from exceptions import ConfigError
from models import (
    DEFAULT_EPSILONS,
    Architecture,
    AttackAlgorithm,
    CorpusSpec,
    EncoderConfig,
    MaskingPolicy,
    TrainConfig,
    config_to_dict,
)

logger = logging.getLogger(__name__)


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer {name}={raw!r}")
        return default


class Config:
    """Runtime settings read from environment variables."""

    # Parallelism cap for per-example attack and evaluation work
    THREADS: int = _env_int('LAB_THREADS', os.cpu_count() or 1)

    LOG_LEVEL: str = os.getenv('LAB_LOG_LEVEL', 'INFO')
    OUTPUT_DIR: str = os.getenv('LAB_OUTPUT_DIR', 'runs/default')

    # Batch size for inference-only passes
    EVAL_BATCH_SIZE: int = 64

    @classmethod
    def validate(cls) -> bool:
        """Validate the runtime settings."""
        if cls.THREADS < 1:
            return False
        return cls.LOG_LEVEL.upper() in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')

    @classmethod
    def get_runtime_info(cls) -> dict:
        """Runtime settings for logging at startup."""
        return {
            'threads': cls.THREADS,
            'log_level': cls.LOG_LEVEL,
            'output_dir': cls.OUTPUT_DIR,
            'eval_batch_size': cls.EVAL_BATCH_SIZE,
        }


@dataclass(frozen=True)
class AttackSettings:
    """Attack parameters shared by every (algorithm, epsilon) cell of a sweep."""
    algorithms: List[str] = field(default_factory=lambda: ["fgsm", "pgd"])
    pgd_steps: int = 10
    pgd_step_size: Optional[float] = None
    random_start: bool = True

    def __post_init__(self):
        for name in self.algorithms:
            try:
                AttackAlgorithm(name)
            except ValueError:
                raise ConfigError(f"unknown attack algorithm {name!r}") from None
        if self.pgd_steps < 1:
            raise ConfigError("pgd_steps must be positive")


@dataclass(frozen=True)
class FilterSettings:
    """Kernel parameters of the three smoothing baselines."""
    kernel_size: int = 3
    sigma: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a full run depends on. An empty JSON object gives the default experiment."""
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    corpus_import_path: Optional[str] = None
    unlabeled_count: int = 2000
    masking: MaskingPolicy = field(default_factory=MaskingPolicy)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=10, batch_size=16, lr=0.02, clip_norm=1.0))
    classifier: TrainConfig = field(default_factory=TrainConfig)
    scratch: Optional[TrainConfig] = None
    attack: AttackSettings = field(default_factory=AttackSettings)
    epsilons: List[float] = field(default_factory=lambda: list(DEFAULT_EPSILONS))
    lnsr_epsilons: List[float] = field(default_factory=lambda: [8.0, 16.0])
    filters: FilterSettings = field(default_factory=FilterSettings)
    architectures: List[str] = field(default_factory=lambda: ["A", "B"])
    output_dir: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.unlabeled_count < 1:
            raise ConfigError("unlabeled_count must be positive")
        if sorted(set(self.epsilons)) != list(self.epsilons) or any(e <= 0 for e in self.epsilons):
            raise ConfigError(f"epsilons must be positive and strictly increasing: {self.epsilons}")
        for arch in self.architectures:
            try:
                Architecture(arch)
            except ValueError:
                raise ConfigError(f"unknown architecture {arch!r}") from None
        if self.encoder.bins != self.corpus.bins:
            raise ConfigError(f"encoder bins {self.encoder.bins} != corpus bins {self.corpus.bins}")
        if self.encoder.stack_factor != self.masking.stack_factor:
            raise ConfigError("encoder and masking stack_factor differ")

    @property
    def scratch_train(self) -> TrainConfig:
        """Joint-training budget: classifier epochs plus pre-training epochs unless set explicitly."""
        if self.scratch is not None:
            return self.scratch
        return replace(self.classifier, epochs=self.classifier.epochs + self.pretrain.epochs)

    def to_dict(self) -> Dict[str, Any]:
        data = config_to_dict(self)
        data.pop("output_dir", None)
        return data


_NESTED = {
    "corpus": CorpusSpec,
    "masking": MaskingPolicy,
    "encoder": EncoderConfig,
    "pretrain": TrainConfig,
    "classifier": TrainConfig,
    "scratch": TrainConfig,
    "attack": AttackSettings,
    "filters": FilterSettings,
}

# Sections whose seed the runner derives from the top-level seed per stage.
_DERIVED_SEED_SECTIONS = ("corpus", "pretrain", "classifier", "scratch")


def _build(cls, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def experiment_config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig, defaulting every missing key."""
    data = dict(data)
    for key in _DERIVED_SEED_SECTIONS:
        if isinstance(data.get(key), dict) and "seed" in data[key]:
            raise ConfigError(f"{key}.seed is derived per stage; set the top-level \"seed\" instead")
    for key, cls in _NESTED.items():
        if key in data and data[key] is not None:
            data[key] = _build(cls, data[key], key)
    # The encoder and masking policy share the corpus bin count and stack factor
    # unless the config sets them explicitly.
    corpus = data.get("corpus", CorpusSpec())
    masking = data.get("masking", MaskingPolicy())
    if "encoder" not in data:
        data["encoder"] = EncoderConfig(bins=corpus.bins, stack_factor=masking.stack_factor)
    for key in ("epsilons", "lnsr_epsilons"):
        if key in data:
            data[key] = [float(e) for e in data[key]]
    return _build(ExperimentConfig, data, "config")


def load_experiment_config(path: Optional[str]) -> ExperimentConfig:
    """
    Load an experiment configuration from a JSON file.

    Args:
        path: JSON file path, or None for the default experiment

    Returns:
        The validated configuration
    """
    if path is None:
        return experiment_config_from_dict({})
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    logger.info(f"Loaded experiment config from {path}")
    return experiment_config_from_dict(raw)
