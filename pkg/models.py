"""
Data models for the lab.
"""

import logging
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from exceptions import ConfigError, ShapeError

logger = logging.getLogger(__name__)

# Generated spectrogram values are clipped to [-VALUE_BOUND, VALUE_BOUND].
VALUE_BOUND = 20.0
DEFAULT_FRAMES = 128
DEFAULT_BINS = 40
DEFAULT_EPSILONS = (0.1, 1.0, 2.0, 4.0, 8.0, 16.0)
DEFAULT_VALUE_RANGE = (-VALUE_BOUND, VALUE_BOUND)


class Label(Enum):
    """Anti-spoofing classes."""
    BONA_FIDE = 0
    SPOOF = 1


class Architecture(Enum):
    """Classifier families used as attacker and target."""
    A = "A"  # max-feature-map CNN
    B = "B"  # squeeze-excitation CNN

    @property
    def other(self) -> "Architecture":
        return Architecture.B if self is Architecture.A else Architecture.A


class InputMode(Enum):
    """What a classifier consumes."""
    RAW = "raw-spectrogram"
    ENCODER_FEATURES = "encoder-features"


class AttackAlgorithm(Enum):
    """Supported L-infinity attacks."""
    FGSM = "fgsm"
    PGD = "pgd"


class FilterKind(Enum):
    """Smoothing filters used as passive defenses."""
    GAUSSIAN = "gaussian"
    MEDIAN = "median"
    MEAN = "mean"


class FrontEndKind(Enum):
    """Defender front-end types."""
    IDENTITY = "identity"
    FILTER = "filter"
    ENCODER = "encoder"


class MaskCase(Enum):
    """Corruption applied to the selected steps of one utterance."""
    ZERO = "A"
    RANDOM = "B"
    KEEP = "C"


class StageStatus(Enum):
    """Run manifest stage states."""
    PENDING = "pending"
    DONE = "done"


@dataclass(frozen=True)
class Spectrogram:
    """
    A frames x bins real matrix.

    value_range is the nominal (low, high) scale of the source: the clipping
    bound for generated corpora, the intensity mapping for ingested images.
    Adversarial perturbations may leave it.
    """
    values: np.ndarray
    value_range: Tuple[float, float] = DEFAULT_VALUE_RANGE

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ShapeError("spectrogram", values.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("spectrogram values must be finite")
        low, high = (float(v) for v in self.value_range)
        if not low < high:
            raise ValueError(f"value_range must satisfy low < high, got {self.value_range}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "value_range", (low, high))

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def to_record(self) -> Dict[str, Any]:
        """Convert to the JSON-lines record layout; a non-default value_range is kept."""
        record: Dict[str, Any] = {"shape": list(self.values.shape), "values": self.values.ravel().tolist()}
        if self.value_range != DEFAULT_VALUE_RANGE:
            record["value_range"] = list(self.value_range)
        return record


@dataclass(frozen=True)
class LabeledExample:
    """A spectrogram with its bona-fide/spoof label."""
    spec: Spectrogram
    label: int

    def __post_init__(self):
        if self.label not in (Label.BONA_FIDE.value, Label.SPOOF.value):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    def to_record(self) -> Dict[str, Any]:
        return {"label": self.label, **self.spec.to_record()}


@dataclass(frozen=True)
class CorpusSpec:
    """Parameters of a generated labeled corpus."""
    n_train: int = 2000
    n_dev: int = 200
    n_eval: int = 200
    seed: int = 0
    class_separation: float = 1.0
    noise_level: float = 0.5
    frames: int = DEFAULT_FRAMES
    bins: int = DEFAULT_BINS
    bumps: int = 8

    def __post_init__(self):
        for name in ("n_train", "n_dev", "n_eval", "frames", "bins", "bumps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"corpus {name} must be positive, got {getattr(self, name)}")
        if self.class_separation < 0 or self.noise_level < 0:
            raise ConfigError("class_separation and noise_level must be nonnegative")


@dataclass(frozen=True)
class MaskingPolicy:
    """Masked-prediction corruption parameters."""
    select_rate: float = 0.15
    zero_prob: float = 0.80
    random_prob: float = 0.10
    keep_prob: float = 0.10
    segment_length: int = 3
    stack_factor: int = 2
    per_segment_cases: bool = False

    def __post_init__(self):
        if abs(self.zero_prob + self.random_prob + self.keep_prob - 1.0) > 1e-9:
            raise ConfigError("zero_prob + random_prob + keep_prob must equal 1")
        if min(self.zero_prob, self.random_prob, self.keep_prob) < 0:
            raise ConfigError("masking case probabilities must be nonnegative")
        # 0 is accepted as an explicit no-op policy.
        if not 0 <= self.select_rate < 1:
            raise ConfigError(f"select_rate must lie in [0, 1), got {self.select_rate}")
        if self.segment_length < 1 or self.stack_factor < 1:
            raise ConfigError("segment_length and stack_factor must be >= 1")


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the self-supervised transformer encoder."""
    layers: int = 4
    model_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    bins: int = DEFAULT_BINS
    stack_factor: int = 2
    masked_only_loss: bool = False

    def __post_init__(self):
        if min(self.layers, self.model_dim, self.heads, self.ff_dim, self.bins, self.stack_factor) < 1:
            raise ConfigError("encoder dimensions must be positive")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")

    @property
    def input_dim(self) -> int:
        return self.bins * self.stack_factor

    def shape_signature(self) -> Dict[str, int]:
        """Fields that determine parameter shapes."""
        return {
            "layers": self.layers,
            "model_dim": self.model_dim,
            "heads": self.heads,
            "ff_dim": self.ff_dim,
            "bins": self.bins,
            "stack_factor": self.stack_factor,
        }


@dataclass(frozen=True)
class TrainConfig:
    """Minibatch SGD settings."""
    epochs: int = 15
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0, batch_size and lr positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class AttackConfig:
    """Fully determines the perturbation for a given model and input."""
    algorithm: AttackAlgorithm = AttackAlgorithm.PGD
    epsilon: float = 4.0
    steps: int = 10
    step_size: Optional[float] = None
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.algorithm, AttackAlgorithm):
            object.__setattr__(self, "algorithm", AttackAlgorithm(self.algorithm))
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.algorithm is AttackAlgorithm.PGD and self.alpha > self.epsilon > 0:
            logger.warning(f"PGD step size {self.alpha} exceeds epsilon {self.epsilon}")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4

    def summary(self) -> str:
        if self.algorithm is AttackAlgorithm.FGSM:
            return f"fgsm(eps={self.epsilon:g})"
        return (f"pgd(eps={self.epsilon:g}, steps={self.steps}, alpha={self.alpha:g}, "
                f"random_start={self.random_start})")


@dataclass(frozen=True)
class AdversarialPair:
    """An original spectrogram and its L-infinity bounded perturbation."""
    original: np.ndarray
    delta: np.ndarray
    label: int
    source_model_id: str
    epsilon: float
    algorithm: str
    index: int = 0

    @property
    def adversarial(self) -> np.ndarray:
        return self.original + self.delta

    def to_record(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "label": self.label,
            "source-model-id": self.source_model_id,
            "epsilon": self.epsilon,
            "algorithm": self.algorithm,
            "original": {"shape": list(self.original.shape), "values": self.original.ravel().tolist()},
            "delta": {"shape": list(self.delta.shape), "values": self.delta.ravel().tolist()},
        }


@dataclass(frozen=True)
class FilterConfig:
    """Smoothing filter settings."""
    kind: FilterKind = FilterKind.MEDIAN
    kernel_size: int = 3
    sigma: float = 1.0

    def __post_init__(self):
        if not isinstance(self.kind, FilterKind):
            object.__setattr__(self, "kind", FilterKind(self.kind))
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")


@dataclass
class LnsrReport:
    """Per-layer noise-to-signal ratios summed over N pairs."""
    model_id: str
    attack_summary: str
    values: List[float]
    n_pairs: int

    @property
    def means(self) -> List[float]:
        return [v / self.n_pairs for v in self.values]

    @property
    def depth(self) -> int:
        return len(self.values) - 1


@dataclass
class RobustnessCurve:
    """Accuracy of one defender over an epsilon grid for one algorithm."""
    defender: str
    algorithm: str
    points: List[Tuple[float, float]]
    n_examples: int

    def __post_init__(self):
        eps = [e for e, _ in self.points]
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError(f"epsilon grid must be strictly increasing: {eps}")
        if any(not 0.0 <= acc <= 1.0 for _, acc in self.points):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def clean_accuracy(self) -> Optional[float]:
        for eps, acc in self.points:
            if eps == 0:
                return acc
        return None

    def accuracy_at(self, epsilon: float) -> float:
        for eps, acc in self.points:
            if eps == epsilon:
                return acc
        raise KeyError(epsilon)


@dataclass
class StageRecord:
    """Status and content hashes of one harness stage."""
    status: StageStatus = StageStatus.PENDING
    artifacts: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"status": self.status.value, "artifacts": dict(self.artifacts)}


@dataclass
class RunManifest:
    """Resumability ledger for an output directory."""
    config: Dict[str, Any]
    config_hash: str
    stages: Dict[str, StageRecord] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "stages": {name: rec.to_dict() for name, rec in self.stages.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunManifest":
        stages = {
            name: StageRecord(StageStatus(rec["status"]), dict(rec.get("artifacts", {})))
            for name, rec in data.get("stages", {}).items()
        }
        return cls(config=data["config"], config_hash=data["config_hash"], stages=stages)


def config_to_dict(obj: Any) -> Any:
    """Recursively turn a config dataclass into JSON-friendly data."""
    if hasattr(obj, "__dataclass_fields__"):
        return {k: config_to_dict(v) for k, v in asdict(obj).items()}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: config_to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [config_to_dict(v) for v in obj]
    return obj
