"""
Passive defenses: smoothing filters applied to input spectrograms and the
cascade defender (frozen self-supervised encoder front-end + classifier).
"""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from classifiers import CascadeModel, ClassifierModel, build_classifier, fit, predict
from data_synth import stack_values
from encoder import EncoderModel, random_init
from exceptions import ContractError, ShapeError
from models import (
    Architecture,
    EncoderConfig,
    FilterConfig,
    FilterKind,
    FrontEndKind,
    InputMode,
    LabeledExample,
    Spectrogram,
    TrainConfig,
)
from utils import derive_seed

logger = logging.getLogger(__name__)

FILTER_ARMS = ("gaussian", "median", "mean")
ARM_NAMES = ("Mel",) + FILTER_ARMS + ("Mock", "rand", "scratch")


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized, truncated size x size Gaussian kernel."""
    r = np.arange(size) - size // 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def apply_filter(spec: Union[Spectrogram, np.ndarray], config: FilterConfig) -> Union[Spectrogram, np.ndarray]:
    """
    Smooth a spectrogram with a sliding window and edge-replication padding.

    Args:
        spec: (T, F) spectrogram or array
        config: Filter kind, odd kernel size, Gaussian sigma

    Returns:
        Same type and shape as the input

    Raises:
        ShapeError: If the kernel exceeds either dimension
    """
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
    k = config.kernel_size
    if values.ndim != 2 or k > values.shape[0] or k > values.shape[1]:
        raise ShapeError(f"{config.kind.value} filter", values.shape, (k, k))
    if config.kind is FilterKind.GAUSSIAN:
        out = ndimage.correlate(values, gaussian_kernel(k, config.sigma), mode="nearest")
    elif config.kind is FilterKind.MEDIAN:
        out = ndimage.median_filter(values, size=k, mode="nearest")
    else:
        out = ndimage.uniform_filter(values, size=k, mode="nearest")
    return Spectrogram(out, spec.value_range) if isinstance(spec, Spectrogram) else out


def filter_batch(values: np.ndarray, config: FilterConfig) -> np.ndarray:
    return np.stack([apply_filter(v, config) for v in values]) if len(values) else values


@dataclass(frozen=True)
class Defender:
    """A front-end transformation followed by a classifier."""
    name: str
    front_end: FrontEndKind
    classifier: ClassifierModel
    filter_config: Optional[FilterConfig] = None
    encoder: Optional[EncoderModel] = None

    def __post_init__(self):
        wants_features = self.classifier.input_mode is InputMode.ENCODER_FEATURES
        if (self.front_end is FrontEndKind.ENCODER) != wants_features:
            raise ContractError(f"defender {self.name}: {self.front_end.value} front-end cannot feed a "
                                f"{self.classifier.input_mode.value} classifier")
        if self.front_end is FrontEndKind.ENCODER and self.encoder is None:
            raise ContractError(f"defender {self.name}: encoder front-end without an encoder")
        if self.front_end is FrontEndKind.FILTER and self.filter_config is None:
            raise ContractError(f"defender {self.name}: filter front-end without a filter config")

    @property
    def architecture(self) -> Architecture:
        return self.classifier.architecture

    def transform(self, values: np.ndarray) -> np.ndarray:
        """Apply the front-end to a (N, T, F) batch."""
        if self.front_end is FrontEndKind.FILTER:
            return filter_batch(values, self.filter_config)
        if self.front_end is FrontEndKind.ENCODER:
            return self.encoder.features(values)
        return values

    def predict_logits(self, values: np.ndarray, batch_size: Optional[int] = None) -> np.ndarray:
        return self.classifier.predict_logits(self.transform(np.asarray(values, dtype=np.float64)), batch_size)


def defend_predict(defender: Defender, spec: Union[Spectrogram, np.ndarray]) -> Tuple[np.ndarray, Union[int, np.ndarray]]:
    """
    Front-end, then classifier; pure.

    A single (T, F) input gives (logits (2,), class); a (N, T, F) batch gives
    (logits (N, 2), classes (N,)).
    """
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
    if values.ndim == 3:
        logits = defender.predict_logits(values)
        return logits, np.argmax(logits, axis=1)
    return predict(defender, values)


# Arm training

def train_raw_classifier(architecture: Architecture, train: Sequence[LabeledExample],
                         dev: Optional[Sequence[LabeledExample]], config: TrainConfig) -> ClassifierModel:
    """The undefended "Mel" classifier; also the attacking model of the other architecture."""
    inputs, labels = stack_values(train)
    model = build_classifier(architecture, InputMode.RAW, config.seed, input_shape=inputs.shape[1:])
    model.model_id = f"{architecture.value}/Mel"
    fit(model, inputs, labels, config, stack_values(dev) if dev else None)
    return model


def train_features_classifier(architecture: Architecture, encoder: EncoderModel, arm: str,
                              train: Sequence[LabeledExample], dev: Optional[Sequence[LabeledExample]],
                              config: TrainConfig) -> ClassifierModel:
    """
    Train a classifier on h_K of a frozen encoder.

    Features are computed once without a tape, so the encoder never receives
    gradients.
    """
    inputs, labels = stack_values(train)
    features = encoder.features(inputs)
    dev_arrays = None
    if dev:
        dev_inputs, dev_labels = stack_values(dev)
        dev_arrays = (encoder.features(dev_inputs), dev_labels)
    model = build_classifier(architecture, InputMode.ENCODER_FEATURES, config.seed,
                             input_shape=features.shape[1:])
    model.model_id = f"{architecture.value}/{arm}"
    fit(model, features, labels, config, dev_arrays)
    return model


def train_scratch(architecture: Architecture, encoder_config: EncoderConfig, train: Sequence[LabeledExample],
                  dev: Optional[Sequence[LabeledExample]], config: TrainConfig) -> CascadeModel:
    """Encoder and classifier trained jointly from random init on labels only."""
    inputs, labels = stack_values(train)
    encoder = random_init(encoder_config, derive_seed(config.seed, "scratch-encoder"))
    steps = -(-inputs.shape[1] // encoder_config.stack_factor)
    classifier = build_classifier(architecture, InputMode.ENCODER_FEATURES, config.seed,
                                  input_shape=(steps, encoder_config.model_dim))
    classifier.model_id = f"{architecture.value}/scratch"
    cascade = CascadeModel(encoder, classifier)
    fit(cascade, inputs, labels, config, stack_values(dev) if dev else None)
    return cascade


def arm_seed(seed: int, arm: str, architecture: Architecture) -> int:
    """Training seed of one arm of one architecture."""
    return derive_seed(seed, f"train:{arm.lower()}:{architecture.value}")


def rand_encoder(config: EncoderConfig, seed: int) -> EncoderModel:
    """The random-init encoder shared by the rand arm of every architecture."""
    return random_init(config, derive_seed(seed, "train:rand:encoder"))


def train_arm(arm: str, architecture: Architecture, train: Sequence[LabeledExample],
              dev: Optional[Sequence[LabeledExample]], config: TrainConfig, seed: int,
              encoder: Optional[EncoderModel] = None,
              encoder_config: Optional[EncoderConfig] = None) -> Tuple[Optional[EncoderModel], ClassifierModel]:
    """
    Train one arm of one architecture.

    Args:
        arm: "mel", "mock", "rand" or "scratch"
        architecture: Classifier family
        train: Labeled training examples
        dev: Optional dev examples
        config: Training budget; its seed is replaced by the arm's own
        seed: Base seed of the run
        encoder: Frozen front-end of the mock and rand arms
        encoder_config: Encoder shape of the scratch arm

    Returns:
        (encoder or None, classifier); the scratch encoder is the jointly trained one

    Raises:
        ContractError: If the arm's encoder inputs are missing
    """
    arm = arm.lower()
    cfg = replace(config, seed=arm_seed(seed, arm, architecture))
    if arm == "mel":
        return None, train_raw_classifier(architecture, train, dev, cfg)
    if arm in ("mock", "rand"):
        if encoder is None:
            raise ContractError(f"arm {arm} needs an encoder")
        name = "Mock" if arm == "mock" else "rand"
        return encoder, train_features_classifier(architecture, encoder, name, train, dev, cfg)
    if arm == "scratch":
        if encoder_config is None:
            raise ContractError("arm scratch needs an encoder config")
        cascade = train_scratch(architecture, encoder_config, train, dev, cfg)
        return cascade.encoder, cascade.classifier
    raise ContractError(f"unknown arm {arm!r}")


def assemble_suite(mel: ClassifierModel, mock: Tuple[EncoderModel, ClassifierModel],
                   rand: Tuple[EncoderModel, ClassifierModel], scratch: Tuple[EncoderModel, ClassifierModel],
                   kernel_size: int = 3, sigma: float = 1.0) -> Dict[str, Defender]:
    """
    The seven defenders of one target architecture. The filter arms share the
    Mel classifier object; filters act at inference only.
    """
    suite = {"Mel": Defender("Mel", FrontEndKind.IDENTITY, mel)}
    for kind in FILTER_ARMS:
        suite[kind] = Defender(kind, FrontEndKind.FILTER, mel,
                               filter_config=FilterConfig(FilterKind(kind), kernel_size, sigma))
    for name, (encoder, classifier) in (("Mock", mock), ("rand", rand), ("scratch", scratch)):
        suite[name] = Defender(name, FrontEndKind.ENCODER, classifier, encoder=encoder)
    return suite


def build_defender_suite(train: Sequence[LabeledExample], dev: Optional[Sequence[LabeledExample]],
                         encoder_checkpoint: Path, architecture: Architecture, classifier_config: TrainConfig,
                         scratch_config: TrainConfig, seed: int, kernel_size: int = 3,
                         sigma: float = 1.0) -> Dict[str, Defender]:
    """
    Construct and train every arm for one target architecture.

    Seeds match the `lab train` stages, so a suite built here from the same
    data and pre-trained encoder equals the one `lab evaluate` loads.

    Args:
        train: Labeled training examples
        dev: Optional dev examples for per-epoch monitoring
        encoder_checkpoint: Pre-trained encoder (missing file raises CheckpointError)
        architecture: Target classifier family
        classifier_config: Budget of the Mel, Mock and rand classifiers
        scratch_config: Budget of the jointly trained arm
        seed: Base seed of the run

    Returns:
        Arm name to defender
    """
    pretrained = EncoderModel.load(encoder_checkpoint)
    _, mel = train_arm("mel", architecture, train, dev, classifier_config, seed)
    mock = train_arm("mock", architecture, train, dev, classifier_config, seed, encoder=pretrained)
    rand = train_arm("rand", architecture, train, dev, classifier_config, seed,
                     encoder=rand_encoder(pretrained.config, seed))
    scratch = train_arm("scratch", architecture, train, dev, scratch_config, seed,
                        encoder_config=pretrained.config)
    logger.info(f"Built defender suite for architecture {architecture.value}")
    return assemble_suite(mel, mock, rand, scratch, kernel_size, sigma)


# Suite manifest

def save_suite_manifest(path: Path, entries: Dict[str, Dict[str, object]]) -> None:
    """
    Write arm-name -> {front_end, filter, encoder_checkpoint, classifier_checkpoint}.
    Checkpoint paths are stored relative to the manifest's directory.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")


def load_suite(path: Path) -> Dict[str, Defender]:
    """Rebuild defenders from a suite manifest, sharing classifier objects between arms."""
    path = Path(path)
    base = path.parent
    entries = json.loads(path.read_text())
    classifiers: Dict[str, ClassifierModel] = {}
    encoders: Dict[str, EncoderModel] = {}
    suite = {}
    for name, entry in entries.items():
        front_end = FrontEndKind(entry["front_end"])
        clf_path = entry["classifier_checkpoint"]
        if clf_path not in classifiers:
            mode = InputMode.ENCODER_FEATURES if front_end is FrontEndKind.ENCODER else InputMode.RAW
            classifiers[clf_path] = ClassifierModel.load(base / clf_path, input_mode=mode)
        encoder = None
        if entry.get("encoder_checkpoint"):
            enc_path = entry["encoder_checkpoint"]
            if enc_path not in encoders:
                encoders[enc_path] = EncoderModel.load(base / enc_path)
            encoder = encoders[enc_path]
        filter_config = FilterConfig(**entry["filter"]) if entry.get("filter") else None
        suite[name] = Defender(name, front_end, classifiers[clf_path], filter_config, encoder)
    return suite
