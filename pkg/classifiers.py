"""
Binary anti-spoofing classifiers and their trainer.

Architecture A is a light CNN with max-feature-map activations; architecture
B is a CNN with squeeze-excitation channel gating. Both take a 1-channel
image: the raw spectrogram, or the encoder's top hidden state.
"""

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import tensor as tc
from config import Config
from data_synth import stack_values
from encoder import EncoderModel
from exceptions import CheckpointError, ShapeError
from models import (
    DEFAULT_BINS,
    DEFAULT_FRAMES,
    Architecture,
    EncoderConfig,
    InputMode,
    LabeledExample,
    Spectrogram,
    TrainConfig,
)
from tensor import Tensor
from utils import ensure_finite

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "classifier"

_SHAPES: Dict[Architecture, Dict[str, Tuple[int, ...]]] = {
    Architecture.A: {
        "mfm1.weight": (32, 1, 3, 3),
        "mfm1.bias": (32,),
        "mfm2.weight": (96, 16, 3, 3),
        "mfm2.bias": (96,),
        "mfm_fc.weight": (48, 192),
        "mfm_fc.bias": (192,),
        "mfm_out.weight": (96, 2),
        "mfm_out.bias": (2,),
    },
    Architecture.B: {
        "se_conv1.weight": (16, 1, 3, 3),
        "se_conv1.bias": (16,),
        "se1.squeeze.weight": (16, 4),
        "se1.squeeze.bias": (4,),
        "se1.excite.weight": (4, 16),
        "se1.excite.bias": (16,),
        "se_conv2.weight": (80, 16, 3, 3),
        "se_conv2.bias": (80,),
        "se2.squeeze.weight": (80, 20),
        "se2.squeeze.bias": (20,),
        "se2.excite.weight": (20, 80),
        "se2.excite.bias": (80,),
        "se_fc.weight": (80, 128),
        "se_fc.bias": (128,),
        "se_out.weight": (128, 2),
        "se_out.bias": (2,),
    },
}

# The first block pools by 4 so the wide second block runs on a coarse grid.
FIRST_POOL = 4


def default_input_shape(input_mode: InputMode, encoder_config: Optional[EncoderConfig] = None,
                        frames: int = DEFAULT_FRAMES, bins: int = DEFAULT_BINS) -> Tuple[int, int]:
    """Image shape a classifier sees for a given input mode."""
    if input_mode is InputMode.RAW:
        return frames, bins
    encoder_config = encoder_config or EncoderConfig(bins=bins)
    steps = -(-frames // encoder_config.stack_factor)
    return steps, encoder_config.model_dim


def _mfm(x: Tensor) -> Tensor:
    """Max-feature-map: elementwise max of the two channel halves."""
    half = x.shape[1] // 2
    return tc.maximum(x[:, :half], x[:, half:])


class ClassifierModel:
    """Two-logit CNN classifier over a 1-channel image."""

    def __init__(self, architecture: Architecture, input_mode: InputMode, input_shape: Tuple[int, int],
                 params: Dict[str, Tensor], seed: Optional[int] = None, model_id: Optional[str] = None):
        expected = _SHAPES[architecture]
        if set(expected) != set(params):
            raise CheckpointError(f"parameters do not match architecture {architecture.value}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"classifier parameter {name}", shape, params[name].shape)
        if min(input_shape) < 2 * FIRST_POOL:
            raise ShapeError(f"classifier {architecture.value} input", tuple(input_shape),
                             (2 * FIRST_POOL, 2 * FIRST_POOL))
        self.architecture = architecture
        self.input_mode = input_mode
        self.input_shape = tuple(input_shape)
        self.params = params
        self.seed = seed
        self.model_id = model_id or f"{architecture.value}-{input_mode.value}"

    @property
    def accepts_raw_input(self) -> bool:
        return self.input_mode is InputMode.RAW

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def _forward_a(self, x: Tensor) -> Tensor:
        p = self.params
        x = _mfm(tc.conv2d(x, p["mfm1.weight"], p["mfm1.bias"], padding=1))
        x = tc.max_pool2d(x, FIRST_POOL)
        x = _mfm(tc.conv2d(x, p["mfm2.weight"], p["mfm2.bias"], padding=1))
        x = tc.max_pool2d(x, 2)
        x = tc.global_avg_pool(x)
        hidden = x @ p["mfm_fc.weight"] + p["mfm_fc.bias"]
        half = hidden.shape[1] // 2
        hidden = tc.maximum(hidden[:, :half], hidden[:, half:])
        return hidden @ p["mfm_out.weight"] + p["mfm_out.bias"]

    def _squeeze_excite(self, x: Tensor, block: str) -> Tensor:
        p = self.params
        n, c = x.shape[:2]
        s = tc.global_avg_pool(x)
        s = tc.relu(s @ p[f"{block}.squeeze.weight"] + p[f"{block}.squeeze.bias"])
        s = tc.sigmoid(s @ p[f"{block}.excite.weight"] + p[f"{block}.excite.bias"])
        return x * tc.reshape(s, (n, c, 1, 1))

    def _forward_b(self, x: Tensor) -> Tensor:
        p = self.params
        x = tc.relu(tc.conv2d(x, p["se_conv1.weight"], p["se_conv1.bias"], padding=1))
        x = tc.max_pool2d(self._squeeze_excite(x, "se1"), FIRST_POOL)
        x = tc.relu(tc.conv2d(x, p["se_conv2.weight"], p["se_conv2.bias"], padding=1))
        x = tc.max_pool2d(self._squeeze_excite(x, "se2"), 2)
        x = tc.global_avg_pool(x)
        hidden = tc.relu(x @ p["se_fc.weight"] + p["se_fc.bias"])
        return hidden @ p["se_out.weight"] + p["se_out.bias"]

    def logits(self, x: Tensor) -> Tensor:
        """
        Forward pass.

        Args:
            x: (N, H, W) batch matching input_shape

        Returns:
            (N, 2) logits
        """
        if x.ndim != 3 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"classifier {self.model_id} input", x.shape, ("N",) + self.input_shape)
        image = tc.reshape(x, (x.shape[0], 1) + self.input_shape)
        if self.architecture is Architecture.A:
            return self._forward_a(image)
        return self._forward_b(image)

    def predict_logits(self, values: np.ndarray, batch_size: Optional[int] = None) -> np.ndarray:
        """Logits for a (N, H, W) array, computed in batches."""
        return _batched_logits(self.logits, values, batch_size)

    def save(self, path: Path) -> None:
        metadata = {
            "kind": CHECKPOINT_KIND,
            "architecture": self.architecture.value,
            "input_mode": self.input_mode.value,
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "model_id": self.model_id,
        }
        tc.save_parameters(path, self.params, metadata)

    @classmethod
    def load(cls, path: Path, input_mode: Optional[InputMode] = None,
             architecture: Optional[Architecture] = None) -> "ClassifierModel":
        """
        Load a checkpoint, rejecting role mismatches.

        Args:
            path: Checkpoint written by save
            input_mode: Required input mode, or None
            architecture: Required architecture, or None
        """
        arrays, metadata = tc.load_parameters(path)
        if metadata.get("kind") != CHECKPOINT_KIND:
            raise CheckpointError(f"{path}: not a classifier checkpoint (kind={metadata.get('kind')!r})")
        mode = InputMode(metadata["input_mode"])
        arch = Architecture(metadata["architecture"])
        if input_mode is not None and mode is not input_mode:
            raise CheckpointError(f"{path}: checkpoint is a {mode.value} classifier, expected {input_mode.value}")
        if architecture is not None and arch is not architecture:
            raise CheckpointError(f"{path}: checkpoint is architecture {arch.value}, expected {architecture.value}")
        params = {name: Tensor(arr) for name, arr in arrays.items()}
        return cls(arch, mode, tuple(metadata["input_shape"]), params,
                   metadata.get("seed"), metadata.get("model_id"))


def _batched_logits(forward, values: np.ndarray, batch_size: Optional[int]) -> np.ndarray:
    batch_size = batch_size or Config.EVAL_BATCH_SIZE
    values = np.asarray(values, dtype=np.float64)
    chunks = [forward(Tensor(values[i:i + batch_size])).data for i in range(0, values.shape[0], batch_size)]
    out = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 2))
    return ensure_finite(out, "classifier logits")


def build_classifier(architecture: Union[Architecture, str], input_mode: Union[InputMode, str], seed: int,
                     input_shape: Optional[Tuple[int, int]] = None,
                     encoder_config: Optional[EncoderConfig] = None) -> ClassifierModel:
    """
    Initialize a classifier with fan-in scaled uniform weights and biases.

    Args:
        architecture: A (max-feature-map) or B (squeeze-excitation)
        input_mode: raw spectrogram or encoder features
        seed: Initialization seed
        input_shape: (H, W) of the input image; defaults follow the input mode
        encoder_config: Used to size the default encoder-features input

    Returns:
        A fresh, frozen model
    """
    architecture = Architecture(architecture)
    input_mode = InputMode(input_mode)
    input_shape = input_shape or default_input_shape(input_mode, encoder_config)
    rng = np.random.default_rng(seed)
    shapes = _SHAPES[architecture]
    params = {}
    for name, shape in shapes.items():
        weight_shape = shapes[name.rsplit(".", 1)[0] + ".weight"]
        fan_in = int(np.prod(weight_shape[1:])) if len(weight_shape) == 4 else weight_shape[0]
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape))
    return ClassifierModel(architecture, input_mode, input_shape, params, seed)


class CascadeModel:
    """Encoder front-end feeding a features classifier, differentiable end to end."""

    def __init__(self, encoder: EncoderModel, classifier: ClassifierModel):
        if classifier.input_mode is not InputMode.ENCODER_FEATURES:
            raise CheckpointError("cascade classifier must consume encoder features")
        self.encoder = encoder
        self.classifier = classifier
        self.model_id = f"cascade-{classifier.model_id}"

    @property
    def architecture(self) -> Architecture:
        return self.classifier.architecture

    @property
    def accepts_raw_input(self) -> bool:
        return True

    def parameters(self) -> List[Tensor]:
        return self.encoder.backbone_parameters() + self.classifier.parameters()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def logits(self, x: Tensor) -> Tensor:
        return self.classifier.logits(self.encoder.spectrogram_states(x)[-1])

    def predict_logits(self, values: np.ndarray, batch_size: Optional[int] = None) -> np.ndarray:
        return _batched_logits(self.logits, values, batch_size)


def predict(model, spec: Union[Spectrogram, np.ndarray]) -> Tuple[np.ndarray, int]:
    """
    Logits and argmax class for one input.

    Args:
        model: Anything with predict_logits (classifier, cascade or defender)
        spec: Spectrogram, or a features matrix for a features classifier

    Returns:
        (logits of shape (2,), class index)
    """
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
    logits = model.predict_logits(values[None])[0]
    return logits, int(np.argmax(logits))


def accuracy(model, examples: Sequence[LabeledExample]) -> float:
    """
    Fraction of examples whose argmax prediction equals the label.

    Args:
        model: Anything with predict_logits over raw spectrograms
        examples: Non-empty labeled examples
    """
    if not examples:
        raise ValueError("accuracy needs at least one example")
    values, labels = stack_values(examples)
    return accuracy_on_arrays(model, values, labels)


def accuracy_on_arrays(model, values: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy needs at least one example")
    predictions = np.argmax(model.predict_logits(values), axis=1)
    return float(np.mean(predictions == labels))


def fit(model, inputs: np.ndarray, labels: np.ndarray, config: TrainConfig,
        dev: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> List[Dict[str, float]]:
    """
    Minibatch cross-entropy training with SGD and momentum, seeded shuffling.

    Args:
        model: ClassifierModel or CascadeModel; trained in place
        inputs: (N, H, W) training inputs in the model's input space
        labels: (N,) class indices
        config: Optimizer settings and seed
        dev: Optional (inputs, labels) evaluated after every epoch

    Returns:
        Per-epoch {"epoch", "train_loss", "dev_accuracy"} records
    """
    if len(labels) == 0:
        raise ValueError("training corpus is empty")
    rng = np.random.default_rng(config.seed)
    model.set_trainable(True)
    opt = tc.SGD(model.parameters(), lr=config.lr, momentum=config.momentum, clip_norm=config.clip_norm)
    history = []
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(labels))
            total, batches = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                opt.zero_grad()
                loss = tc.cross_entropy(model.logits(Tensor(inputs[idx])), labels[idx])
                loss.backward()
                opt.step()
                total += float(loss.data)
                batches += 1
            record = {"epoch": epoch + 1, "train_loss": total / batches}
            ensure_finite(np.asarray(record["train_loss"]), f"{model.model_id} training loss")
            if dev is not None:
                model.set_trainable(False)
                record["dev_accuracy"] = accuracy_on_arrays(model, *dev)
                model.set_trainable(True)
            history.append(record)
            dev_msg = f", dev acc {record['dev_accuracy']:.3f}" if dev is not None else ""
            logger.info(f"{model.model_id} epoch {epoch + 1}/{config.epochs}: loss {record['train_loss']:.4f}{dev_msg}")
    finally:
        model.set_trainable(False)
    return history


def train(model: ClassifierModel, corpus: Sequence[LabeledExample], config: TrainConfig,
          dev: Optional[Sequence[LabeledExample]] = None) -> Tuple[ClassifierModel, List[Dict[str, float]]]:
    """
    Train a raw-spectrogram classifier (or a cascade) on labeled examples.

    Returns:
        The trained model and its per-epoch metrics
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    inputs, labels = stack_values(corpus)
    dev_arrays = stack_values(dev) if dev else None
    history = fit(model, inputs, labels, config, dev_arrays)
    return model, history
