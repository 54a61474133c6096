"""
Self-supervised transformer encoder pre-trained by masked-frame reconstruction.

Spectrograms are downsampled by stacking R consecutive frames into one step,
a share of steps is corrupted (zeroed, replaced, or kept), and a small
transformer plus prediction head learns to reconstruct the clean steps under
an L1 loss. The per-layer hidden states feed the cascade defender and the
noise-attenuation diagnostics.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import tensor as tc
from config import Config
from exceptions import CheckpointError, ConfigError, ShapeError
from models import EncoderConfig, MaskCase, MaskingPolicy, Spectrogram, TrainConfig
from tensor import Tensor
from utils import ensure_finite

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "ssl-encoder"
HEAD_PREFIX = "head."


# Frame stacking

def padded_frames(frames: int, stack_factor: int) -> int:
    """Frame count after zero-padding up to a multiple of stack_factor."""
    return -(-frames // stack_factor) * stack_factor


def stack_frames(x: Tensor, stack_factor: int) -> Tensor:
    """
    Stack consecutive frames of a (N, T, F) batch into (N, ceil(T/R), F*R) steps.

    Trailing zero frames pad T up to a multiple of R; step k is
    concat(frame kR, ..., frame kR+R-1).
    """
    n, t, f = x.shape
    target = padded_frames(t, stack_factor)
    if target != t:
        x = tc.concatenate([x, Tensor(np.zeros((n, target - t, f)))], axis=1)
    return tc.reshape(x, (n, target // stack_factor, f * stack_factor))


def downsample(spec: Union[Spectrogram, np.ndarray], stack_factor: int) -> np.ndarray:
    """
    Stack R consecutive frames of one spectrogram into one step.

    Args:
        spec: (T, F) spectrogram
        stack_factor: R

    Returns:
        (ceil(T/R), F*R) array; trailing frames are zero-padded when R does not divide T
    """
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
    if values.shape[0] % stack_factor:
        logger.debug(f"Padding {values.shape[0]} frames to a multiple of {stack_factor}")
    return stack_frames(Tensor(values[None]), stack_factor).data[0]


def unstack(steps: np.ndarray, stack_factor: int, frames: Optional[int] = None) -> np.ndarray:
    """Invert downsample; frames trims the zero padding."""
    n_steps, dim = steps.shape
    values = steps.reshape(n_steps * stack_factor, dim // stack_factor)
    return values if frames is None else values[:frames]


# Masking

@dataclass
class MaskingResult:
    """Output of one masking draw."""
    corrupted: np.ndarray
    mask: np.ndarray
    segments: List[Tuple[int, int]] = field(default_factory=list)
    cases: List[MaskCase] = field(default_factory=list)


def selected_count(n_steps: int, select_rate: float) -> int:
    """ceil(select_rate * n_steps), robust to float noise such as 0.15 * 100."""
    return min(n_steps, math.ceil(select_rate * n_steps - 1e-9))


def _draw_case(rng: np.random.Generator, policy: MaskingPolicy) -> MaskCase:
    u = rng.random()
    if u < policy.zero_prob:
        return MaskCase.ZERO
    if u < policy.zero_prob + policy.random_prob:
        return MaskCase.RANDOM
    return MaskCase.KEEP


def apply_masking(steps: np.ndarray, policy: MaskingPolicy,
                  rng: Union[int, np.random.Generator]) -> MaskingResult:
    """
    Corrupt disjoint contiguous segments covering ceil(select_rate * n) steps.

    Segments have length segment_length except possibly the last one. One
    case is drawn per utterance (or per segment with per_segment_cases) with
    probabilities (zero_prob, random_prob, keep_prob): zero the steps, replace
    each with a step drawn uniformly from the same utterance, or keep them.

    Args:
        steps: (n, D) stacked-frame sequence
        policy: Masking parameters
        rng: Seed or generator

    Returns:
        Corrupted copy, boolean mask of selected steps, segments and cases
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = steps.shape[0]
    if policy.segment_length > n:
        raise ConfigError(f"segment_length {policy.segment_length} exceeds {n} steps")

    corrupted = steps.copy()
    mask = np.zeros(n, dtype=bool)
    k = selected_count(n, policy.select_rate)
    if k == 0:
        return MaskingResult(corrupted, mask)

    full, rem = divmod(k, policy.segment_length)
    lengths = [policy.segment_length] * full + ([rem] if rem else [])
    m = len(lengths)
    # Place m blocks among (n - k) unselected steps: choose block slots out of n - k + m.
    slots = np.sort(rng.choice(n - k + m, size=m, replace=False))
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    segments = [(int(slot - j + off), int(length))
                for j, (slot, off, length) in enumerate(zip(slots, offsets, lengths))]

    if policy.per_segment_cases:
        cases = [_draw_case(rng, policy) for _ in segments]
    else:
        cases = [_draw_case(rng, policy)] * len(segments)

    for (start, length), case in zip(segments, cases):
        sel = slice(start, start + length)
        mask[sel] = True
        if case is MaskCase.ZERO:
            corrupted[sel] = 0.0
        elif case is MaskCase.RANDOM:
            corrupted[sel] = steps[rng.integers(0, n, size=length)]
    return MaskingResult(corrupted, mask, segments, cases if policy.per_segment_cases else cases[:1])


# Model

def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal encodings, (length, dim)."""
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : dim // 2]
    return pe


def _parameter_shapes(config: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
    d, ff, d_in = config.model_dim, config.ff_dim, config.input_dim
    shapes: Dict[str, Tuple[int, ...]] = {
        "input_proj.weight": (d_in, d),
        "input_proj.bias": (d,),
        "input_ln.gamma": (d,),
        "input_ln.beta": (d,),
    }
    for layer in range(config.layers):
        p = f"layer{layer}."
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + name] = (d, d)
            shapes[p + "attn.b" + name[1]] = (d,)
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "ffn.w1"] = (d, ff)
        shapes[p + "ffn.b1"] = (ff,)
        shapes[p + "ffn.w2"] = (ff, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
    shapes.update({
        "head.w1": (d, d),
        "head.b1": (d,),
        "head.w2": (d, d_in),
        "head.b2": (d_in,),
    })
    return shapes


def _fan_in(name: str, shapes: Dict[str, Tuple[int, ...]]) -> int:
    """Fan-in of a weight or of the weight a bias belongs to."""
    shape = shapes[name]
    if len(shape) == 2:
        return shape[0]
    prefix, leaf = name.rsplit(".", 1)
    partner = {"bias": "weight", "b1": "w1", "b2": "w2"}.get(leaf)
    if partner is None and leaf.startswith("b") and len(leaf) == 2:
        partner = "w" + leaf[1]
    return shapes[f"{prefix}.{partner}"][0]


class EncoderModel:
    """Transformer encoder with a frame-reconstruction head."""

    def __init__(self, config: EncoderConfig, params: Dict[str, Tensor], seed: Optional[int] = None):
        expected = _parameter_shapes(config)
        if set(expected) != set(params):
            raise CheckpointError(f"parameter names do not match config: "
                                  f"missing {sorted(set(expected) - set(params))}, "
                                  f"unexpected {sorted(set(params) - set(expected))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"encoder parameter {name}", shape, params[name].shape)
        self.config = config
        self.params = params
        self.seed = seed

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def backbone_parameters(self) -> List[Tensor]:
        """Every parameter except the reconstruction head, which only pre-training uses."""
        return [p for name, p in self.params.items() if not name.startswith(HEAD_PREFIX)]

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def _attention(self, z: Tensor, layer: int) -> Tensor:
        p = self.params
        pre = f"layer{layer}.attn."
        n, t, d = z.shape
        h = self.config.heads
        dh = d // h

        def heads(name: str) -> Tensor:
            proj = z @ p[pre + "w" + name] + p[pre + "b" + name]
            return tc.transpose(tc.reshape(proj, (n, t, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = tc.scale(q @ tc.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
        ctx = tc.softmax(scores, axis=-1) @ v
        ctx = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (n, t, d))
        return ctx @ p[pre + "wo"] + p[pre + "bo"]

    def hidden_states(self, steps: Tensor) -> List[Tensor]:
        """
        Run the encoder on stacked-frame steps.

        Args:
            steps: (N, T', F*R) tensor

        Returns:
            [h_0, ..., h_K]; h_0 is the input itself, h_i (N, T', model_dim) for i >= 1
        """
        if steps.ndim != 3 or steps.shape[-1] != self.config.input_dim:
            raise ShapeError("encoder input", steps.shape, ("N", "T'", self.config.input_dim))
        p = self.params
        states = [steps]
        z = steps @ p["input_proj.weight"] + p["input_proj.bias"]
        z = z + positional_encoding(steps.shape[1], self.config.model_dim)
        z = tc.layer_norm(z, p["input_ln.gamma"], p["input_ln.beta"])
        for layer in range(self.config.layers):
            pre = f"layer{layer}."
            z = tc.layer_norm(z + self._attention(z, layer), p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
            ff = tc.relu(z @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]) @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
            z = tc.layer_norm(z + ff, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
            states.append(z)
        return states

    def spectrogram_states(self, x: Tensor) -> List[Tensor]:
        """Hidden states for a (N, T, F) spectrogram batch."""
        if x.ndim != 3 or x.shape[-1] != self.config.bins:
            raise ShapeError("encode", x.shape, ("N", "T", self.config.bins))
        return self.hidden_states(stack_frames(x, self.config.stack_factor))

    def reconstruct(self, steps: Tensor) -> Tensor:
        """Prediction head applied to the last hidden state."""
        p = self.params
        top = self.hidden_states(steps)[-1]
        return tc.relu(top @ p["head.w1"] + p["head.b1"]) @ p["head.w2"] + p["head.b2"]

    def encode(self, spec: Union[Spectrogram, np.ndarray]) -> List[np.ndarray]:
        """
        Layerwise hidden states of one spectrogram.

        Args:
            spec: (T, F) spectrogram

        Returns:
            [h_0, ..., h_K] as arrays; h_0 has shape (T/R, F*R)
        """
        values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError("encode", values.shape)
        states = self.spectrogram_states(Tensor(values[None]))
        return [s.data[0] for s in states]

    def features(self, values: np.ndarray, batch_size: Optional[int] = None) -> np.ndarray:
        """Top-layer features h_K for a (N, T, F) batch, computed without a tape."""
        batch_size = batch_size or Config.EVAL_BATCH_SIZE
        chunks = []
        for start in range(0, values.shape[0], batch_size):
            chunk = Tensor(values[start:start + batch_size])
            chunks.append(self.spectrogram_states(chunk)[-1].data)
        out = np.concatenate(chunks, axis=0)
        return ensure_finite(out, "encoder features")

    def save(self, path: Path) -> None:
        metadata = {
            "kind": CHECKPOINT_KIND,
            "config": {**self.config.shape_signature(), "masked_only_loss": self.config.masked_only_loss},
            "seed": self.seed,
        }
        tc.save_parameters(path, self.params, metadata)

    @classmethod
    def load(cls, path: Path, expected: Optional[EncoderConfig] = None) -> "EncoderModel":
        """
        Load a checkpoint.

        Raises:
            CheckpointError: Wrong checkpoint kind or config mismatch with expected
        """
        arrays, metadata = tc.load_parameters(path)
        if metadata.get("kind") != CHECKPOINT_KIND:
            raise CheckpointError(f"{path}: not an encoder checkpoint (kind={metadata.get('kind')!r})")
        config = EncoderConfig(**metadata["config"])
        if expected is not None and expected.shape_signature() != config.shape_signature():
            raise CheckpointError(f"{path}: encoder config {config.shape_signature()} "
                                  f"does not match expected {expected.shape_signature()}")
        params = {name: Tensor(arr) for name, arr in arrays.items()}
        return cls(config, params, metadata.get("seed"))


def random_init(config: EncoderConfig, seed: int) -> EncoderModel:
    """
    Scaled-uniform initialization: weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    layer-norm gains 1 and shifts 0. Parameters start frozen; trainers unfreeze them.
    """
    rng = np.random.default_rng(seed)
    shapes = _parameter_shapes(config)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith(".beta"):
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shapes))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data)
    return EncoderModel(config, params, seed)


# Pre-training

def _masked_batch(batch: Sequence[np.ndarray], policy: MaskingPolicy,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    clean = np.stack([downsample(v, policy.stack_factor) for v in batch])
    results = [apply_masking(steps, policy, rng) for steps in clean]
    corrupted = np.stack([r.corrupted for r in results])
    mask = np.stack([r.mask for r in results])
    return clean, corrupted, mask


def pretrain(model: EncoderModel, corpus: Sequence[Spectrogram], policy: MaskingPolicy,
             train: TrainConfig) -> Tuple[EncoderModel, List[float]]:
    """
    Masked-prediction pre-training with an L1 reconstruction loss.

    The loss covers every step unless the encoder config sets masked_only_loss.
    Shuffling and masking draw from one generator seeded by train.seed.

    Args:
        model: Encoder to train in place
        corpus: Unlabeled spectrograms, all of the same shape
        policy: Masking parameters
        train: Epochs, batch size, learning rate, momentum, seed

    Returns:
        The model and the per-epoch mean loss
    """
    if not corpus:
        raise ValueError("pre-training corpus is empty")
    if policy.stack_factor != model.config.stack_factor:
        raise ConfigError("masking and encoder stack_factor differ")
    rng = np.random.default_rng(train.seed)
    values = [s.values for s in corpus]
    model.set_trainable(True)
    opt = tc.SGD(model.parameters(), lr=train.lr, momentum=train.momentum, clip_norm=train.clip_norm)
    history: List[float] = []

    for epoch in range(train.epochs):
        order = rng.permutation(len(values))
        total, batches = 0.0, 0
        for start in range(0, len(order), train.batch_size):
            batch = [values[i] for i in order[start:start + train.batch_size]]
            clean, corrupted, mask = _masked_batch(batch, policy, rng)
            opt.zero_grad()
            prediction = model.reconstruct(Tensor(corrupted))
            weights = mask[..., None] if model.config.masked_only_loss else None
            loss = tc.l1_loss(prediction, clean, weights=weights)
            loss.backward()
            opt.step()
            total += float(loss.data)
            batches += 1
        epoch_loss = total / batches
        ensure_finite(np.asarray(epoch_loss), f"pre-training loss at epoch {epoch + 1}")
        history.append(epoch_loss)
        logger.info(f"Pre-training epoch {epoch + 1}/{train.epochs}: L1 {epoch_loss:.4f}")

    model.set_trainable(False)
    model.seed = train.seed
    return model, history


def reconstruction_error(model: EncoderModel, corpus: Sequence[Spectrogram], policy: MaskingPolicy,
                         seed: int) -> float:
    """Mean L1 error on the masked steps of held-out spectrograms."""
    rng = np.random.default_rng(seed)
    clean, corrupted, mask = _masked_batch([s.values for s in corpus], policy, rng)
    prediction = model.reconstruct(Tensor(corrupted)).data
    err = np.abs(prediction - clean)[mask]
    return float(err.mean()) if err.size else 0.0
