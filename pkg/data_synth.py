"""
Synthetic bona-fide/spoof spectrogram corpora, corpus files, and image ingest.

Every example is a smooth random field (a sum of 2D Gaussian bumps) plus three
harmonic ridges along evenly spaced bin rows. Bona-fide ridges carry a slow
frame-wise amplitude modulation; spoof ridges carry a fast, phase-jittered
one. Example i of a split depends only on (seed, split, i).
"""

import json
import logging
from pathlib import Path
from typing import Iterable, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from exceptions import CorpusFormatError, ShapeError
from models import DEFAULT_VALUE_RANGE, VALUE_BOUND, CorpusSpec, Label, LabeledExample, Spectrogram

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "eval")
_UNLABELED_STREAM = 7
UNLABELED_BUMPS = 10

# Ridge construction constants, frozen after calibration.
RIDGE_COUNT = 3
RIDGE_WIDTH_BINS = 0.8
MODULATION_DEPTH = 0.6
SLOW_PERIOD_RANGE = (32.0, 64.0)
FAST_PERIOD_RANGE = (2.5, 4.0)
PHASE_JITTER_STD = 1.0

MAX_IMAGE_PIXELS = 4096 * 4096
IMAGE_CLASS_FOLDERS = ((Label.BONA_FIDE, "bonafide"), (Label.SPOOF, "spoof"))


class CorpusSplits(NamedTuple):
    """Train/dev/eval lists of a labeled corpus."""
    train: List[LabeledExample]
    dev: List[LabeledExample]
    eval: List[LabeledExample]


def _synthesize(rng: np.random.Generator, label: int, frames: int, bins: int, bumps: int,
                class_separation: float, noise_level: float) -> np.ndarray:
    """
    Draw one spectrogram. The draw sequence is identical for both labels, so
    class_separation=0 makes the class-conditional distributions equal.
    """
    t = np.arange(frames, dtype=np.float64)[:, None]
    f = np.arange(bins, dtype=np.float64)[None, :]

    values = np.zeros((frames, bins))
    for _ in range(bumps):
        ct, cf = rng.uniform(0, frames), rng.uniform(0, bins)
        st, sf = rng.uniform(6.0, 24.0), rng.uniform(2.0, 6.0)
        amp = rng.uniform(-3.0, 3.0)
        values += amp * np.exp(-0.5 * ((t - ct) / st) ** 2 - 0.5 * ((f - cf) / sf) ** 2)

    base = rng.uniform(0.08, 0.2) * bins
    spacing = rng.uniform(0.25, 0.31) * bins
    rows = base + spacing * np.arange(RIDGE_COUNT)
    profile = np.exp(-0.5 * ((f[0][None, :] - rows[:, None]) / RIDGE_WIDTH_BINS) ** 2).sum(axis=0)

    ridge_amp = rng.uniform(2.0, 3.0)
    slow_period = rng.uniform(*SLOW_PERIOD_RANGE)
    fast_period = rng.uniform(*FAST_PERIOD_RANGE)
    phase = rng.uniform(0.0, 2 * np.pi)
    jitter = rng.normal(0.0, PHASE_JITTER_STD, size=frames)

    c = class_separation if label == Label.SPOOF.value else 0.0
    freq = (1.0 - c) / slow_period + c / fast_period
    tt = t[:, 0]
    modulation = 1.0 + MODULATION_DEPTH * np.sin(2 * np.pi * freq * tt + phase + c * jitter)
    values += ridge_amp * modulation[:, None] * profile[None, :]

    values += noise_level * rng.standard_normal((frames, bins))
    return np.clip(values, -VALUE_BOUND, VALUE_BOUND)


def generate_split(spec: CorpusSpec, split: str) -> List[LabeledExample]:
    """
    Generate one split of the labeled corpus.

    Args:
        spec: Corpus parameters
        split: "train", "dev" or "eval"

    Returns:
        Class-balanced examples (labels alternate 0, 1, 0, ...)
    """
    stream = SPLITS.index(split)
    count = {"train": spec.n_train, "dev": spec.n_dev, "eval": spec.n_eval}[split]
    examples = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, stream, i]))
        label = i % 2
        values = _synthesize(rng, label, spec.frames, spec.bins, spec.bumps,
                             spec.class_separation, spec.noise_level)
        examples.append(LabeledExample(Spectrogram(values), label))
    return examples


def generate_labeled_corpus(spec: CorpusSpec) -> CorpusSplits:
    """
    Generate the train/dev/eval splits. Each split reads its own seed stream.

    Args:
        spec: Corpus parameters

    Returns:
        The three splits
    """
    splits = CorpusSplits(*(generate_split(spec, name) for name in SPLITS))
    logger.info(f"Generated labeled corpus: {len(splits.train)} train, "
                f"{len(splits.dev)} dev, {len(splits.eval)} eval (seed {spec.seed})")
    return splits


def generate_unlabeled_corpus(n: int, seed: int, frames: int = 128, bins: int = 40,
                              noise_level: float = 0.5, class_separation: float = 1.0) -> List[Spectrogram]:
    """
    Generate spectrograms for self-supervised pre-training.

    Labels are drawn uniformly and discarded; the bump count differs from the
    labeled corpus to give a mild domain shift.
    """
    corpus = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _UNLABELED_STREAM, i]))
        label = int(rng.integers(2))
        corpus.append(Spectrogram(_synthesize(rng, label, frames, bins, UNLABELED_BUMPS,
                                              class_separation, noise_level)))
    return corpus


def stack_values(items: Iterable[Union[LabeledExample, Spectrogram]]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Batch examples into (N, T, F) values and (N,) labels (None for bare spectrograms)."""
    items = list(items)
    if not items:
        return np.zeros((0, 0, 0)), None
    labeled = isinstance(items[0], LabeledExample)
    specs = [ex.spec for ex in items] if labeled else items
    shapes = {s.values.shape for s in specs}
    if len(shapes) > 1:
        raise ShapeError("stack_values", *sorted(shapes))
    values = np.stack([s.values for s in specs])
    if labeled:
        return values, np.array([ex.label for ex in items], dtype=np.int64)
    return values, None


def save_corpus(examples: Iterable[Union[LabeledExample, Spectrogram]], path: Path) -> None:
    """
    Write one JSON record per line. Unlabeled spectrograms omit "label".

    Args:
        examples: Labeled examples or bare spectrograms
        path: Destination JSONL file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w") as f:
        for item in examples:
            f.write(json.dumps(item.to_record()) + "\n")
            count += 1
    logger.info(f"Saved {count} records to {path}")


def _parse_record(line: str, lineno: int, bins: Optional[int]) -> Tuple[Spectrogram, Optional[int]]:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"invalid JSON ({e.msg})", lineno) from None
    if not isinstance(record, dict) or "shape" not in record or "values" not in record:
        raise CorpusFormatError("record needs 'shape' and 'values'", lineno)
    shape = record["shape"]
    if not isinstance(shape, list) or len(shape) != 2 or any(not isinstance(s, int) or s < 1 for s in shape):
        raise CorpusFormatError(f"shape must be [T, F] of positive integers, got {shape}", lineno)
    if bins is not None and shape[1] != bins:
        raise CorpusFormatError(f"expected {bins} bins, found {shape[1]}", lineno)
    values = np.asarray(record["values"], dtype=np.float64)
    if values.ndim != 1 or values.size != shape[0] * shape[1]:
        raise CorpusFormatError(f"expected {shape[0] * shape[1]} values for shape {shape}, found {values.size}", lineno)
    if not np.all(np.isfinite(values)):
        raise CorpusFormatError("non-finite values", lineno)
    label = record.get("label")
    if label is not None and label not in (0, 1):
        raise CorpusFormatError(f"label must be 0 or 1, got {label!r}", lineno)
    value_range = record.get("value_range", DEFAULT_VALUE_RANGE)
    if not isinstance(value_range, (list, tuple)) or len(value_range) != 2:
        raise CorpusFormatError(f"value_range must be [low, high], got {value_range!r}", lineno)
    try:
        return Spectrogram(values.reshape(shape), tuple(value_range)), label
    except (TypeError, ValueError) as e:
        raise CorpusFormatError(f"invalid value_range {value_range!r} ({e})", lineno) from None


def _read_records(path: Path, bins: Optional[int]) -> Iterator[Tuple[Spectrogram, Optional[int], int]]:
    # The first record fixes the frame count for the whole file.
    frames = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            spec, label = _parse_record(line, lineno, bins)
            if frames is None:
                frames = spec.frames
            elif spec.frames != frames:
                raise CorpusFormatError(f"expected {frames} frames, found {spec.frames}", lineno)
            yield spec, label, lineno


def load_corpus(path: Path, bins: Optional[int] = None) -> List[LabeledExample]:
    """
    Read a labeled JSONL corpus.

    Args:
        path: JSONL file written by save_corpus
        bins: Expected bin count, or None to skip the check

    Returns:
        Examples in file order; an empty file gives an empty list

    Raises:
        CorpusFormatError: On the first malformed record, with its line number.
            Every record must have the frame count of the first one.
    """
    examples = []
    for spec, label, lineno in _read_records(path, bins):
        if label is None:
            raise CorpusFormatError("missing 'label' in a labeled corpus", lineno)
        examples.append(LabeledExample(spec, label))
    return examples


def load_unlabeled_corpus(path: Path, bins: Optional[int] = None) -> List[Spectrogram]:
    """Read a JSONL corpus, ignoring labels if present."""
    return [spec for spec, _, _ in _read_records(path, bins)]


def load_spectrogram_image(path: Path, value_range: Tuple[float, float] = DEFAULT_VALUE_RANGE,
                           bins: Optional[int] = None) -> Spectrogram:
    """
    Ingest an externally rendered grayscale spectrogram image.

    The image is read with frequency on the vertical axis (low bins at the
    bottom) and time on the horizontal axis; 8-bit intensities map linearly
    onto value_range, which the returned spectrogram carries as metadata.

    Args:
        path: Image file readable by Pillow
        value_range: (low, high) values for intensities 0 and 255
        bins: Expected image height, or None

    Returns:
        The spectrogram with frames = image width

    Raises:
        CorpusFormatError: If the image cannot be read or has the wrong size
    """
    try:
        with Image.open(path) as image:
            if image.width * image.height > MAX_IMAGE_PIXELS:
                raise CorpusFormatError(f"{path}: image too large ({image.width}x{image.height})")
            gray = np.asarray(image.convert("L"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as e:
        logger.error(f"Image ingest error for {path}: {e}")
        raise CorpusFormatError(f"{path}: unreadable image ({e})") from e
    if bins is not None and gray.shape[0] != bins:
        raise CorpusFormatError(f"{path}: expected {bins} bins (image height), found {gray.shape[0]}")
    low, high = value_range
    values = low + (high - low) * gray / 255.0
    return Spectrogram(np.flipud(values).T.copy(), (low, high))


def load_image_split(directory: Path, bins: Optional[int] = None,
                     value_range: Tuple[float, float] = DEFAULT_VALUE_RANGE) -> List[LabeledExample]:
    """
    Read a labeled split rendered as images.

    The directory holds bonafide/*.png (label 0) and spoof/*.png (label 1);
    files are read in sorted name order, bona-fide first.

    Raises:
        CorpusFormatError: If a class folder is missing or widths differ
    """
    directory = Path(directory)
    examples = []
    frames = None
    for label, name in IMAGE_CLASS_FOLDERS:
        folder = directory / name
        if not folder.is_dir():
            raise CorpusFormatError(f"{directory}: missing class folder '{folder.name}'")
        for path in sorted(folder.glob("*.png")):
            spec = load_spectrogram_image(path, value_range, bins)
            if frames is None:
                frames = spec.frames
            elif spec.frames != frames:
                raise CorpusFormatError(f"{path}: expected {frames} frames (image width), found {spec.frames}")
            examples.append(LabeledExample(spec, label.value))
    logger.info(f"Imported {len(examples)} images from {directory}")
    return examples
