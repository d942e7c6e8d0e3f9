"""Digit-image parsing, toy bag tasks with ground-truth evidence, and bag files.

Three synthetic bag-classification tasks are generated from a pool of digit
images: FOUR_BAGS (presence of 8 and/or 9 picks one of four classes), POS_NEG
(more unique digits from {4,6,8} than from {5,7,9}) and ADJACENT_PAIRS (a
consecutive pair among 0..4 present). Each task comes with per-instance
evidence scores in {-1, 0, +1} per class, used to score explanations.

Bags of externally produced feature vectors are read and written through a
small directory format (meta.json + features.bin), so the same engine runs on
feature bags that did not originate from the built-in digit pipeline.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base class for IDX parsing failures."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class BagFormatError(ValueError):
    """Malformed bag directory (meta/blob mismatch or bad JSON)."""


def _read_exact(f, n: int, path, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise IdxTruncatedError(
            f"{path}: truncated while reading {what} ({len(data)} of {n} bytes)"
        )
    return data


def _read_idx(path, expected_magic: int, n_dims: int):
    path = Path(path)
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">i", _read_exact(f, 4, path, "magic"))
        if magic != expected_magic:
            raise IdxMagicError(
                f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
            )
        dims = struct.unpack(
            f">{n_dims}i", _read_exact(f, 4 * n_dims, path, "dimensions")
        )
        count = int(np.prod(dims))
        payload = _read_exact(f, count, path, f"{count} payload bytes")
        if f.read(1):
            raise IdxTruncatedError(f"{path}: trailing bytes after payload")
    return dims, np.frombuffer(payload, dtype=np.uint8)


def load_mnist_idx(images_path, labels_path):
    """Load an IDX image/label file pair.

    Returns (images, digits): images as (N, 784) float64 scaled to [0, 1],
    digits as (N,) int64.
    """
    img_dims, img_bytes = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    lbl_dims, lbl_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    n, rows, cols = img_dims
    if n != lbl_dims[0]:
        raise IdxCountMismatchError(
            f"image count {n} ({images_path}) != label count {lbl_dims[0]} "
            f"({labels_path})"
        )
    images = img_bytes.reshape(n, rows * cols).astype(np.float64) / 255.0
    return images, lbl_bytes.astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write (N, 28, 28) uint8 images in IDX format."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


class ToyTask(Enum):
    FOUR_BAGS = "4-bags"
    POS_NEG = "pos-neg"
    ADJACENT_PAIRS = "adjacent-pairs"

    @property
    def n_classes(self) -> int:
        return 4 if self is ToyTask.FOUR_BAGS else 2


POSITIVE_DIGITS = (4, 6, 8)
NEGATIVE_DIGITS = (5, 7, 9)


def task_label(task: ToyTask, digits) -> int:
    """Bag label from the digits present in the bag."""
    present = set(int(d) for d in digits)
    if task is ToyTask.FOUR_BAGS:
        has8, has9 = 8 in present, 9 in present
        if has8 and has9:
            return 3
        if has9:
            return 2
        if has8:
            return 1
        return 0
    if task is ToyTask.POS_NEG:
        n_pos = len(present.intersection(POSITIVE_DIGITS))
        n_neg = len(present.intersection(NEGATIVE_DIGITS))
        return 1 if n_pos > n_neg else 0
    if task is ToyTask.ADJACENT_PAIRS:
        pairs = ((0, 1), (1, 2), (2, 3), (3, 4))
        return 1 if any(a in present and b in present for a, b in pairs) else 0
    raise ValueError(f"unknown task: {task!r}")


@dataclass
class Bag:
    """An ordered collection of instance feature vectors with one label."""

    instance_features: np.ndarray  # (K, D) float64
    instance_ids: list[int]
    label: int
    task_metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.instance_features = np.asarray(self.instance_features, dtype=np.float64)
        if self.instance_features.ndim != 2 or self.instance_features.shape[0] < 1:
            raise ValueError(
                f"bag features must be (K>=1, D), got {self.instance_features.shape}"
            )
        if len(self.instance_ids) != self.instance_features.shape[0]:
            raise ValueError("instance_ids length must equal K")
        if len(set(self.instance_ids)) != len(self.instance_ids):
            raise ValueError("instance_ids must be unique within a bag")

    @property
    def size(self) -> int:
        return self.instance_features.shape[0]

    @property
    def dim(self) -> int:
        return self.instance_features.shape[1]

    @property
    def digits(self) -> list[int] | None:
        d = self.task_metadata.get("digits")
        return list(d) if d is not None else None


@dataclass
class EvidenceVector:
    scores: np.ndarray  # (K,) values in {-1, 0, +1}
    target_class: int


def evidence_scores(task: ToyTask, bag: Bag, target_class: int) -> EvidenceVector:
    """Ground-truth per-instance evidence for one class of a synthetic bag."""
    digits = bag.digits
    if digits is None:
        raise ValueError("bag carries no per-instance digit metadata")
    present = set(digits)
    scores = np.zeros(len(digits))
    for k, d in enumerate(digits):
        scores[k] = _evidence_of_digit(task, d, present, target_class)
    return EvidenceVector(scores=scores, target_class=target_class)


def _evidence_of_digit(task: ToyTask, digit: int, present: set, c: int) -> float:
    if task is ToyTask.FOUR_BAGS:
        if digit == 8:
            return 1.0 if c in (1, 3) else -1.0
        if digit == 9:
            return 1.0 if c in (2, 3) else -1.0
        return 0.0
    if task is ToyTask.POS_NEG:
        if digit in POSITIVE_DIGITS:
            return 1.0 if c == 1 else -1.0
        if digit in NEGATIVE_DIGITS:
            return -1.0 if c == 1 else 1.0
        return 0.0
    if task is ToyTask.ADJACENT_PAIRS:
        if 0 <= digit <= 4:
            neighbours = {n for n in (digit - 1, digit + 1) if 0 <= n <= 4}
            if neighbours & present:
                return 1.0 if c == 1 else -1.0
        return 0.0
    raise ValueError(f"unknown task: {task!r}")


@dataclass
class FeaturePool:
    """Featurized digit images instances are drawn from."""

    features: np.ndarray  # (N, D) float64
    digits: np.ndarray  # (N,) int64
    image_indices: np.ndarray  # (N,) indices into the originating image array
    source_split: str = ""

    def __post_init__(self):
        self.by_digit = [np.flatnonzero(self.digits == d) for d in range(10)]


def sample_bag(
    task: ToyTask,
    pool: FeaturePool,
    bag_size: int,
    rng: np.random.Generator,
    first_instance_id: int = 0,
) -> Bag:
    """Draw one bag: a digit subset at probability 0.5 each, then uniform
    draws with replacement from pool images of those digits."""
    for d in range(10):
        if len(pool.by_digit[d]) == 0:
            raise ValueError(f"pool has no images of digit {d}")
    while True:
        subset = np.flatnonzero(rng.random(10) < 0.5)
        if subset.size:
            break
    candidates = np.concatenate([pool.by_digit[d] for d in subset])
    candidates.sort()
    picks = candidates[rng.integers(0, candidates.size, size=bag_size)]
    digits = pool.digits[picks]
    return Bag(
        instance_features=pool.features[picks],
        instance_ids=list(range(first_instance_id, first_instance_id + bag_size)),
        label=task_label(task, digits),
        task_metadata={
            "digits": [int(d) for d in digits],
            "image_indices": [int(i) for i in picks],
            "source_split": pool.source_split,
        },
    )


def _bag_rng(seed: int, split_index: int, bag_index: int) -> np.random.Generator:
    # counter-based stream per bag: parallel generation matches serial output
    return np.random.default_rng(np.random.SeedSequence((seed, split_index, bag_index)))


def make_dataset(
    task: ToyTask,
    train_pool: FeaturePool,
    test_pool: FeaturePool,
    sizes: tuple[int, int, int] = (2000, 500, 1000),
    bag_size: int = 30,
    seed: int = 0,
):
    """Sample train/val/test bag collections, deterministic in the seed.

    Train and validation bags draw from the train pool, test bags from the
    held-out test pool.
    """
    splits = []
    for split_index, (n_bags, pool) in enumerate(
        zip(sizes, (train_pool, train_pool, test_pool))
    ):
        bags = [
            sample_bag(task, pool, bag_size, _bag_rng(seed, split_index, b))
            for b in range(n_bags)
        ]
        splits.append(bags)
    return tuple(splits)


def write_bag(bag: Bag, directory) -> None:
    """Serialize one bag: meta.json + features.bin (row-major float32 LE)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "n_instances": bag.size,
        "dim": bag.dim,
        "label": int(bag.label),
        "instance_ids": [int(i) for i in bag.instance_ids],
    }
    if bag.task_metadata:
        meta["task_metadata"] = bag.task_metadata
    (directory / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    blob = bag.instance_features.astype("<f4").tobytes()
    (directory / "features.bin").write_bytes(blob)


def read_bag(directory) -> Bag:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except json.JSONDecodeError as exc:
        raise BagFormatError(f"{directory}/meta.json: malformed JSON: {exc}") from exc
    n, d = meta["n_instances"], meta["dim"]
    blob = (directory / "features.bin").read_bytes()
    expected = n * d * 4
    if len(blob) != expected:
        raise BagFormatError(
            f"{directory}/features.bin holds {len(blob)} bytes, "
            f"expected {expected} for {n}x{d} float32"
        )
    features = np.frombuffer(blob, dtype="<f4").reshape(n, d).astype(np.float64)
    return Bag(
        instance_features=features,
        instance_ids=list(meta["instance_ids"]),
        label=int(meta["label"]),
        task_metadata=meta.get("task_metadata", {}),
    )
