"""
Dataset ingestion and the task-incremental stream.

MNIST is read from the canonical IDX files and CIFAR-100 from its canonical
binary records (both optionally gzip-compressed). Classes are split into
K contiguous blocks, one per task, and an epoch is redefined as the
processing of as many samples as the whole training set holds, drawn from
the current task only.
"""
import dataclasses
import gzip
import logging
import math
import os
import struct
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from plasticity_control import constants, errors

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3074
CIFAR_IMAGE_SHAPE = (3, 32, 32)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR100_FILES = {"train": "train.bin", "test": "test.bin"}
CIFAR100_SUBDIR = "cifar-100-binary"


@dataclasses.dataclass(frozen=True)
class Samples:
    """Images as float32 N×C×H×W scaled to [0, 1] and int64 labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def select(self, index: np.ndarray) -> "Samples":
        return Samples(self.images[index], self.labels[index])


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as handle:
        data = handle.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _resolve(path: str) -> str:
    """Accept the plain file or its ``.gz`` sibling."""
    for candidate in (path, f"{path}.gz"):
        if os.path.isfile(candidate):
            return candidate
    raise errors.DataError(f"dataset file not found: {path}")


def _idx_payload(data: bytes, path: str, magic: int, ndim: int) -> Tuple[Tuple[int, ...], bytes]:
    header_size = 4 * (1 + ndim)
    if len(data) < header_size:
        raise errors.FormatError(f"{path}: truncated IDX header ({len(data)} bytes)")
    observed, *dims = struct.unpack(f">{1 + ndim}I", data[:header_size])
    if observed != magic:
        raise errors.FormatError(
            f"{path}: IDX magic 0x{observed:08x}, expected 0x{magic:08x}"
        )
    expected = int(np.prod(dims))
    payload = data[header_size:]
    if len(payload) != expected:
        raise errors.FormatError(
            f"{path}: IDX length error, expected {expected} bytes after header, found {len(payload)}"
        )
    return tuple(dims), payload


def load_mnist_idx(images_path: str, labels_path: str) -> Samples:
    """Parse an IDX image/label file pair.

    Raises:
        FormatError: on a wrong magic number, a truncated file or
        disagreeing counts.
    """
    image_dims, pixels = _idx_payload(_read_bytes(images_path), images_path, IDX_IMAGES_MAGIC, 3)
    (count,), labels = _idx_payload(_read_bytes(labels_path), labels_path, IDX_LABELS_MAGIC, 1)
    if count != image_dims[0]:
        raise errors.FormatError(
            f"{images_path} holds {image_dims[0]} images but {labels_path} {count} labels"
        )
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(image_dims[0], 1, *image_dims[1:])
    return Samples(
        images=(images.astype(np.float32) / 255.0),
        labels=np.frombuffer(labels, dtype=np.uint8).astype(np.int64),
    )


def load_cifar100_bin(path: str) -> Samples:
    """Parse CIFAR-100 binary records (coarse byte, fine byte, 3072 pixels).

    Fine labels are used.

    Raises:
        FormatError: if the file length is not a multiple of the record size.
    """
    data = _read_bytes(path)
    if len(data) % CIFAR_RECORD_BYTES:
        raise errors.FormatError(
            f"{path}: length {len(data)} is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    return Samples(
        images=records[:, 2:].reshape(-1, *CIFAR_IMAGE_SHAPE).astype(np.float32) / 255.0,
        labels=records[:, 1].astype(np.int64),
    )


def pad_images(samples: Samples, size: int) -> Samples:
    """Zero-pad images symmetrically to size×size."""
    height, width = samples.images.shape[2:]
    if height == size and width == size:
        return samples
    if height > size or width > size:
        raise errors.ConfigurationError(f"cannot pad {height}×{width} images to {size}")
    top, left = (size - height) // 2, (size - width) // 2
    images = np.pad(
        samples.images,
        ((0, 0), (0, 0), (top, size - height - top), (left, size - width - left)),
    )
    return Samples(images, samples.labels)


def load_dataset(name: str, data_dir: str) -> Tuple[Samples, Samples]:
    """Canonical (train, test) splits of ``name`` found under ``data_dir``.

    Raises:
        DataError: if the directory or a file is missing.
    """
    if not data_dir or not os.path.isdir(data_dir):
        raise errors.DataError(f"data directory not found: {data_dir!r}")
    if name == constants.MNIST:
        splits = [
            load_mnist_idx(
                _resolve(os.path.join(data_dir, images)), _resolve(os.path.join(data_dir, labels))
            )
            for images, labels in (MNIST_FILES["train"], MNIST_FILES["test"])
        ]
    elif name == constants.CIFAR100:
        root = os.path.join(data_dir, CIFAR100_SUBDIR)
        root = root if os.path.isdir(root) else data_dir
        splits = [
            load_cifar100_bin(_resolve(os.path.join(root, CIFAR100_FILES[split])))
            for split in ("train", "test")
        ]
    else:
        raise errors.ConfigurationError(f"unknown dataset {name!r}; expected one of {constants.DATASETS}")
    logger.info(f"Loaded {name}: {len(splits[0])} train / {len(splits[1])} test samples")
    return splits[0], splits[1]


def subsample_per_class(samples: Samples, per_class: int, rng: np.random.Generator) -> Samples:
    """Keep at most ``per_class`` randomly chosen samples of every class."""
    keep = []
    for label in np.unique(samples.labels):
        index = np.flatnonzero(samples.labels == label)
        keep.append(np.sort(rng.permutation(index)[:per_class]))
    return samples.select(np.sort(np.concatenate(keep)))


@dataclasses.dataclass(frozen=True)
class AugmentationPolicy:
    padding: int = 4
    horizontal_flip: bool = False


MNIST_POLICY = AugmentationPolicy(padding=4, horizontal_flip=False)
CIFAR100_POLICY = AugmentationPolicy(padding=4, horizontal_flip=True)


def policy_for(dataset: str) -> AugmentationPolicy:
    return CIFAR100_POLICY if dataset == constants.CIFAR100 else MNIST_POLICY


@dataclasses.dataclass
class Task:
    index: int
    classes: Tuple[int, ...]
    train: Samples
    validation: Samples


@dataclasses.dataclass
class TaskStream:
    tasks: List[Task]
    policy: AugmentationPolicy
    num_classes: int
    total_train_count: int

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[Task]:
        return iter(self.tasks)

    def __getitem__(self, index: int) -> Task:
        return self.tasks[index]


def split_tasks(
    train: Samples,
    validation: Samples,
    num_tasks: int,
    class_order: Optional[Sequence[int]] = None,
    policy: AugmentationPolicy = MNIST_POLICY,
) -> TaskStream:
    """Contiguous class blocks (in ``class_order``, default ascending) per task.

    Raises:
        ConfigurationError: if the class count is not divisible by K.
    """
    classes = list(class_order) if class_order else sorted(np.unique(train.labels).tolist())
    if num_tasks < 1 or len(classes) % num_tasks:
        raise errors.ConfigurationError(
            f"{len(classes)} classes cannot be split into {num_tasks} equal tasks"
        )
    if len(set(classes)) != len(classes):
        raise errors.ConfigurationError(f"class order {classes} repeats a class")
    width = len(classes) // num_tasks
    tasks = []
    for k in range(num_tasks):
        block = tuple(int(c) for c in classes[k * width : (k + 1) * width])
        tasks.append(
            Task(
                index=k,
                classes=block,
                train=train.select(np.flatnonzero(np.isin(train.labels, block))),
                validation=validation.select(np.flatnonzero(np.isin(validation.labels, block))),
            )
        )
    num_classes = int(max(classes)) + 1
    return TaskStream(
        tasks=tasks, policy=policy, num_classes=num_classes, total_train_count=len(train)
    )


def crop(images: np.ndarray, offsets: np.ndarray, padding: int) -> np.ndarray:
    """Zero-pad by ``padding`` and cut each image back at its (row, col) offset.

    Offset (padding, padding) returns the original image.
    """
    num, _, height, width = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    rows = offsets[:, 0, None] + np.arange(height)[None, :]
    cols = offsets[:, 1, None] + np.arange(width)[None, :]
    batch = np.arange(num)[:, None, None]
    # N×H×W×C after advanced indexing, back to N×C×H×W
    cropped = padded.transpose(0, 2, 3, 1)[batch, rows[:, :, None], cols[:, None, :]]
    return np.ascontiguousarray(cropped.transpose(0, 3, 1, 2))


def flip_horizontal(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def augment(images: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random crop with zero padding, plus random horizontal flips if enabled."""
    if policy.padding:
        offsets = rng.integers(0, 2 * policy.padding + 1, size=(len(images), 2))
        images = crop(images, offsets, policy.padding)
    if policy.horizontal_flip:
        flips = rng.random(len(images)) < 0.5
        images = images.copy()
        images[flips] = flip_horizontal(images[flips])
    return images


@dataclasses.dataclass(frozen=True)
class EpochPlan:
    """One redefined epoch processes ``total_train_count`` task samples."""

    total_train_count: int
    batch_size: int

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.total_train_count < 1:
            raise errors.ConfigurationError("batch size and epoch length must be positive")

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.total_train_count / self.batch_size)


def epoch_indices(task_size: int, plan: EpochPlan, rng: np.random.Generator) -> np.ndarray:
    """Sample order for one epoch, reshuffled at each pass over the task."""
    passes = math.ceil(plan.total_train_count / task_size)
    order = np.concatenate([rng.permutation(task_size) for _ in range(passes)])
    return order[: plan.total_train_count]


def epoch_iterator(
    task: Task, plan: EpochPlan, rng: np.random.Generator
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``plan.steps_per_epoch`` (images, labels) batches from ``task``."""
    if len(task.train) == 0:
        raise errors.DataError(f"task {task.index} has no training samples")
    order = epoch_indices(len(task.train), plan, rng)
    for start in range(0, len(order), plan.batch_size):
        index = order[start : start + plan.batch_size]
        yield task.train.images[index], task.train.labels[index]
