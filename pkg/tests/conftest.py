import gzip
import os
import struct
from typing import Callable

import numpy as np
import pytest

from plasticity_control import constants
from plasticity_control.datasets import MNIST_FILES, AugmentationPolicy, Samples, split_tasks
from plasticity_control.nn_layers import ModelSpec, init_params

NO_AUGMENTATION = AugmentationPolicy(padding=0, horizontal_flip=False)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec() -> ModelSpec:
    """One conv layer of two filters, one dense layer of three units, four classes."""
    return ModelSpec(
        conv_channels=(2,),
        dense_widths=(3,),
        num_classes=4,
        input_shape=(1, 4, 4),
        dropout_rate=0.0,
    )


@pytest.fixture
def tiny_params(tiny_spec, rng):
    return init_params(tiny_spec, rng, dtype=np.float64)


def make_samples(
    num_classes: int, per_class: int, size: int, rng: np.random.Generator, signal: float = 1.0
) -> Samples:
    """Images whose class is encoded by a bright row, plus noise."""
    labels = np.repeat(np.arange(num_classes), per_class)
    images = 0.1 * rng.random((len(labels), 1, size, size))
    for index, label in enumerate(labels):
        images[index, 0, label % size, :] += signal
    return Samples(images=images.astype(np.float32), labels=labels.astype(np.int64))


@pytest.fixture
def make_stream(rng) -> Callable:
    def _make(num_classes=4, num_tasks=2, per_class=8, size=8):
        train = make_samples(num_classes, per_class, size, rng)
        validation = make_samples(num_classes, per_class // 2, size, rng)
        return split_tasks(train, validation, num_tasks, policy=NO_AUGMENTATION)

    return _make


def write_idx_images(path: str, images: np.ndarray, compress: bool = False) -> None:
    header = struct.pack(">4I", 0x00000803, *images.shape)
    payload = header + images.astype(np.uint8).tobytes()
    with open(path, "wb") as handle:
        handle.write(gzip.compress(payload) if compress else payload)


def write_idx_labels(path: str, labels: np.ndarray, compress: bool = False) -> None:
    payload = struct.pack(">2I", 0x00000801, len(labels)) + labels.astype(np.uint8).tobytes()
    with open(path, "wb") as handle:
        handle.write(gzip.compress(payload) if compress else payload)


@pytest.fixture
def mnist_dir(tmp_path, rng) -> str:
    """Miniature MNIST (28×28, ten classes) in the canonical IDX layout."""
    folder = tmp_path / "mnist"
    folder.mkdir()
    for split, per_class in (("train", 6), ("test", 3)):
        labels = np.repeat(np.arange(10), per_class)
        images = rng.integers(0, 40, size=(len(labels), 28, 28))
        for index, label in enumerate(labels):
            images[index, 2 * label + 2, 4:24] = 255
        images_name, labels_name = MNIST_FILES[split]
        write_idx_images(os.path.join(folder, images_name), images)
        write_idx_labels(os.path.join(folder, labels_name), labels)
    return str(folder)


@pytest.fixture(scope="session")
def desk_data_dir():
    """Real MNIST for the desk-scale runs, if available."""
    data_dir = os.environ.get(constants.DATA_DIR_ENV, "")
    images = os.path.join(data_dir, MNIST_FILES["train"][0])
    if not data_dir or not (os.path.isfile(images) or os.path.isfile(f"{images}.gz")):
        pytest.skip(f"MNIST not found under ${constants.DATA_DIR_ENV}")
    return data_dir
