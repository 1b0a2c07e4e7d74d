"""
Dataset service for ACT Lab.
IDX ingestion and writing, seeded Gaussian toy data, and image augmentation.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Optional, Sequence, Union

import numpy as np

from .integrity import atomic_write_bytes, get_digest_service

if TYPE_CHECKING:
    from .validation import ExperimentConfig

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_UBYTE = 0x08

Seed = Union[int, Sequence[int]]


class DatasetError(Exception):
    """Exception raised for malformed, inconsistent or unusable datasets."""

    pass


@dataclass
class Dataset:
    """
    Labeled inputs in [0, 1].

    Images are stored N x C x H x W; vector data N x D. ``provenance`` records
    the synthetic parameters or the source file digests.
    """

    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    provenance: dict[str, Any] = field(default_factory=dict)
    num_classes: Optional[int] = None

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.inputs.shape[0] if self.inputs.ndim else 0
        if n < 1:
            raise DatasetError(f"Dataset '{self.split}' is empty")
        if self.labels.shape != (n,):
            raise DatasetError(
                f"Dataset '{self.split}': {n} inputs but labels of shape {self.labels.shape}"
            )
        if not np.isfinite(self.inputs).all():
            raise DatasetError(f"Dataset '{self.split}': inputs must be finite")
        if self.inputs.min() < 0.0 or self.inputs.max() > 1.0:
            raise DatasetError(f"Dataset '{self.split}': inputs must lie in [0, 1]")
        if self.labels.min() < 0:
            raise DatasetError(f"Dataset '{self.split}': negative label")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.max() >= self.num_classes:
            raise DatasetError(
                f"Dataset '{self.split}': label {int(self.labels.max())} >= {self.num_classes} classes"
            )

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.inputs[indices],
            self.labels[indices],
            self.split,
            dict(self.provenance),
            self.num_classes,
        )

    def take(self, limit: Optional[int]) -> "Dataset":
        if limit is None or limit >= len(self):
            return self
        return self.subset(np.arange(limit))

    def reshaped(self, shape: Sequence[int]) -> "Dataset":
        """Same examples with each input reshaped, e.g. 1x28x28 images to 784-vectors."""
        shape = tuple(int(d) for d in shape)
        if int(np.prod(shape)) != int(np.prod(self.input_shape)):
            raise DatasetError(f"Cannot reshape inputs {self.input_shape} to {shape}")
        return Dataset(
            self.inputs.reshape((len(self),) + shape),
            self.labels,
            self.split,
            dict(self.provenance),
            self.num_classes,
        )


# IDX format


def encode_idx(array: np.ndarray) -> bytes:
    """
    Serialize a uint8 array as IDX: zero bytes, type code, rank, big-endian dims, payload.

    Raises:
        DatasetError: If the array is not uint8 or has rank 0
    """
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DatasetError(f"IDX writer expects uint8, got {array.dtype}")
    if array.ndim == 0 or array.ndim > 255:
        raise DatasetError(f"IDX arrays need rank 1..255, got {array.ndim}")
    header = struct.pack(">BBBB", 0, 0, _IDX_UBYTE, array.ndim)
    dims = struct.pack(f">{array.ndim}I", *array.shape)
    return header + dims + np.ascontiguousarray(array).tobytes()


def decode_idx(data: bytes, expected_magic: int, source: str = "<bytes>") -> np.ndarray:
    """
    Parse an IDX byte string.

    Args:
        data: Raw file content
        expected_magic: 0x00000803 for images, 0x00000801 for labels
        source: Name used in diagnostics

    Returns:
        uint8 array of the declared shape

    Raises:
        DatasetError: On a bad magic number or truncated payload
    """
    try:
        (magic,) = struct.unpack_from(">I", data, 0)
        rank = magic & 0xFF
        if magic != expected_magic:
            raise DatasetError(
                f"{source}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
            )
        dims = struct.unpack_from(f">{rank}I", data, 4)
    except struct.error as e:
        logger.error(f"Truncated IDX header in {source}: {e}")
        raise DatasetError(f"{source}: truncated IDX header")

    offset = 4 + 4 * rank
    expected = int(np.prod(dims))
    payload = data[offset:]
    if len(payload) != expected:
        raise DatasetError(
            f"{source}: IDX payload has {len(payload)} bytes, header declares {expected}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def _read(path: Union[str, Path]) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Failed to read {path}: {e}")
        raise DatasetError(f"Cannot read dataset file {path}: {e}")


def load_idx(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    split: str = "train",
    num_classes: Optional[int] = None,
) -> Dataset:
    """
    Load an IDX image/label pair, scaling pixels to [0, 1] by /255.

    Images come back as N x 1 x H x W.

    Args:
        images_path: IDX3 image file
        labels_path: IDX1 label file
        split: Split tag for the dataset
        num_classes: Class count (defaults to max label + 1)

    Returns:
        Dataset whose provenance carries both file digests

    Raises:
        DatasetError: On bad magic, truncation or an image/label count mismatch
    """
    image_bytes = _read(images_path)
    label_bytes = _read(labels_path)
    images = decode_idx(image_bytes, IDX_IMAGES_MAGIC, str(images_path))
    labels = decode_idx(label_bytes, IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} "
            f"holds {labels.shape[0]} labels"
        )

    digests = get_digest_service()
    provenance = {
        "source": "idx",
        "images": str(images_path),
        "labels": str(labels_path),
        "images_sha256": digests.hexdigest(image_bytes),
        "labels_sha256": digests.hexdigest(label_bytes),
    }
    inputs = images.astype(np.float64)[:, None, :, :] / 255.0
    logger.info(f"Loaded {images.shape[0]} {split} examples from {images_path}")
    return Dataset(inputs, labels.astype(np.int64), split, provenance, num_classes)


def write_idx(
    dataset: Dataset,
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
) -> None:
    """
    Write a dataset back to an IDX pair; pixels are rounded to the 0..255 grid.

    Single-channel images are written as N x H x W.

    Raises:
        DatasetError: If inputs are not image-shaped or labels exceed a byte
    """
    inputs = dataset.inputs
    if inputs.ndim == 4 and inputs.shape[1] == 1:
        inputs = inputs[:, 0]
    if inputs.ndim != 3:
        raise DatasetError(f"IDX images must be N x H x W, got {dataset.inputs.shape}")
    if dataset.labels.max() > 255:
        raise DatasetError("IDX labels must fit in one byte")
    pixels = np.rint(inputs * 255.0).astype(np.uint8)
    atomic_write_bytes(images_path, encode_idx(pixels))
    atomic_write_bytes(labels_path, encode_idx(dataset.labels.astype(np.uint8)))
    logger.info(f"Wrote {len(dataset)} examples to {images_path}")


# Synthetic data


def synth_gaussians(
    n_per_class: int,
    means: Sequence[Sequence[float]],
    sigma: Union[float, Sequence[float]],
    seed: Seed,
    split: str = "train",
) -> Dataset:
    """
    Seeded Gaussian blobs, one per class, clipped to the unit cube.

    Args:
        n_per_class: Points drawn per class
        means: One mean vector per class (2-D for the toy benchmark)
        sigma: Shared standard deviation, or one value per axis
        seed: Integer seed or seed sequence
        split: Split tag

    Returns:
        Dataset with labels grouped by class

    Raises:
        DatasetError: On duplicate means, mismatched dimensions or bad sigma
    """
    means_arr = np.asarray(means, dtype=np.float64)
    if means_arr.ndim != 2 or means_arr.shape[0] < 2:
        raise DatasetError(f"Need at least two class means, got shape {means_arr.shape}")
    if len({tuple(m) for m in means_arr.tolist()}) != means_arr.shape[0]:
        raise DatasetError("Class means must be distinct")
    if n_per_class < 1:
        raise DatasetError(f"n_per_class must be >= 1, got {n_per_class}")

    sigma_arr = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (means_arr.shape[1],))
    if np.any(sigma_arr < 0):
        raise DatasetError(f"sigma must be non-negative, got {sigma}")

    rng = np.random.default_rng(seed)
    blocks, labels = [], []
    for label, mean in enumerate(means_arr):
        noise = rng.standard_normal((n_per_class, means_arr.shape[1]))
        blocks.append(np.clip(mean + noise * sigma_arr, 0.0, 1.0))
        labels.append(np.full(n_per_class, label, dtype=np.int64))

    provenance = {
        "source": "gaussians",
        "n_per_class": int(n_per_class),
        "means": means_arr.tolist(),
        "sigma": sigma_arr.tolist(),
        "seed": list(seed) if isinstance(seed, (list, tuple)) else int(seed),
    }
    return Dataset(
        np.concatenate(blocks), np.concatenate(labels), split, provenance, means_arr.shape[0]
    )


# Augmentation


def hflip(inputs: np.ndarray, coins: np.ndarray) -> np.ndarray:
    """Mirror the width axis of every image whose coin is set."""
    out = np.array(inputs, dtype=np.float64, copy=True)
    coins = np.asarray(coins, dtype=bool)
    out[coins] = out[coins][..., ::-1]
    return out


def augment(inputs: np.ndarray, pad: int, flip_enabled: bool, seed: Seed) -> np.ndarray:
    """
    Random crop after reflect padding, plus an optional horizontal flip (p=0.5).

    Args:
        inputs: N x C x H x W batch
        pad: Reflect padding on every side before cropping back to H x W
        flip_enabled: Whether to flip with probability 0.5
        seed: Integer seed or seed sequence

    Returns:
        Augmented copy of the batch

    Raises:
        DatasetError: If the batch is not image-shaped or pad >= an image dimension
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 4:
        raise DatasetError(f"augment expects N x C x H x W, got {inputs.shape}")
    n, _, h, w = inputs.shape
    if pad < 0 or pad >= h or pad >= w:
        raise DatasetError(f"Augmentation pad {pad} must be in [0, {min(h, w)})")

    rng = np.random.default_rng(seed)
    out = inputs.copy()
    if pad:
        padded = np.pad(inputs, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    if flip_enabled:
        out = hflip(out, rng.random(n) < 0.5)
    return out


# Builder


def build_datasets(config: "ExperimentConfig") -> tuple[Dataset, Dataset]:
    """
    Build the (train, test) pair an experiment config describes.

    Gaussian splits draw from the seed streams [data_seed, 0] and [data_seed, 1].
    IDX splits are reshaped to the model's input shape when it is a flat vector.

    Raises:
        DatasetError: If the source is unknown or the files are unusable
    """
    if config.dataset == "gaussians":
        train = synth_gaussians(
            config.gaussian_n_per_class,
            config.gaussian_means,
            config.gaussian_sigma,
            [config.data_seed, 0],
            "train",
        )
        test = synth_gaussians(
            config.gaussian_test_n_per_class,
            config.gaussian_means,
            config.gaussian_sigma,
            [config.data_seed, 1],
            "test",
        )
    elif config.dataset == "idx":
        missing = [
            key
            for key in ("idx_train_images", "idx_train_labels", "idx_test_images", "idx_test_labels")
            if not getattr(config, key)
        ]
        if missing:
            raise DatasetError(f"IDX dataset needs: {', '.join(missing)}")
        train = load_idx(config.idx_train_images, config.idx_train_labels, "train", config.num_classes)
        test = load_idx(config.idx_test_images, config.idx_test_labels, "test", config.num_classes)
        train, test = train.take(config.train_limit), test.take(config.test_limit)
    else:
        raise DatasetError(f"Unknown dataset source: {config.dataset}")

    spec = config.model_spec()
    if train.input_shape != spec.input_shape:
        train, test = train.reshaped(spec.input_shape), test.reshaped(spec.input_shape)
    return train, test
