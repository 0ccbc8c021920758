"""Dataset loading, class removal and transfer-set selection."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, TruncatedFileError
from .tensor import FLOAT, SeededRng

IDX_IMAGES_MAGIC = 0x00000803  # 2051
IDX_LABELS_MAGIC = 0x00000801  # 2049
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


@dataclass
class LabeledDataset:
    images: np.ndarray  # N×c×h×w float32 in [0, 1]
    labels: np.ndarray  # N int64
    num_classes: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.num_classes,
                              self.split, self.name if name is None else name)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


# -- IDX -------------------------------------------------------------------


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, expected_magic=None):
    """Parse an unsigned-byte IDX file into an ndarray (gzip handled by extension)."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise DataError(f"{path}: bad magic {magic:#010x}, expected {expected_magic:#010x}")
    if magic >> 8 != 0x08:
        raise DataError(f"{path}: unsupported IDX element type in magic {magic:#010x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - head < size:
        raise TruncatedFileError(f"{path}: truncated payload ({len(raw) - head} of {size} bytes)")
    if len(raw) - head > size:
        raise DataError(f"{path}: {len(raw) - head - size} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as IDX (gzip-compressed when ``path`` ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def load_idx(images_path, labels_path, split="train", num_classes=10, name=""):
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    x = (images.astype(FLOAT) / FLOAT(255.0))[:, None, :, :]
    return LabeledDataset(x, labels.astype(np.int64), num_classes, split, name)


def _find(root, stem):
    for candidate in (root / stem, root / (stem + ".gz")):
        if candidate.exists():
            return candidate
    raise DataError(f"missing file: {root / stem}[.gz]")


def load_mnist_dir(root, split="train", name="mnist"):
    """Load the standard MNIST/Fashion-MNIST file pair for ``split`` from ``root``."""
    root = Path(root)
    img, lab = MNIST_FILES[split]
    return load_idx(_find(root, img), _find(root, lab), split=split, name=name)


# -- CIFAR-10 --------------------------------------------------------------


def parse_cifar_records(raw: bytes, source="<bytes>"):
    if len(raw) % CIFAR_RECORD:
        raise DataError(f"{source}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, split="train"):
    """Binary-version CIFAR-10: records of 1 label byte + 3072 channel-major pixels."""
    directory = Path(directory)
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    names = CIFAR_FILES[split]
    missing = [n for n in names if not (directory / n).exists()]
    if missing:
        raise DataError(f"CIFAR-10 directory {directory} is missing: {', '.join(missing)}")
    parts = [parse_cifar_records((directory / n).read_bytes(), directory / n) for n in names]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return LabeledDataset(images.astype(FLOAT) / FLOAT(255.0), labels, 10, split, "cifar10")


# -- transformations -------------------------------------------------------


def remove_class(ds: LabeledDataset, cls: int) -> LabeledDataset:
    """Drop every example of ``cls``; order and label space are kept."""
    if len(ds) == 0:
        raise DataError("cannot remove a class from an empty dataset")
    if not 0 <= cls < ds.num_classes:
        raise ValueError(f"class {cls} out of range [0, {ds.num_classes})")
    keep = ds.labels != cls
    if keep.all():
        raise ValueError(f"class {cls} is not present in the dataset")
    return ds.subset(np.flatnonzero(keep))


def normalize_stats(ds: LabeledDataset):
    """Per-channel mean and (population) std, accumulated in float64."""
    if len(ds) == 0:
        raise DataError("empty dataset")
    x = ds.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, std


def standardize(ds: LabeledDataset, mean, std) -> LabeledDataset:
    std = np.where(np.asarray(std) > 0, std, 1.0)
    x = (ds.images - np.asarray(mean)[None, :, None, None]) / np.asarray(std)[None, :, None, None]
    return LabeledDataset(x.astype(FLOAT), ds.labels, ds.num_classes, ds.split, ds.name)


@dataclass
class TransferSet:
    dataset: LabeledDataset = field(repr=False)
    indices: np.ndarray
    policy: str = "random"
    n_per_class: int = 0
    T_sel: float | None = None

    def __len__(self):
        return len(self.indices)

    @property
    def images(self):
        return self.dataset.images[self.indices]

    @property
    def labels(self):
        return self.dataset.labels[self.indices]

    def as_dataset(self):
        return self.dataset.subset(self.indices)


def full_transfer_set(ds: LabeledDataset) -> TransferSet:
    """Every example of ``ds`` as a transfer set."""
    return TransferSet(ds, np.arange(len(ds)), policy="all")


def select_transfer_set(ds: LabeledDataset, n_per_class: int, policy="random", teacher=None,
                        T_sel=9.0, rng: SeededRng | None = None) -> TransferSet:
    """Pick ``n_per_class`` examples from every class present in ``ds``.

    ``random`` samples each class uniformly without replacement. ``entropy_ranked``
    keeps, per class, the examples whose teacher soft labels at ``T_sel`` have
    the highest entropy (ties resolved by dataset order).
    """
    counts = ds.class_counts()
    present = np.flatnonzero(counts)
    short = [int(c) for c in present if counts[c] < n_per_class]
    if short:
        c = short[0]
        raise DataError(f"class {c} has only {counts[c]} examples, {n_per_class} requested")
    if policy == "random":
        if rng is None:
            raise ValueError("random selection needs an rng")
        score = None
    elif policy == "entropy_ranked":
        if teacher is None:
            raise ValueError("entropy_ranked selection needs a teacher")
        from .analysis import entropy
        from .losses import softmax_t
        from .nn import predict_logits

        model = getattr(teacher, "model", teacher)
        score = entropy(softmax_t(predict_logits(model, ds.images), T_sel))
    else:
        raise ValueError(f"unknown selection policy {policy!r}")

    chosen = []
    for c in present:
        members = np.flatnonzero(ds.labels == c)
        if score is None:
            pick = members[rng.choice(len(members), n_per_class)]
        else:
            order = np.lexsort((members, -score[members]))
            pick = members[order[:n_per_class]]
        chosen.append(pick)
    indices = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    return TransferSet(ds, indices, policy, n_per_class, T_sel if policy == "entropy_ranked" else None)


def data_root(default=None):
    """Dataset root: ``$KDLAB_DATA_DIR`` if set, else ``default``."""
    return Path(os.environ.get("KDLAB_DATA_DIR") or default or "data")
