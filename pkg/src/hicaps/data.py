"""Dataset ingestion, normalization, batching and mixup.

Loaders parse the datasets' native binary formats bit-exactly: big-endian
IDX for MNIST/Fashion-MNIST and the fixed-row binary batches for
CIFAR-10/100.  Images come out as float32 [N,C,H,W] scaled to [0,1]; the
normalized (mean/std) view feeds the network while the raw view is the
reconstruction target.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .hierarchy import LabelTree

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# expected file names per dataset root
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR10_DIR = "cifar-10-batches-bin"
CIFAR10_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}
CIFAR100_DIR = "cifar-100-binary"
CIFAR100_FILES = {"train": ("train.bin",), "test": ("test.bin",)}


class DataError(ValueError):
    """Raised for missing, truncated or malformed dataset files."""


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(images_path, labels_path):
    """Parse an IDX image/label file pair.

    Returns (images, labels) with images float32 [N,1,H,W] in [0,1] and
    labels int64 [N].  Accepts plain or gzipped files.
    """
    with _open_maybe_gzip(images_path) as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise DataError(f"{images_path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(
                f"{images_path}: bad magic 0x{magic:08x}, expected "
                f"0x{IDX_IMAGE_MAGIC:08x}"
            )
        payload = fh.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise DataError(
                f"{images_path}: truncated pixel data "
                f"({len(payload)} of {count * rows * cols} bytes)"
            )
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)

    with _open_maybe_gzip(labels_path) as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise DataError(f"{labels_path}: truncated IDX header")
        magic, n_labels = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise DataError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected "
                f"0x{IDX_LABEL_MAGIC:08x}"
            )
        payload = fh.read(n_labels)
        if len(payload) != n_labels:
            raise DataError(f"{labels_path}: truncated label data")
        labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)

    if count != n_labels:
        raise DataError(
            f"image/label count mismatch: {count} images vs {n_labels} labels"
        )
    return images.astype(np.float32) / 255.0, labels


def _read_cifar_rows(path, row_bytes):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw or len(raw) % row_bytes:
        raise DataError(
            f"{path}: size {len(raw)} is not a multiple of the row size "
            f"{row_bytes}"
        )
    return np.frombuffer(raw, dtype=np.uint8).reshape(-1, row_bytes)


def load_cifar(data_dir, variant: int, split: str):
    """Read CIFAR binary batches.

    variant 10: rows are 1 label byte + 3072 pixel bytes.
    variant 100: rows are coarse byte + fine byte + 3072 pixel bytes; the
    native coarse byte is returned for cross-checks, but the bundled
    hierarchy file stays authoritative for levels.

    Returns (images [N,3,32,32] in [0,1], fine_labels [N]) for variant 10,
    plus native_coarse [N] for variant 100.
    """
    if variant == 10:
        subdir, names, row_bytes, pixel_at = CIFAR10_DIR, CIFAR10_FILES[split], 3073, 1
    elif variant == 100:
        subdir, names, row_bytes, pixel_at = CIFAR100_DIR, CIFAR100_FILES[split], 3074, 2
    else:
        raise ValueError(f"variant must be 10 or 100, got {variant}")
    paths = [os.path.join(data_dir, subdir, n) for n in names]
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise DataError(
            "missing CIFAR files: " + ", ".join(missing)
        )
    rows = np.concatenate([_read_cifar_rows(p, row_bytes) for p in paths], axis=0)
    images = rows[:, pixel_at:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    if variant == 10:
        return images, rows[:, 0].astype(np.int64)
    return images, rows[:, 1].astype(np.int64), rows[:, 0].astype(np.int64)


@dataclass
class Dataset:
    """Images in [0,1] plus fine labels, bound to a label tree."""

    name: str
    split: str  # "train" | "test"
    images: np.ndarray  # [N, C, H, W] float32 in [0,1]
    fine_labels: np.ndarray  # [N] int64
    tree: LabelTree

    def __post_init__(self):
        k_fine = self.tree.class_counts[-1]
        if self.fine_labels.size and self.fine_labels.max() >= k_fine:
            raise DataError(
                f"{self.name}/{self.split}: fine label "
                f"{int(self.fine_labels.max())} out of range for K={k_fine}"
            )
        self.label_matrix = self.tree.expand_all(self.fine_labels)

    def __len__(self):
        return self.images.shape[0]

    def subset(self, count: int, rng=None) -> "Dataset":
        """First ``count`` items, or a seeded random sample when rng given."""
        if count > len(self):
            raise DataError(f"subset of {count} from {len(self)} items")
        idx = (
            np.sort(rng.choice(len(self), size=count, replace=False))
            if rng is not None
            else np.arange(count)
        )
        return Dataset(
            self.name, self.split, self.images[idx], self.fine_labels[idx], self.tree
        )


def load_dataset(name: str, data_dir, split: str, tree: LabelTree) -> Dataset:
    """Load one of mnist/fashion_mnist/cifar10/cifar100 from its data root."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be train|test, got {split!r}")
    if name in ("mnist", "fashion_mnist"):
        img_name, lbl_name = IDX_FILES[split]
        img_path, lbl_path = None, None
        for suffix in ("", ".gz"):
            ip = os.path.join(data_dir, img_name + suffix)
            lp = os.path.join(data_dir, lbl_name + suffix)
            if os.path.exists(ip) and os.path.exists(lp):
                img_path, lbl_path = ip, lp
                break
        if img_path is None:
            raise DataError(
                f"IDX files for {name}/{split} not found under {data_dir} "
                f"(expected {img_name}[.gz] and {lbl_name}[.gz])"
            )
        images, labels = load_idx(img_path, lbl_path)
    elif name == "cifar10":
        images, labels = load_cifar(data_dir, 10, split)
    elif name == "cifar100":
        images, labels, _ = load_cifar(data_dir, 100, split)
    else:
        raise ValueError(f"unknown dataset {name!r}")
    return Dataset(name, split, images, labels, tree)


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray  # [C]
    std: np.ndarray  # [C]


def compute_stats(images: np.ndarray) -> NormalizationStats:
    """Per-channel mean/std over a (train) split; zero std is an error."""
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    if np.any(std == 0):
        ch = int(np.flatnonzero(std == 0)[0])
        raise DataError(f"channel {ch} has zero standard deviation")
    return NormalizationStats(mean.astype(np.float32), std.astype(np.float32))


def normalize(images: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    mean = stats.mean.reshape(1, -1, 1, 1)
    std = stats.std.reshape(1, -1, 1, 1)
    return ((images - mean) / std).astype(T.default_dtype())


@dataclass
class Batch:
    """One training batch: network input, reconstruction target, targets.

    ``targets`` holds one [B, K_n] row-stochastic array per level (one-hot,
    or soft after mixup).  ``labels`` is the [B, num_levels] hard id matrix
    of the underlying (pre-mix) instances.
    """

    x_norm: np.ndarray
    x_raw: np.ndarray
    targets: list
    labels: np.ndarray


def make_batch(dataset: Dataset, stats: NormalizationStats, idx) -> Batch:
    raw = dataset.images[idx]
    labels = dataset.label_matrix[idx]
    targets = []
    for level, k in enumerate(dataset.tree.class_counts):
        rows = np.zeros((len(idx), k), dtype=T.default_dtype())
        rows[np.arange(len(idx)), labels[:, level]] = 1.0
        targets.append(rows)
    return Batch(normalize(raw, stats), raw, targets, labels)


def mixup(batch: Batch, alpha: float, rng) -> Batch:
    """Convex-combine the batch with a shuffled partner.

    One mixing coefficient mu ~ Beta(alpha, alpha) is drawn per batch and
    applied identically to the normalized images, the raw reconstruction
    targets and every per-level target row, so rows stay stochastic.
    """
    n = batch.x_norm.shape[0]
    if n < 2:
        raise ValueError(f"mixup needs a batch of >= 2, got {n}")
    mu = float(rng.beta(alpha, alpha))
    partner = rng.permutation(n)
    mix = lambda a: (mu * a + (1.0 - mu) * a[partner]).astype(a.dtype)
    targets = [mix(rows) for rows in batch.targets]
    return Batch(mix(batch.x_norm), mix(batch.x_raw), targets, batch.labels)


def iter_batches(dataset: Dataset, stats: NormalizationStats, batch_size: int,
                 rng=None, mixup_alpha=None, drop_last=False):
    """Yield batches; shuffles when given an rng, applies mixup when asked."""
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and idx.shape[0] < batch_size:
            return
        batch = make_batch(dataset, stats, idx)
        if mixup_alpha is not None and idx.shape[0] >= 2:
            batch = mixup(batch, mixup_alpha, rng)
        yield batch
