"""Dataset ingestion, synthesis, and label-skewed client partitioning.

Real datasets are read from their on-disk binary formats (IDX for MNIST-style
files, 3073-byte records for CIFAR-10 batches). A synthetic "toy" dataset with
class-specific blob templates stands in when no files are available, so the
full pipeline runs with zero downloads.
"""

from __future__ import annotations

import csv
import enum
import math
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR10_RECORD_BYTES = 3073
CIFAR10_CLASSES = 10

# Dimension sanity caps for IDX headers; anything larger is a corrupt header,
# not a real dataset.
_MAX_IDX_DIM = 2**31 - 1
_MAX_IDX_ELEMENTS = 2**40


class DatasetError(ValueError):
    """Base class for dataset parsing and partitioning failures."""


class BadMagic(DatasetError):
    pass


class TruncatedFile(DatasetError):
    pass


class DimensionOverflow(DatasetError):
    pass


class BadRecordLength(DatasetError):
    pass


class LabelOutOfRange(DatasetError):
    pass


class InfeasibleSpec(DatasetError):
    pass


class Provenance(enum.Enum):
    REAL = "real"
    MIXUP = "mixup"
    NATURAL_NOISE = "natural_noise"


@dataclass
class LabeledImage:
    """One example: an (H, W, Ch) float32 pixel tensor plus a class label.

    Real images carry integer-valued pixels in [0, 255]; pseudo-images may be
    arbitrary reals (additive noise is not clamped by default).
    """

    pixels: np.ndarray
    label: int
    provenance: Provenance = Provenance.REAL

    @property
    def dims(self) -> tuple[int, int, int]:
        h, w, c = self.pixels.shape
        return h, w, c


@dataclass
class ClientDataset:
    """A client's local multiset of examples with per-label bookkeeping."""

    client_id: int
    examples: list[LabeledImage]
    num_classes: int

    @property
    def label_histogram(self) -> np.ndarray:
        labels = np.fromiter((ex.label for ex in self.examples), dtype=np.int64,
                             count=len(self.examples))
        return np.bincount(labels, minlength=self.num_classes)

    def count(self, label: int) -> int:
        return int(sum(1 for ex in self.examples if ex.label == label))

    def __len__(self) -> int:
        return len(self.examples)

    def add(self, new_examples: Iterable[LabeledImage]) -> None:
        self.examples.extend(new_examples)

    def snapshot(self) -> "ClientDataset":
        """Shallow copy: fresh list, same image objects."""
        return ClientDataset(self.client_id, list(self.examples), self.num_classes)


class Scheme(enum.Enum):
    CLASS_SKEW = "class_skew"
    DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class PartitionSpec:
    scheme: Scheme
    num_clients: int
    seed: int
    classes_per_client: int | None = None   # C, class-skew only
    concentration: float | None = None      # dirichlet only

    @classmethod
    def class_skew(cls, c: int, num_clients: int, seed: int) -> "PartitionSpec":
        return cls(Scheme.CLASS_SKEW, num_clients, seed, classes_per_client=c)

    @classmethod
    def dirichlet(cls, concentration: float, num_clients: int, seed: int) -> "PartitionSpec":
        return cls(Scheme.DIRICHLET, num_clients, seed, concentration=concentration)

    def validate(self, num_classes: int) -> None:
        if self.num_clients < 1:
            raise InfeasibleSpec("num_clients must be >= 1")
        if self.scheme is Scheme.CLASS_SKEW:
            c = self.classes_per_client
            if c is None or not (1 <= c <= num_classes):
                raise InfeasibleSpec(f"classes_per_client must be in [1, {num_classes}], got {c}")
            if self.num_clients * c < num_classes:
                raise InfeasibleSpec(
                    f"{self.num_clients} clients x {c} classes leave labels with no holder")
        elif self.scheme is Scheme.DIRICHLET:
            if self.concentration is None or not (self.concentration > 0):
                raise InfeasibleSpec(f"concentration must be > 0, got {self.concentration}")


def parse_idx(data: bytes) -> tuple[np.ndarray, dict]:
    """Decode an IDX byte sequence (big-endian, unsigned 8-bit payload).

    Supports the two magics used by MNIST-style files: 0x00000803 (3-D image
    tensors) and 0x00000801 (1-D label vectors). Returns the decoded tensor
    and a metadata dict with the magic and dims.
    """
    if len(data) < 4:
        raise TruncatedFile(f"IDX header needs 4 bytes, got {len(data)}")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IDX_IMAGE_MAGIC:
        ndim = 3
    elif magic == IDX_LABEL_MAGIC:
        ndim = 1
    else:
        raise BadMagic(f"unsupported IDX magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise TruncatedFile(f"IDX header needs {header_len} bytes, got {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    if any(d > _MAX_IDX_DIM for d in dims):
        raise DimensionOverflow(f"IDX dimension too large: {dims}")
    count = math.prod(dims)
    if count > _MAX_IDX_ELEMENTS:
        raise DimensionOverflow(f"IDX element count too large: {count}")
    payload = data[header_len:]
    if len(payload) != count:
        raise TruncatedFile(f"IDX payload holds {len(payload)} bytes, header promises {count}")
    tensor = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    return tensor, {"magic": magic, "dims": dims}


def encode_idx(tensor: np.ndarray) -> bytes:
    """Inverse of parse_idx for round-trip checks and fixture building."""
    arr = np.ascontiguousarray(tensor, dtype=np.uint8)
    if arr.ndim == 3:
        magic = IDX_IMAGE_MAGIC
    elif arr.ndim == 1:
        magic = IDX_LABEL_MAGIC
    else:
        raise DatasetError(f"IDX encoder handles 1-D or 3-D tensors, got {arr.ndim}-D")
    header = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    return header + arr.tobytes()


def parse_cifar10(data: bytes) -> list[LabeledImage]:
    """Decode CIFAR-10 binary batch records (1 label byte + 3072 planar pixels)."""
    if len(data) % CIFAR10_RECORD_BYTES != 0:
        raise BadRecordLength(
            f"{len(data)} bytes is not a multiple of {CIFAR10_RECORD_BYTES}")
    images = []
    for off in range(0, len(data), CIFAR10_RECORD_BYTES):
        record = data[off:off + CIFAR10_RECORD_BYTES]
        label = record[0]
        if label >= CIFAR10_CLASSES:
            raise LabelOutOfRange(f"label byte {label} at record offset {off}")
        planes = np.frombuffer(record, dtype=np.uint8, offset=1).reshape(3, 32, 32)
        pixels = planes.transpose(1, 2, 0).astype(np.float32)
        images.append(LabeledImage(pixels, int(label)))
    return images


def encode_cifar10(images: Sequence[LabeledImage]) -> bytes:
    out = bytearray()
    for img in images:
        planes = img.pixels.astype(np.uint8).transpose(2, 0, 1)
        out.append(img.label)
        out.extend(planes.tobytes())
    return bytes(out)


def idx_to_labeled_images(pixels: np.ndarray, labels: np.ndarray) -> list[LabeledImage]:
    """Pair an IDX image tensor with an IDX label vector."""
    if pixels.shape[0] != labels.shape[0]:
        raise DatasetError(f"{pixels.shape[0]} images vs {labels.shape[0]} labels")
    return [LabeledImage(pixels[i].astype(np.float32)[..., None], int(labels[i]))
            for i in range(pixels.shape[0])]


_MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def _find_file(directory: str, candidates: tuple[str, ...]) -> str:
    for name in candidates:
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"none of {candidates} found under {directory}")


def load_mnist_dir(directory: str) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Load the four standard MNIST IDX files from a directory."""
    tensors = {}
    for key, names in _MNIST_FILES.items():
        with open(_find_file(directory, names), "rb") as fh:
            tensors[key], _ = parse_idx(fh.read())
    train = idx_to_labeled_images(tensors["train_images"], tensors["train_labels"])
    test = idx_to_labeled_images(tensors["test_images"], tensors["test_labels"])
    return train, test


def load_cifar10_dir(directory: str) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Load CIFAR-10 binary batches data_batch_{1..5}.bin plus test_batch.bin."""
    train: list[LabeledImage] = []
    for i in range(1, 6):
        with open(os.path.join(directory, f"data_batch_{i}.bin"), "rb") as fh:
            train.extend(parse_cifar10(fh.read()))
    with open(os.path.join(directory, "test_batch.bin"), "rb") as fh:
        test = parse_cifar10(fh.read())
    return train, test


def toy_templates(num_classes: int, dims: tuple[int, int, int]) -> np.ndarray:
    """Noiseless class templates: one Gaussian blob per class, centers on a grid.

    Returns an array of shape (num_classes, H, W, Ch).
    """
    h, w, ch = dims
    cols = math.ceil(math.sqrt(num_classes))
    rows = math.ceil(num_classes / cols)
    sigma = max(0.8, min(h, w) / 8.0)
    yy, xx = np.mgrid[0:h, 0:w]
    templates = np.zeros((num_classes, h, w, ch), dtype=np.float64)
    for y in range(num_classes):
        r, c = divmod(y, cols)
        cy = (r + 0.5) * h / rows
        cx = (c + 0.5) * w / cols
        blob = 255.0 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        templates[y] = blob[..., None]
    return templates


def make_toy_dataset(n_per_class: int, num_classes: int, dims: tuple[int, int, int],
                     seed: int, jitter: int = 16) -> list[LabeledImage]:
    """Synthesize a linearly separable dataset: class template + bounded jitter.

    Pixels are integer-valued in [0, 255] (these stand in for real files), and
    output is byte-for-byte deterministic under the seed.
    """
    if n_per_class < 1:
        raise DatasetError(f"n_per_class must be >= 1, got {n_per_class}")
    templates = toy_templates(num_classes, dims)
    rng = np.random.default_rng(seed)
    images = []
    for y in range(num_classes):
        for _ in range(n_per_class):
            noise = rng.integers(-jitter, jitter + 1, size=dims)
            pixels = np.clip(np.rint(templates[y] + noise), 0, 255).astype(np.float32)
            images.append(LabeledImage(pixels, y))
    return images


def _infer_num_classes(dataset: Sequence[LabeledImage]) -> int:
    return max(ex.label for ex in dataset) + 1


def _even_split_sizes(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def _largest_remainder_counts(total: int, proportions: np.ndarray) -> np.ndarray:
    """Apportion `total` items to match `proportions` exactly (sum preserved)."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition(dataset: Sequence[LabeledImage], spec: PartitionSpec) -> list[ClientDataset]:
    """Split a dataset across clients under C-class label skew or Dirichlet skew.

    Class skew: labels are assigned round-robin over a seeded shuffle so every
    client holds exactly C distinct labels, and each label's examples are split
    evenly (±1) among the clients holding it. Dirichlet: each label's examples
    are apportioned by a Dir(concentration) draw over clients.

    The union of client examples is always exactly the input dataset.
    """
    num_classes = _infer_num_classes(dataset)
    spec.validate(num_classes)
    rng = np.random.default_rng(spec.seed)
    by_label: list[list[int]] = [[] for _ in range(num_classes)]
    for idx, ex in enumerate(dataset):
        by_label[ex.label].append(idx)

    assignment: list[list[int]] = [[] for _ in range(spec.num_clients)]
    if spec.scheme is Scheme.CLASS_SKEW:
        c = spec.classes_per_client
        shuffled = rng.permutation(num_classes)
        holders: list[list[int]] = [[] for _ in range(num_classes)]
        for slot in range(spec.num_clients * c):
            label = int(shuffled[slot % num_classes])
            holders[label].append(slot // c)
        for label in range(num_classes):
            idxs = by_label[label]
            owners = holders[label]
            if len(idxs) < len(owners):
                raise InfeasibleSpec(
                    f"label {label} has {len(idxs)} examples for {len(owners)} holders")
            order = rng.permutation(len(idxs))
            sizes = _even_split_sizes(len(idxs), len(owners))
            cursor = 0
            for owner, size in zip(owners, sizes):
                for j in order[cursor:cursor + size]:
                    assignment[owner].append(idxs[j])
                cursor += size
    else:
        alpha = np.full(spec.num_clients, spec.concentration, dtype=np.float64)
        for label in range(num_classes):
            idxs = by_label[label]
            proportions = rng.dirichlet(alpha)
            counts = _largest_remainder_counts(len(idxs), proportions)
            order = rng.permutation(len(idxs))
            cursor = 0
            for client, size in enumerate(counts):
                for j in order[cursor:cursor + size]:
                    assignment[client].append(idxs[j])
                cursor += size

    return [ClientDataset(cid, [dataset[i] for i in sorted(indices)], num_classes)
            for cid, indices in enumerate(assignment)]


def write_partition_manifest(clients: Sequence[ClientDataset], path: str) -> None:
    """Export per-client label counts as CSV (client_id, label, count)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "label", "count"])
        for client in clients:
            hist = client.label_histogram
            for label in range(client.num_classes):
                writer.writerow([client.client_id, label, int(hist[label])])
