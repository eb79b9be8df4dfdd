"""Readers (and writers) for the MNIST IDX and CIFAR-10 binary formats."""
from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
KINDS = ("mnist-idx", "cifar10-binary")
CIFAR_FILE_RECORDS = 10000
MNIST_COUNTS = {"train": 60000, "test": 10000}


class FormatError(ValueError):
    """A dataset file does not follow its binary format."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.path = path
        self.offset = offset


@dataclass
class Dataset:
    """Images kept as raw bytes ``[n, H, W, C]`` plus per-channel normalization stats.

    Stats are on the [0, 1] scale and always come from a train split.
    """

    pixels: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if len(self.pixels) == 0:
            raise FormatError("dataset is empty")
        if len(self.pixels) != len(self.labels):
            raise FormatError(f"{len(self.pixels)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        scaled = self.pixels.reshape(-1, self.pixels.shape[-1]).astype(np.float64) / 255.0
        return scaled.mean(axis=0), scaled.std(axis=0)

    def with_stats(self, mean, std) -> "Dataset":
        return replace(self, mean=np.asarray(mean, dtype=np.float64), std=np.asarray(std, dtype=np.float64))

    def images(self, index=slice(None)) -> np.ndarray:
        """Normalized float64 images for ``index``."""
        if self.mean is None or self.std is None:
            raise ValueError("normalization stats missing; take them from the train split")
        x = self.pixels[index].astype(np.float64) / 255.0
        return (x - self.mean) / np.where(self.std > 0, self.std, 1.0)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices)
        return replace(self, pixels=self.pixels[indices], labels=self.labels[indices])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.pixels).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


# -------------------------------------------------------------------- IDX

def read_idx(path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise FormatError("file shorter than an IDX header", path, len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", path, 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX header", path, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(f"truncated: header promises {size} bytes of data", path, len(raw))
    if len(raw) > header + size:
        raise FormatError("trailing bytes after IDX payload", path, header + size)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        f.write(array.tobytes())


def _find(directory: Path, candidates: Sequence[str]) -> Path:
    for name in candidates:
        for suffix in ("", ".gz"):
            p = directory / (name + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"none of {list(candidates)} found in {directory}")


def load_mnist(path, split: str = "train", strict: bool = True) -> Dataset:
    """Decode an MNIST split; ``strict`` also checks the published counts and 28x28 size."""
    directory = Path(path)
    prefix = "train" if split == "train" else "t10k"
    img_path = _find(directory, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
    lbl_path = _find(directory, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
    images = read_idx(img_path, IDX_IMAGES_MAGIC)
    labels = read_idx(lbl_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", lbl_path, 4)
    if strict:
        want = MNIST_COUNTS["train" if split == "train" else "test"]
        if len(images) != want:
            raise FormatError(f"{len(images)} images, expected {want} for the {split} split", img_path, 4)
        if images.shape[1:] != (28, 28):
            raise FormatError(f"images are {images.shape[1:]}, expected (28, 28)", img_path, 8)
    return Dataset(images[..., None].copy(), labels.astype(np.int64), split, 10, name="mnist")


# ----------------------------------------------------------------- CIFAR

def read_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"size {len(raw)} is not a whole number of {CIFAR_RECORD}-byte records",
                          path, (len(raw) // CIFAR_RECORD) * CIFAR_RECORD)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise FormatError(f"label byte {labels[bad[0]]} outside [0, 10)", path, int(bad[0]) * CIFAR_RECORD)
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy()
    return images, labels


def write_cifar10_file(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    planar = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planar], axis=1)
    Path(path).write_bytes(records.tobytes())


def load_cifar10(path, split: str = "train", strict: bool = True) -> Dataset:
    """Decode a directory of the standard batch files, or one file.

    In directory mode with ``strict`` every batch file must hold exactly 10000
    records (50000 train, 10000 test).
    """
    path = Path(path)
    if path.is_dir():
        files = [path / f for f in (CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES)]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR-10 files: {missing}")
    else:
        files = [path]
    parts = [read_cifar10_file(f) for f in files]
    if strict and path.is_dir():
        for f, (imgs, _) in zip(files, parts):
            if len(imgs) != CIFAR_FILE_RECORDS:
                raise FormatError(f"{len(imgs)} records, expected {CIFAR_FILE_RECORDS}", f,
                                  len(imgs) * CIFAR_RECORD)
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, split, 10, name="cifar10")


def load_dataset(path, kind: str, split: str = "train", stats: tuple | None = None,
                 strict: bool = True) -> Dataset:
    """Decode a dataset; train splits get their own channel stats, others need ``stats``.

    ``strict=False`` skips the published record-count checks (useful for toy data).
    """
    if kind == "mnist-idx":
        ds = load_mnist(path, split, strict)
    elif kind == "cifar10-binary":
        ds = load_cifar10(path, split, strict)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if stats is None and split == "train":
        stats = ds.channel_stats()
    if stats is not None:
        ds = ds.with_stats(*stats)
    return ds


def from_arrays(images: np.ndarray, labels: np.ndarray, num_classes: int | None = None,
                split: str = "train", name: str = "arrays") -> Dataset:
    """Wrap uint8 ``[n, H, W, C]`` images (HW images get a channel axis)."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    ds = Dataset(images.astype(np.uint8), labels, split, k, name=name)
    return ds.with_stats(*ds.channel_stats()) if split == "train" else ds
