"""Dataset readers (IDX, CIFAR-10 binary), a synthetic shapes set, and batching."""
from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ContractError(
                f"{self.name}: images {self.images.shape} and labels {self.labels.shape} disagree"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"{self.name}: labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        if isinstance(index, int):
            index = slice(0, index)
        return Dataset(self.images[index], self.labels[index], self.num_classes, self.name)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | Sequence[int] | None = None
            ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(images, one_hot, labels)``; every sample once, last partial batch kept."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(ds))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        labels = ds.labels[idx]
        yield ds.images[idx], one_hot(labels, ds.num_classes), labels


# -- IDX -------------------------------------------------------------------------


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(
            f"{path}: expected magic 0x{expected_magic:08x} at byte offset 0, found 0x{magic:08x}"
        )
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: unsupported IDX element type in magic 0x{magic:08x} (byte offset 2)")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension sizes at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims)) if dims else 0
    if len(raw) - header < expected:
        raise FormatError(
            f"{path}: payload truncated at byte offset {len(raw)}; "
            f"expected {expected} bytes starting at offset {header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", 0x0800 | array.ndim))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "idx") -> Dataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{images_path}: {len(images)} images but {len(labels)} labels")
    return Dataset(images[:, None].astype(np.float32) / 255.0, labels, num_classes, name)


def _find(data_dir: Path, stem: str) -> Path:
    for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (data_dir / candidate).exists():
            return data_dir / candidate
    raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")


def load_mnist_dir(data_dir, name: str = "mnist") -> tuple[Dataset, Dataset]:
    """Train/test split from the four standard MNIST / Fashion-MNIST files."""
    d = Path(data_dir)
    train = load_idx(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"), name=name)
    test = load_idx(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"), name=name)
    return train, test


# -- CIFAR-10 ----------------------------------------------------------------------


def load_cifar10_bin(paths: Sequence | str | os.PathLike) -> Dataset:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise FormatError(
                f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record "
                f"(trailing record starts at byte offset {len(raw) - len(raw) % CIFAR_RECORD})"
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0])
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(np.concatenate(images).astype(np.float32) / 255.0, np.concatenate(labels), 10, "cifar10")


def write_cifar10_bin(path, images_u8: np.ndarray, labels) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    Path(path).write_bytes(rec.tobytes())


def load_cifar10_dir(data_dir) -> tuple[Dataset, Dataset]:
    d = Path(data_dir)
    train = load_cifar10_bin([d / f"data_batch_{i}.bin" for i in range(1, 6)])
    test = load_cifar10_bin([d / "test_batch.bin"])
    return train, test


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation, accumulated in float64."""
    x = ds.images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def cached_channel_stats(train: Dataset, cache_path) -> tuple[np.ndarray, np.ndarray]:
    cache_path = Path(cache_path)
    if cache_path.exists():
        d = json.loads(cache_path.read_text())
        return np.asarray(d["mean"]), np.asarray(d["std"])
    mean, std = channel_stats(train)
    cache_path.write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}))
    return mean, std


def normalize(ds: Dataset, mean, std) -> Dataset:
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return Dataset((ds.images - m) / s, ds.labels, ds.num_classes, ds.name)


def denormalize(ds: Dataset, mean, std) -> Dataset:
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return Dataset(ds.images * s + m, ds.labels, ds.num_classes, ds.name)


# -- synthetic shapes ---------------------------------------------------------------

SHAPE_NAMES = ("filled-square", "hollow-square", "cross", "diagonal-stripe")


def _draw(kind: int, size: int, top: int, left: int, extent: int) -> np.ndarray:
    img = np.zeros((size, size), dtype=np.float32)
    rows, cols = slice(top, top + extent), slice(left, left + extent)
    if kind == 0:
        img[rows, cols] = 1.0
    elif kind == 1:
        img[rows, cols] = 1.0
        img[top + 1:top + extent - 1, left + 1:left + extent - 1] = 0.0
    elif kind == 2:
        mid = extent // 2
        img[top + mid - 1:top + mid + 1, cols] = 1.0
        img[rows, left + mid - 1:left + mid + 1] = 1.0
    else:
        for i in range(extent):
            img[top + i, left + max(i - 1, 0):left + min(i + 2, extent)] = 1.0
    return img


def synth_shapes(n: int, seed: int = 0, size: int = 16) -> Dataset:
    """Four balanced classes of jittered shapes: filled square, hollow square, cross, stripe."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 4)
    images = np.zeros((n, 1, size, size), dtype=np.float32)
    for i, kind in enumerate(labels):
        extent = int(rng.integers(size // 2 - 1, size // 2 + 2))
        top, left = rng.integers(0, size - extent + 1, size=2)
        images[i, 0] = _draw(int(kind), size, int(top), int(left), extent)
    return Dataset(images, labels, 4, "synth-shapes")


# -- PGM ------------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) 8-bit graymap from a 2-d array in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ContractError(f"write_pgm expects a 2-d image, got {image.shape}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(x) for x in fields[1:])
    payload = raw[pos + 1:]
    if len(payload) != w * h or maxval != 255:
        raise FormatError(f"{path}: expected {w * h} 8-bit pixels after byte offset {pos + 1}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
