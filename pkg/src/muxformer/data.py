"""IDX / CIFAR-binary ingestion and slot-stable multiplex batching."""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .models import MuxBatch
from .nn import ConfigError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3072


class DataFormatError(ValueError):
    """A dataset file does not match its declared binary layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # (count, C, H, W) float32, normalised
    labels: np.ndarray  # (count,) int64
    ids: np.ndarray  # (count,) int64, stable per image
    num_classes: int
    mean: tuple[float, ...] = (0.0,)
    std: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.labels) != len(self.ids):
            raise ValueError("images, labels and ids must have the same length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, start: int = 0, stop: int | None = None) -> "Dataset":
        sl = np.s_[start:stop]
        return Dataset(self.images[sl], self.labels[sl], self.ids[sl], self.num_classes,
                       self.mean, self.std)


def normalize(x: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((x - m) / s).astype(np.float32)


def denormalize(x: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (x * s + m).astype(np.float32)


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _header(blob: bytes, words: int, path) -> tuple[int, ...]:
    if len(blob) < 4 * words:
        raise DataFormatError(f"{path}: header truncated", len(blob))
    return tuple(int(v) for v in np.frombuffer(blob[:4 * words], dtype=">u4"))


def read_idx_images(path) -> np.ndarray:
    """(count, rows, cols) uint8 from an IDX3 file (optionally gzipped)."""
    blob = _read_bytes(path)
    magic = _header(blob, 1, path)[0]
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{path}: bad IDX image magic 0x{magic:08x}", 0)
    _, count, rows, cols = _header(blob, 4, path)
    need = 16 + count * rows * cols
    if len(blob) < need:
        record = 16 + ((len(blob) - 16) // (rows * cols)) * rows * cols
        raise DataFormatError(f"{path}: truncated image data, expected {need} bytes, got {len(blob)}",
                              record)
    return np.frombuffer(blob, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    blob = _read_bytes(path)
    magic = _header(blob, 1, path)[0]
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{path}: bad IDX label magic 0x{magic:08x}", 0)
    _, count = _header(blob, 2, path)
    if len(blob) < 8 + count:
        raise DataFormatError(f"{path}: truncated labels, expected {8 + count} bytes, got {len(blob)}",
                              len(blob))
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def read_cifar_binary(path) -> tuple[np.ndarray, np.ndarray]:
    """CIFAR-10 binary records: 1 label byte + 3x32x32 pixel bytes each."""
    blob = _read_bytes(path)
    if len(blob) % CIFAR_RECORD:
        full = len(blob) // CIFAR_RECORD
        raise DataFormatError(f"{path}: {len(blob)} bytes is not a whole number of "
                              f"{CIFAR_RECORD}-byte records", full * CIFAR_RECORD)
    rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def _labels_path_for(images_path: Path) -> Path:
    name = images_path.name
    for a, b in (("images-idx3", "labels-idx1"), ("images.idx3", "labels.idx1")):
        if a in name:
            return images_path.with_name(name.replace(a, b))
    raise DataFormatError(f"{images_path}: cannot infer the label file name; pass labels_path")


def load_dataset(path, format: str = "idx-ubyte", *, labels_path=None, pad_to: int | None = None,
                 mean: Sequence[float] | None = None, std: Sequence[float] | None = None,
                 num_classes: int | None = None, offset: int = 0, limit: int | None = None) -> Dataset:
    """Load an IDX (MNIST-style) or CIFAR binary dataset.

    For ``idx-ubyte`` ``path`` is the image file and the label file is
    inferred unless ``labels_path`` is given. For ``cifar-binary`` ``path`` is
    a ``.bin`` file or a directory of ``data_batch_*.bin`` files. Images are
    scaled to [0, 1], optionally zero-padded to ``pad_to`` pixels square,
    then normalised with ``mean``/``std``. ``offset``/``limit`` select a
    contiguous slice; image ids are positions in the source file.
    """
    path = Path(path)
    if format == "idx-ubyte":
        raw = read_idx_images(path)[:, None]
        labels = read_idx_labels(labels_path or _labels_path_for(path))
        if len(labels) != len(raw):
            raise DataFormatError(f"{path}: {len(raw)} images but {len(labels)} labels")
        classes = num_classes or 10
    elif format == "cifar-binary":
        files = sorted(path.glob("data_batch_*.bin")) if path.is_dir() else [path]
        if not files:
            raise DataFormatError(f"{path}: no CIFAR batch files found")
        parts = [read_cifar_binary(f) for f in files]
        raw = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        classes = num_classes or 10
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    ids = np.arange(len(labels), dtype=np.int64)
    stop = None if limit is None else offset + limit
    raw, labels, ids = raw[offset:stop], labels[offset:stop], ids[offset:stop]
    images = raw.astype(np.float32) / 255.0
    if pad_to is not None:
        h, w = images.shape[-2:]
        if pad_to < h or pad_to < w:
            raise ConfigError(f"pad_to {pad_to} is smaller than the image size {(h, w)}")
        top, left = (pad_to - h) // 2, (pad_to - w) // 2
        images = np.pad(images, ((0, 0), (0, 0), (top, pad_to - h - top), (left, pad_to - w - left)))
    channels = images.shape[1]
    mean = tuple(mean) if mean is not None else (0.0,) * channels
    std = tuple(std) if std is not None else (1.0,) * channels
    return Dataset(normalize(images, mean, std), labels, ids, classes, mean, std)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (count, rows, cols) and labels as IDX files (gzip if ``.gz``)."""
    images = np.asarray(images, dtype=np.uint8)
    head = np.asarray([IDX_IMAGES_MAGIC, *images.shape], dtype=">u4").tobytes()
    lab = np.asarray([IDX_LABELS_MAGIC, len(labels)], dtype=">u4").tobytes()
    for p, blob in ((images_path, head + images.tobytes()),
                    (labels_path, lab + np.asarray(labels, dtype=np.uint8).tobytes())):
        p = Path(p)
        if p.suffix == ".gz":
            with gzip.GzipFile(p, "wb", mtime=0) as fh:
                fh.write(blob)
        else:
            p.write_bytes(blob)


def make_mux_batches(d: Dataset, n_mux: int, batch_size: int, seed: int = 0,
                     shuffle: bool = True, flip: bool = False) -> Iterator[MuxBatch]:
    """Yield batches of ``batch_size`` images split into ``n_mux`` slot groups.

    The order is a seeded permutation (identity without ``shuffle``); the
    final partial batch is dropped. With ``flip`` each image is mirrored
    horizontally with probability 1/2 using the same seeded generator.
    """
    if batch_size < n_mux or batch_size % n_mux:
        raise ConfigError(f"batch_size {batch_size} must be a positive multiple of n_mux {n_mux}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(d)) if shuffle else np.arange(len(d))
    g = batch_size // n_mux
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        images = d.images[idx]
        if flip:
            mask = rng.random(len(idx)) < 0.5
            images = images.copy()
            images[mask] = images[mask][..., ::-1]
        yield MuxBatch(
            groups=[images[i * g:(i + 1) * g] for i in range(n_mux)],
            labels=[d.labels[idx[i * g:(i + 1) * g]] for i in range(n_mux)],
            ids=[d.ids[idx[i * g:(i + 1) * g]] for i in range(n_mux)],
        )


def default_mnist_path() -> Path | None:
    """``$MUXFORMER_MNIST`` if set, else the bundled 5k-image MNIST subset."""
    env = os.environ.get("MUXFORMER_MNIST")
    if env:
        return Path(env)
    bundled = Path(__file__).resolve().parent / "_data" / "mnist5k-images-idx3-ubyte.gz"
    return bundled if bundled.exists() else None
