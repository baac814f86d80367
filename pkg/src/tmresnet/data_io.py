"""Datasets, checkpoint persistence and metrics logging.

Checkpoint byte layout (all integers little-endian)::

    0   8 bytes   magic b"TMRCKPT\\0"
    8   u32       format version (currently 1)
    12  u32       header length L
    16  L bytes   UTF-8 JSON header:
                    {"config": ModelConfig dict, "step": int, "dtype": "<f4" | "<f8",
                     "tensors": [{"name": str, "shape": [int, ...]}, ...]}
    16+L          tensor blobs, concatenated in header order, each
                  prod(shape) values of ``dtype`` in row-major order

Blobs are float32 unless the model itself is float64.
"""
from __future__ import annotations

import csv
import gzip
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import (
    BadMagic,
    ConfigError,
    CorruptBlob,
    DimensionMismatch,
    FileMissing,
    LabelOutOfRange,
    TruncatedRecord,
    UnsupportedVersion,
)
from .stacks import ModelConfig, ResNet, build_model

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class DatasetRecord:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    label: int


def to_arrays(records: List[DatasetRecord]) -> Tuple[np.ndarray, np.ndarray]:
    if not records:
        return np.zeros((0, 0, 0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64)
    x = np.stack([r.image for r in records]).astype(np.float32, copy=False)
    y = np.array([r.label for r in records], dtype=np.int64)
    return x, y


def _split(split: str) -> str:
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    return split


# CIFAR-10 ---------------------------------------------------------------------


def load_cifar10_file(path, classes: int = 10) -> List[DatasetRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileMissing(f"CIFAR-10 batch file not found: {path}")
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise TruncatedRecord(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = arr[:, 0]
    if labels.size and labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise LabelOutOfRange(f"{path}: record {bad} has label {labels[bad]} (classes={classes})")
    images = (arr[:, 1:].reshape(-1, 3, 32, 32) / 255.0).astype(np.float32)
    return [DatasetRecord(img, int(lbl)) for img, lbl in zip(images, labels)]


def load_cifar10(directory, split: str = "train") -> List[DatasetRecord]:
    """Read the standard binary batches (1 label byte + 3072 channel-major pixels per record)."""
    directory = Path(directory)
    names = CIFAR_TRAIN_FILES if _split(split) == "train" else CIFAR_TEST_FILES
    missing = [n for n in names if not (directory / n).is_file()]
    if missing:
        raise FileMissing(f"{directory}: missing CIFAR-10 files {missing}")
    out: List[DatasetRecord] = []
    for n in names:
        out.extend(load_cifar10_file(directory / n))
    return out


# MNIST IDX --------------------------------------------------------------------

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _read_maybe_gz(directory: Path, name: str) -> bytes:
    for candidate in (directory / name, directory / (name + ".gz")):
        if candidate.is_file():
            data = candidate.read_bytes()
            return gzip.decompress(data) if candidate.suffix == ".gz" else data
    raise FileMissing(f"{directory}: missing MNIST file {name}")


def parse_idx_images(raw: bytes) -> np.ndarray:
    if len(raw) < 16:
        raise TruncatedRecord("IDX image header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != 0x00000803:
        raise BadMagic(f"IDX image magic {magic:#010x}, expected 0x00000803")
    if len(raw) - 16 != n * rows * cols:
        raise TruncatedRecord(f"IDX image payload has {len(raw) - 16} bytes, header declares {n * rows * cols}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def parse_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise TruncatedRecord("IDX label header truncated")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != 0x00000801:
        raise BadMagic(f"IDX label magic {magic:#010x}, expected 0x00000801")
    if len(raw) - 8 != n:
        raise TruncatedRecord(f"IDX label payload has {len(raw) - 8} bytes, header declares {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def load_mnist_idx(directory, split: str = "train", classes: int = 10) -> List[DatasetRecord]:
    directory = Path(directory)
    img_name, lbl_name = _MNIST_FILES[_split(split)]
    images = parse_idx_images(_read_maybe_gz(directory, img_name))
    labels = parse_idx_labels(_read_maybe_gz(directory, lbl_name))
    if images.shape[0] != labels.shape[0]:
        raise DimensionMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= classes:
        raise LabelOutOfRange(f"label {labels.max()} out of range (classes={classes})")
    scaled = (images / 255.0).astype(np.float32)[:, None, :, :]
    return [DatasetRecord(img, int(lbl)) for img, lbl in zip(scaled, labels)]


# Synthetic --------------------------------------------------------------------


def synth_dataset(seed: int, n: int, classes: int, size: int, channels: int = 3) -> List[DatasetRecord]:
    """Class-conditional Gaussian blobs on a noisy background.

    Labels are assigned round-robin. Class k places a bright blob on a ring
    around the image centre at angle 2*pi*k/classes, jittered by up to
    size/16 pixels; pixel noise has sigma 0.1 and values are clipped to [0, 1].
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    radius, width, jitter = size / 4.0, size / 8.0, size / 16.0
    out = []
    for i in range(n):
        k = i % classes
        angle = 2 * math.pi * k / classes
        cy = (size - 1) / 2 + radius * math.sin(angle) + rng.uniform(-jitter, jitter)
        cx = (size - 1) / 2 + radius * math.cos(angle) + rng.uniform(-jitter, jitter)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        img = blob[None, :, :] + 0.1 * rng.standard_normal((channels, size, size))
        out.append(DatasetRecord(np.clip(img, 0.0, 1.0).astype(np.float32), k))
    return out


SYNTH_TEST_SEED_OFFSET = 7919


def synth_split(seed: int, split: str, n: int, classes: int, size: int, channels: int = 3) -> List[DatasetRecord]:
    """Train and test splits draw from disjoint seeds."""
    offset = SYNTH_TEST_SEED_OFFSET if _split(split) == "test" else 0
    return synth_dataset(seed + offset, n, classes, size, channels)


# Preprocessing ----------------------------------------------------------------


def normalize(x: np.ndarray, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    c = x.shape[1]
    m = np.asarray(mean[:c], dtype=x.dtype).reshape(1, c, 1, 1)
    s = np.asarray(std[:c], dtype=x.dtype).reshape(1, c, 1, 1)
    return (x - m) / s


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop after zero padding, then random horizontal flip."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# Checkpoints ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TMRCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    tensors: Dict[str, np.ndarray]  # parameters and BN running stats, by path
    step: int = 0


def save_checkpoint(model: ResNet, path, step: int = 0) -> None:
    state = model.state_dict()
    dtype = "<f8" if model.dtype == np.float64 else "<f4"
    header = {
        "config": model.config.to_dict(),
        "step": int(step),
        "dtype": dtype,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for v in state.values():
            fh.write(np.ascontiguousarray(v, dtype=dtype).tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != CHECKPOINT_MAGIC:
        raise CorruptBlob(f"{path}: not a checkpoint (bad magic or short header)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"{path}: checkpoint version {version}, supported: {CHECKPOINT_VERSION}")
    if len(raw) < 16 + hlen:
        raise CorruptBlob(f"{path}: header truncated")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        dtype = np.dtype(header["dtype"])
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptBlob(f"{path}: unreadable header ({exc})") from exc
    if dtype.str not in ("<f4", "<f8"):
        raise CorruptBlob(f"{path}: unsupported blob dtype {dtype.str}")

    expected = build_model(config).state_dict()
    if [e["name"] for e in entries] != list(expected) or any(
        tuple(e["shape"]) != expected[e["name"]].shape for e in entries
    ):
        raise CorruptBlob(f"{path}: tensor table does not match the architecture in its config")
    offset = 16 + hlen
    tensors = {}
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise CorruptBlob(f"{path}: blob {e['name']} truncated")
        tensors[e["name"]] = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(e["shape"])
        offset += nbytes
    if offset != len(raw):
        raise CorruptBlob(f"{path}: {len(raw) - offset} trailing bytes after last blob")
    return Checkpoint(version, config, tensors, int(header.get("step", 0)))


def _same_architecture(a: ModelConfig, b: ModelConfig) -> bool:
    da, db = a.to_dict(), b.to_dict()
    da.pop("seed")
    db.pop("seed")
    return da == db


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> ResNet:
    """Rebuild the model recorded in ``path``; ``expect`` must describe the same architecture."""
    ckpt = read_checkpoint(path)
    if expect is not None and not _same_architecture(ckpt.config, expect):
        raise ConfigError("config", "checkpoint architecture does not match the requested config")
    dtype = np.float64 if next(iter(ckpt.tensors.values())).dtype == np.float64 else np.float32
    model = build_model(ckpt.config, dtype=dtype)
    model.load_state_dict(ckpt.tensors)
    model.step = ckpt.step
    return model


# Metrics ----------------------------------------------------------------------

METRICS_HEADER = ("epoch", "split", "loss", "accuracy", "lr", "wall_s")


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float
    wall_s: float = 0.0

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if not self.loss >= 0.0:
            raise ValueError(f"loss {self.loss} must be >= 0")


def _fmt(x: float) -> str:
    return format(float(x), "#.6g")


def append_metrics(path, row: MetricsRow) -> None:
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(METRICS_HEADER)
        writer.writerow(
            [row.epoch, row.split, _fmt(row.loss), _fmt(row.accuracy), _fmt(row.lr), _fmt(row.wall_s)]
        )


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
