"""Dataset loaders (IDX, CIFAR-10 binary, synthetic blobs), STCK checkpoints and metrics CSV."""

from __future__ import annotations

import csv
import gzip
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
STCK_MAGIC = b"STCK"
STCK_VERSION = 1


class DataFormatError(ValueError):
    """A data or checkpoint file does not have the expected layout."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class CorruptLabelError(DataFormatError):
    pass


class VersionMismatchError(DataFormatError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = ""
    split: str = ""
    num_classes: int = 10

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise CountMismatchError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise CorruptLabelError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        return Dataset(self.inputs[idx], self.labels[idx], self.name, self.split, self.num_classes)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])


def _read(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if str(path).endswith(".gz"):
        raw = gzip.decompress(raw)
    return raw


def _idx_header(raw: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: header needs {head} bytes, file has {len(raw)}")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    expected = head + math.prod(dims)
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return dims


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "") -> Dataset:
    """Read an IDX image/label pair; pixels become float32 in [0, 1]."""
    raw_i, raw_l = _read(images_path), _read(labels_path)
    n, rows, cols = _idx_header(raw_i, images_path, IDX_IMAGES_MAGIC, 3)
    (m,) = _idx_header(raw_l, labels_path, IDX_LABELS_MAGIC, 1)
    if n != m:
        raise CountMismatchError(f"{n} images but {m} labels")
    pixels = np.frombuffer(raw_i, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(raw_l, dtype=np.uint8, count=m, offset=8).astype(np.int64)
    if m and labels.max() > 9:
        raise CorruptLabelError(f"{labels_path}: label {labels.max()} outside 0..9")
    inputs = (pixels.astype(np.float32) / np.float32(255)).reshape(n, 1, rows, cols)
    return Dataset(inputs, labels, name, split)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_cifar10_bin(paths: str | os.PathLike | Sequence, split: str = "") -> Dataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 channel-planar pixels per record)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    inputs, labels = [], []
    for path in paths:
        raw = _read(path)
        if len(raw) % CIFAR_RECORD:
            raise TruncatedFileError(
                f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if len(rec) and rec[:, 0].max() > 9:
            raise CorruptLabelError(f"{path}: label byte {rec[:, 0].max()} outside 0..9")
        labels.append(rec[:, 0].astype(np.int64))
        inputs.append((rec[:, 1:].astype(np.float32) / np.float32(255)).reshape(-1, 3, 32, 32))
    return Dataset(np.concatenate(inputs), np.concatenate(labels), "cifar10", split)


def synth_blobs(seed: int, n: int, classes: int, dim: int, separation: float,
                sigma: float = 0.05) -> Dataset:
    """Gaussian clusters around equidistant centres, clipped into [0, 1].

    Centre ``k`` is ``0.25 + (separation / sqrt 2) e_k`` so every pair of
    centres is ``separation`` apart.  Labels are assigned round-robin.
    """
    if classes < 2 or n < 1 or dim < classes or separation <= 0 or sigma < 0:
        raise ValueError("need classes >= 2, n >= 1, dim >= classes, separation > 0, sigma >= 0")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    centres = np.full((classes, dim), 0.25)
    centres[np.arange(classes), np.arange(classes)] += separation / math.sqrt(2)
    x = centres[labels] + sigma * rng.standard_normal((n, dim))
    return Dataset(np.clip(x, 0, 1).astype(np.float32), labels.astype(np.int64), "blobs", "",
                   classes)


# -- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    spec: dict
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    epoch: int = 0
    metrics: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.spec == other.spec and self.config == other.config
                and self.epoch == other.epoch and self.metrics == other.metrics
                and list(self.tensors) == list(other.tensors)
                and all(self.tensors[k].shape == other.tensors[k].shape
                        and self.tensors[k].tobytes() == other.tensors[k].tobytes()
                        for k in self.tensors))


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(STCK_MAGIC)
    buf.write(struct.pack("<I", STCK_VERSION))
    buf.write(_text(_dumps(ckpt.spec)))
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, t in ckpt.tensors.items():
        t = np.asarray(t, dtype="<f4")
        buf.write(_text(name))
        buf.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        buf.write(t.tobytes())
    buf.write(_text(_dumps({"config": ckpt.config, "epoch": ckpt.epoch, "metrics": ckpt.metrics})))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise TruncatedFileError(
                f"{self.path}: need {n} bytes at offset {self.pos}, file has {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(_read(path), path)
    if r.take(4) != STCK_MAGIC:
        raise BadMagicError(f"{path}: not an STCK file")
    version = r.u32()
    if version != STCK_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this reader supports {STCK_VERSION}")
    try:
        spec = json.loads(r.text())
        tensors = {}
        for _ in range(r.u32()):
            name = r.text()
            ndim = r.u32()
            dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            count = math.prod(dims)
            payload = r.take(4 * count)
            tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        tail = json.loads(r.text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt metadata ({exc})") from None
    return Checkpoint(spec, tensors, tail.get("config", {}), tail.get("epoch", 0), tail.get("metrics", {}))


# -- metrics ----------------------------------------------------------------


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_loss: float | None
    clean_acc: float
    pgd20_acc: float
    attack_accs: dict[str, float] = field(default_factory=dict)
    collab_ratio: float | None = None
    seconds: float = 0.0


BASE_COLUMNS = ("epoch", "lr", "train_loss", "clean_acc", "pgd20_acc")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.6g}"


def metrics_columns(records: Iterable[MetricsRecord], include_timing: bool = False) -> list[str]:
    records = list(records)
    extra = sorted({k for r in records for k in r.attack_accs})
    cols = [*BASE_COLUMNS, *(f"acc_{k}" for k in extra)]
    if any(r.collab_ratio is not None for r in records):
        cols.append("collab_ratio")
    if include_timing:
        cols.append("seconds")
    return cols


def write_metrics(path, records: Iterable[MetricsRecord], include_timing: bool = False) -> None:
    """Header plus one row per record, 6 significant digits.

    Wall-clock seconds are left out unless ``include_timing`` so that equal
    seeds give byte-identical files.
    """
    records = list(records)
    cols = metrics_columns(records, include_timing)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            row = []
            for c in cols:
                if c.startswith("acc_"):
                    row.append(_fmt(r.attack_accs.get(c[4:])))
                else:
                    row.append(_fmt(getattr(r, c)))
            w.writerow(row)


def read_metrics(path) -> list[MetricsRecord]:
    def num(s, kind=float):
        return None if s == "" else kind(s)

    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            accs = {k[4:]: float(v) for k, v in row.items() if k.startswith("acc_") and v != ""}
            out.append(MetricsRecord(
                epoch=int(row["epoch"]), lr=float(row["lr"]), train_loss=num(row["train_loss"]),
                clean_acc=float(row["clean_acc"]), pgd20_acc=float(row["pgd20_acc"]),
                attack_accs=accs, collab_ratio=num(row.get("collab_ratio", "")),
                seconds=num(row.get("seconds", "")) or 0.0))
    return out


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> None:
    """Plain CSV writer used by the probes; ``comments`` become leading ``#`` lines."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        for c in comments:
            f.write(f"# {c}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating, int, np.integer)) else v
                        for v in row])
