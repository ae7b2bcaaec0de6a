"""Image datasets: synthetic grating generator, a binary dataset file format,
and a loader for fixed-size label+pixel record files.

Dataset file layout (all integers little-endian)::

    offset 0   4 bytes   magic b"LCDS"
    offset 4   u32       format version (1)
    offset 8   u32       header length H
    offset 12  H bytes   UTF-8 JSON: count, channels, height, width,
                         num_classes, class_names
    then       count * u16            labels
    then       count*c*h*w bytes      pixels, (n, c, h, w) row-major

The file must end exactly after the pixel block.
"""

from __future__ import annotations

import json
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DATASET_MAGIC = b"LCDS"
DATASET_VERSION = 1
SPLITS = ("pretrain", "train", "test")


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) uint8
    labels: np.ndarray  # (n,) int64
    num_classes: int
    class_names: list[str] | None = None

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.class_names)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.class_names == other.class_names
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        first = parts[0]
        return Dataset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            first.num_classes,
            first.class_names,
        )


@dataclass(frozen=True)
class SyntheticSpec:
    """Per-class grating prototypes plus Gaussian pixel noise.

    ``noise_std`` is in pixel units (0-255 range). Sample counts are per class
    and per split; the three splits come from independent random streams.
    """

    num_classes: int = 8
    image_size: int = 16
    channels: int = 3
    noise_std: float = 128.0
    seed: int = 0
    train_per_class: int = 60
    test_per_class: int = 100
    pretrain_per_class: int = 60
    style: str = "grating"

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.image_size < 2 or self.channels < 1:
            raise ValueError("image_size must be >= 2 and channels >= 1")
        if min(self.train_per_class, self.test_per_class, self.pretrain_per_class) < 0:
            raise ValueError("per-class sample counts must be >= 0")
        if self.style != "grating":
            raise ValueError(f"unknown prototype style {self.style!r}")

    def per_class(self, split: str) -> int:
        return {"pretrain": self.pretrain_per_class, "train": self.train_per_class, "test": self.test_per_class}[split]


def prototypes(spec: SyntheticSpec) -> np.ndarray:
    """One float image per class, (C, c, s, s), values inside [0, 255].

    Class ``k`` gets a sinusoidal grating at orientation ``pi * k / C`` with
    1-3 cycles across the image, and a per-channel colour offset.
    """
    C, s, ch = spec.num_classes, spec.image_size, spec.channels
    yy, xx = np.mgrid[0:s, 0:s] / s
    out = np.empty((C, ch, s, s))
    for k in range(C):
        theta = np.pi * k / C
        freq = 1 + (k % 3)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
        for c in range(ch):
            bias = 40.0 * np.cos(2 * np.pi * k / C + 2 * np.pi * c / 3)
            out[k, c] = 127.5 + 70.0 * wave + bias
    return np.clip(out, 0, 255)


def generate_synthetic(spec: SyntheticSpec, split: str = "train") -> Dataset:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    protos = prototypes(spec)
    n = spec.per_class(split)
    rng = np.random.default_rng([spec.seed, SPLITS.index(split)])
    labels = np.repeat(np.arange(spec.num_classes), n)
    noise = rng.normal(0.0, spec.noise_std, (len(labels),) + protos.shape[1:]) if spec.noise_std else 0.0
    images = np.clip(np.rint(protos[labels] + noise), 0, 255).astype(np.uint8)
    order = rng.permutation(len(labels))
    names = [f"class_{k}" for k in range(spec.num_classes)]
    return Dataset(images[order], labels[order], spec.num_classes, names)


def generate_pools(spec: SyntheticSpec) -> dict[str, Dataset]:
    return {split: generate_synthetic(spec, split) for split in SPLITS}


# ---------------------------------------------------------------- file locking


@contextmanager
def exclusive_write(path: Path) -> Iterator[Path]:
    """Yield a temp path next to ``path``; created with O_EXCL so a second
    concurrent writer fails instead of interleaving. Renamed into place on
    success, removed on failure."""
    path = Path(path)
    tmp = path.with_name(path.name + ".writing")
    fd = os.open(tmp, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _read_prefix(f, path, magic: bytes, version: int) -> tuple[dict, int]:
    head = f.read(12)
    if len(head) < 12:
        raise FormatError(f"{path}: truncated preamble ({len(head)} of 12 bytes at offset 0)")
    if head[:4] != magic:
        raise FormatError(f"{path}: bad magic {head[:4]!r} at offset 0, expected {magic!r}")
    ver, hlen = struct.unpack("<II", head[4:])
    if ver != version:
        raise FormatError(f"{path}: unsupported version {ver} at offset 4, expected {version}")
    raw = f.read(hlen)
    if len(raw) != hlen:
        raise FormatError(f"{path}: header truncated at offset {12 + len(raw)}, expected {hlen} bytes from offset 12")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header at offset 12: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header at offset 12 is not an object")
    return header, 12 + hlen


def save_dataset(path, ds: Dataset) -> None:
    n, c, h, w = ds.images.shape
    header = json.dumps(
        {"count": n, "channels": c, "height": h, "width": w, "num_classes": ds.num_classes, "class_names": ds.class_names},
        sort_keys=True,
    ).encode()
    if ds.num_classes > 65535:
        raise ValueError("labels are stored as u16")
    with exclusive_write(Path(path)) as tmp, open(tmp, "wb") as f:
        f.write(DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, len(header)))
        f.write(header)
        f.write(ds.labels.astype("<u2").tobytes())
        f.write(ds.images.tobytes())


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, "rb") as f:
        header, pos = _read_prefix(f, path, DATASET_MAGIC, DATASET_VERSION)
        try:
            n, c, h, w = (int(header[k]) for k in ("count", "channels", "height", "width"))
            num_classes = int(header["num_classes"])
            names = header.get("class_names")
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: header missing field: {exc}") from exc
        label_bytes, pixel_bytes = 2 * n, n * c * h * w
        body = f.read()
    expected = label_bytes + pixel_bytes
    if len(body) != expected:
        kind = "truncated" if len(body) < expected else "trailing bytes in"
        raise FormatError(
            f"{path}: {kind} payload: {len(body)} bytes from offset {pos}, expected {expected} "
            f"(labels at {pos}, pixels at {pos + label_bytes})"
        )
    labels = np.frombuffer(body[:label_bytes], dtype="<u2").astype(np.int64)
    images = np.frombuffer(body[label_bytes:], dtype=np.uint8).reshape(n, c, h, w).copy()
    try:
        return Dataset(images, labels, num_classes, names)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- raw records


@dataclass(frozen=True)
class RecordLayout:
    """Fixed-size records: ``label_bytes`` label then ``channels*height*width``
    pixel bytes stored channel-major (the CIFAR-10 binary layout)."""

    height: int = 32
    width: int = 32
    channels: int = 3
    num_classes: int = 10
    label_bytes: int = 1
    class_names: list[str] | None = field(default=None, compare=False)

    @property
    def pixel_bytes(self) -> int:
        return self.height * self.width * self.channels

    @property
    def record_bytes(self) -> int:
        return self.label_bytes + self.pixel_bytes


def save_raw_records(path, ds: Dataset, layout: RecordLayout) -> None:
    n = len(ds)
    rec = np.zeros((n, layout.record_bytes), dtype=np.uint8)
    labels = ds.labels.astype("<u8").view(np.uint8).reshape(n, 8)[:, : layout.label_bytes]
    rec[:, : layout.label_bytes] = labels
    rec[:, layout.label_bytes :] = ds.images.reshape(n, -1)
    with exclusive_write(Path(path)) as tmp:
        tmp.write_bytes(rec.tobytes())


def load_raw_records(path, layout: RecordLayout) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) % layout.record_bytes:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of the {layout.record_bytes}-byte record; "
            f"last partial record starts at offset {len(raw) - len(raw) % layout.record_bytes}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, layout.record_bytes)
    n = len(rec)
    lab = np.zeros((n, 8), dtype=np.uint8)
    lab[:, : layout.label_bytes] = rec[:, : layout.label_bytes]
    labels = lab.view("<u8").reshape(n).astype(np.int64)
    bad = np.flatnonzero(labels >= layout.num_classes)
    if bad.size:
        raise FormatError(
            f"{path}: record {bad[0]} (offset {bad[0] * layout.record_bytes}) has label "
            f"{labels[bad[0]]} >= num_classes {layout.num_classes}"
        )
    images = rec[:, layout.label_bytes :].reshape(n, layout.channels, layout.height, layout.width).copy()
    return Dataset(images, labels, layout.num_classes, layout.class_names)
