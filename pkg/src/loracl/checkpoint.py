"""Checkpoint files for parameter stores, task vectors and LoRA adapters.

Layout (little-endian)::

    offset 0   4 bytes   magic b"LCCK"
    offset 4   u32       format version (1)
    offset 8   u32       header length H
    offset 12  H bytes   UTF-8 JSON text (indented, sorted keys):
                           kind     "store" | "task-vector" | "adapters"
                           config   ViTConfig fields
                           meta     free-form (e.g. task_id)
                           entries  [{name, shape, offset, length}, ...]
    then                 payload of float64 values; entry offsets and
                         lengths are in bytes relative to the payload start

Entries are sorted by name and packed back to back, so the header alone is
enough to check arithmetic compatibility between two files.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arithmetic import TaskVector
from .data import FormatError, _read_prefix, exclusive_write
from .model import LoRAParams, ParamStore, ViTConfig, _TensorMap

CHECKPOINT_MAGIC = b"LCCK"
CHECKPOINT_VERSION = 1
KINDS = {"store": ParamStore, "task-vector": TaskVector, "adapters": LoRAParams}


class KindError(TypeError):
    pass


@dataclass
class CheckpointHeader:
    kind: str
    config: ViTConfig
    meta: dict
    entries: list[dict]
    payload_offset: int

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {e["name"]: tuple(e["shape"]) for e in self.entries}

    @property
    def payload_bytes(self) -> int:
        return sum(e["length"] for e in self.entries)


def save_checkpoint(path, obj: _TensorMap, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    if isinstance(obj, TaskVector) and obj.task_id is not None:
        meta.setdefault("task_id", obj.task_id)
    entries, offset = [], 0
    for name in sorted(obj):
        t = obj[name]
        length = 8 * t.size
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "length": length})
        offset += length
    header = json.dumps(
        {"kind": obj.kind, "config": obj.config.to_dict(), "meta": meta, "entries": entries},
        indent=1,
        sort_keys=True,
    ).encode()
    with exclusive_write(Path(path)) as tmp, open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for name in sorted(obj):
            f.write(np.ascontiguousarray(obj[name].data, dtype="<f8").tobytes())


def _validate_entries(path, entries) -> None:
    seen, expect = set(), 0
    for i, e in enumerate(entries):
        try:
            name, shape, off, length = e["name"], e["shape"], int(e["offset"]), int(e["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed entry #{i}: {exc}") from exc
        if name in seen:
            raise FormatError(f"{path}: duplicate entry name {name!r}")
        seen.add(name)
        if any(int(d) < 1 for d in shape):
            raise FormatError(f"{path}: entry {name!r} has invalid shape {shape}")
        if length != 8 * math.prod(shape):
            raise FormatError(f"{path}: entry {name!r} length {length} inconsistent with shape {shape}")
        if off != expect:
            raise FormatError(f"{path}: entry {name!r} at payload offset {off}, expected {expect} (overlap or gap)")
        expect += length


def scan_checkpoint(path) -> CheckpointHeader:
    """Read and validate the header only; the payload is not touched."""
    path = Path(path)
    with open(path, "rb") as f:
        header, pos = _read_prefix(f, path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    try:
        kind = header["kind"]
        config = ViTConfig.from_dict(header["config"])
        entries = header["entries"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: header missing or invalid field: {exc}") from exc
    if kind not in KINDS:
        raise FormatError(f"{path}: unknown kind {kind!r}")
    _validate_entries(path, entries)
    return CheckpointHeader(kind, config, header.get("meta", {}), entries, pos)


def load_checkpoint(path, expect_kind: str | None = None) -> _TensorMap:
    path = Path(path)
    hdr = scan_checkpoint(path)
    if expect_kind is not None and hdr.kind != expect_kind:
        raise KindError(f"{path}: expected a {expect_kind!r} checkpoint, found {hdr.kind!r}")
    with open(path, "rb") as f:
        f.seek(hdr.payload_offset)
        payload = f.read()
    if len(payload) != hdr.payload_bytes:
        kind = "truncated" if len(payload) < hdr.payload_bytes else "trailing bytes in"
        raise FormatError(
            f"{path}: {kind} payload: {len(payload)} bytes at offset {hdr.payload_offset}, "
            f"expected {hdr.payload_bytes}"
        )
    tensors = {}
    for e in hdr.entries:
        arr = np.frombuffer(payload, dtype="<f8", count=e["length"] // 8, offset=e["offset"])
        tensors[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    cls = KINDS[hdr.kind]
    try:
        if cls is TaskVector:
            return TaskVector(hdr.config, tensors, hdr.meta.get("task_id"))
        return cls(hdr.config, tensors)
    except (ValueError, FloatingPointError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
