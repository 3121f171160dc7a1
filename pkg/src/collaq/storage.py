"""Binary checkpoints and metrics CSV.

Checkpoint layout, all little-endian::

    b"CLQ1" | version u32 | config hash (32 bytes) | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 x rank | float32 data

Tensors are stored as ``params/<name>`` and ``target/<name>``.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .learner import METRIC_COLUMNS
from .nnet import ParamStore

MAGIC = b"CLQ1"
VERSION = 1
HASH_LEN = 32
INT_COLUMNS = ("step", "episode")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config_hash: bytes
    params: ParamStore
    target: ParamStore


def encode_checkpoint(params: ParamStore, target: ParamStore, config_hash: bytes) -> bytes:
    if len(config_hash) != HASH_LEN:
        raise ValueError(f"config hash must be {HASH_LEN} bytes")
    tensors = [(f"params/{k}", v) for k, v in params.items()]
    tensors += [(f"target/{k}", v) for k, v in target.items()]
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(config_hash)
    out.write(struct.pack("<I", len(tensors)))
    for name, v in tensors:
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", v.ndim))
        out.write(struct.pack(f"<{v.ndim}I", *v.shape))
        out.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return out.getvalue()


def write_checkpoint(params: ParamStore, target: ParamStore, config_hash: bytes, path) -> None:
    """Write atomically: a temporary file is renamed into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(params, target, config_hash))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, "
                                  f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, expected_hash: bytes | None = None,
                      force: bool = False) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    h = r.take(HASH_LEN)
    if expected_hash is not None and h != expected_hash and not force:
        raise CheckpointError(f"config hash mismatch: checkpoint {h.hex()[:12]}, "
                              f"config {expected_hash.hex()[:12]} (use --force to override)")
    (count,) = r.unpack("<I")
    params, target = ParamStore(), ParamStore()
    for _ in range(count):
        (n,) = r.unpack("<H")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("corrupt tensor name") from e
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = math.prod(dims)
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        group, _, key = name.partition("/")
        if group == "params":
            params[key] = arr
        elif group == "target":
            target[key] = arr
        else:
            raise CheckpointError(f"unexpected tensor {name!r}")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last tensor")
    return Checkpoint(h, params, target)


def read_checkpoint(path, expected_hash: bytes | None = None, force: bool = False) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected_hash, force)


def format_metric(column: str, value) -> str:
    if column in INT_COLUMNS:
        return str(int(value))
    v = float(value)
    if not math.isfinite(v):
        raise ValueError(f"non-finite metric {column}={v}")
    return format(v, ".9g")


def append_metrics(row: dict, path) -> None:
    """Append one row; the header goes in first when the file is new or empty."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        w.writerow([format_metric(c, row[c]) for c in METRIC_COLUMNS])


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        return [{k: (int(v) if k in INT_COLUMNS else float(v)) for k, v in row.items()}
                for row in reader]
