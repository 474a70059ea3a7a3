"""Binary checkpoint container and the ``key = value`` run-config grammar.

Checkpoint layout (all integers little-endian)::

    bytes 0..8    magic  b"PLAMCKPT"
    bytes 8..12   u32    format version (1)
    bytes 12..16  u32    header length H
    bytes 16..16+H       UTF-8 JSON header, keys sorted, no whitespace:
                         {"config": {...}, "kind": "...",
                          "tensors": [{"dtype": "f32", "length": ..., "name": ...,
                                       "offset": ..., "shape": [...]}, ...]}
    bytes 16+H..         payload: raw little-endian float32 tensors, row-major,
                         at the listed offsets (relative to payload start)

Tensors are written in canonical name order, so any permutation of the
same tensor map produces byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Checkpoint, ModelConfig, name_sort_key

MAGIC = b"PLAMCKPT"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointFormatError(ValueError):
    """Raised for any malformed checkpoint file."""


def _header_bytes(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_tensors(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize a tensor map plus arbitrary JSON metadata into the container."""
    names = sorted(tensors, key=name_sort_key)
    if len(set(names)) != len(names):
        raise CheckpointFormatError("duplicate tensor names")
    table, chunks, offset = [], [], 0
    for name in names:
        arr = np.asarray(tensors[name])
        if arr.dtype != np.float32:
            raise CheckpointFormatError(f"{name}: only float32 tensors can be saved (got {arr.dtype})")
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        table.append({"name": name, "dtype": "f32", "shape": list(arr.shape),
                      "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = _header_bytes({**meta, "tensors": table})
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(header)), header, *chunks])


def decode_tensors(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of :func:`encode_tensors`, with full consistency checks."""
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointFormatError("magic mismatch")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise CheckpointFormatError(f"version mismatch: file {version}, reader {VERSION}")
    if 16 + hlen > len(blob):
        raise CheckpointFormatError("truncated header")
    try:
        meta = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    payload = memoryview(blob)[16 + hlen:]
    table = meta.pop("tensors", None)
    if not isinstance(table, list):
        raise CheckpointFormatError("header lacks tensor table")
    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in table:
        name = entry.get("name")
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        if entry.get("dtype") != "f32":
            raise CheckpointFormatError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        length, offset = int(entry["length"]), int(entry["offset"])
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointFormatError(f"{name}: byte length {length} inconsistent with shape {shape}")
        if offset != expected_offset:
            raise CheckpointFormatError(f"{name}: offset {offset} overlaps or leaves a gap (expected {expected_offset})")
        if offset + length > len(payload):
            raise CheckpointFormatError("truncated payload")
        tensors[name] = np.frombuffer(payload[offset:offset + length], dtype=_F32).reshape(shape).astype(np.float32, copy=False)
        expected_offset = offset + length
    if expected_offset != len(payload):
        raise CheckpointFormatError(f"payload has {len(payload) - expected_offset} trailing bytes")
    return meta, tensors


def to_bytes(ckpt: Checkpoint) -> bytes:
    return encode_tensors({"config": ckpt.config.to_dict(), "kind": ckpt.kind}, ckpt.tensors)


def from_bytes(blob: bytes) -> Checkpoint:
    meta, tensors = decode_tensors(blob)
    try:
        config = ModelConfig.from_dict(meta["config"])
        return Checkpoint(config, tensors, meta["kind"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"inconsistent checkpoint: {exc}") from exc


def digest(ckpt: Checkpoint) -> str:
    """SHA-256 over the canonical serialized bytes."""
    return hashlib.sha256(to_bytes(ckpt)).hexdigest()


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, to_bytes(ckpt))


def load(path: str | os.PathLike) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


@dataclass
class DiffReport:
    max_abs: dict[str, float]
    bitwise_equal: dict[str, bool]

    @property
    def equal_bitwise(self) -> bool:
        return all(self.bitwise_equal.values())

    def nonzero(self) -> dict[str, float]:
        return {k: v for k, v in self.max_abs.items() if v != 0.0}

    def to_rows(self) -> list[dict]:
        return [{"name": k, "max_abs_diff": self.max_abs[k], "bitwise_equal": self.bitwise_equal[k]}
                for k in self.max_abs]


def diff(a: Checkpoint, b: Checkpoint) -> DiffReport:
    """Per-tensor max |a - b| plus a bitwise-equality flag."""
    if a.config != b.config:
        raise ValueError("checkpoints have different configs")
    if set(a.tensors) != set(b.tensors):
        raise ValueError(f"tensor name sets differ: {sorted(set(a.tensors) ^ set(b.tensors))[:5]}")
    max_abs, bitwise = {}, {}
    for name in sorted(a.tensors, key=name_sort_key):
        x, y = a[name], b[name]
        max_abs[name] = float(np.max(np.abs(x.astype(np.float64) - y.astype(np.float64)), initial=0.0))
        bitwise[name] = x.dtype == y.dtype and x.tobytes() == y.tobytes()
    return DiffReport(max_abs, bitwise)


# --- key = value run configuration -------------------------------------------------

def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(values: dict, header: str | None = None) -> str:
    lines = [f"# {line}" for line in (header or "").splitlines()]
    lines += [f"{k} = {v}" for k, v in values.items()]
    return "\n".join(lines) + "\n"


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def write_kv(path: str | os.PathLike, values: dict, header: str | None = None) -> None:
    atomic_write_text(path, format_kv(values, header))
