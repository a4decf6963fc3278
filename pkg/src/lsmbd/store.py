"""Bit-exact array container shared by datasets and checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"LSMBDARR"
    version    u32
    meta_len   u32       length of the UTF-8 JSON metadata block
    meta       meta_len bytes
    n_arrays   u32
    table      per array: name_len u16, name (UTF-8), ndim u8, dims u64[ndim]
    payload    the arrays in table order, C order, IEEE-754 float64 '<f8'
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LSMBDARR"
VERSION = 1


class FormatError(ValueError):
    """Malformed container, wrong version, or dimension mismatch on load."""


def dumps(arrays: dict, meta: dict | None = None) -> bytes:
    meta_b = json.dumps(meta or {}, sort_keys=True, allow_nan=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b,
             struct.pack("<I", len(arrays))]
    payload = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        payload.append(a.tobytes(order="C"))
    return b"".join(parts + payload)


def loads(buf: bytes) -> tuple[dict, dict]:
    mv = memoryview(buf)
    if bytes(mv[:8]) != MAGIC:
        raise FormatError("not an array container (bad magic)")
    version, meta_len = struct.unpack_from("<II", mv, 8)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} (expected {VERSION})")
    pos = 16
    meta = json.loads(bytes(mv[pos:pos + meta_len]).decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", mv, pos)
    pos += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", mv, pos)
        pos += 2
        name = bytes(mv[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", mv, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", mv, pos)
        pos += 8 * ndim
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = pos + 8 * n
        if end > len(mv):
            raise FormatError(f"truncated payload for array {name!r}")
        arrays[name] = np.frombuffer(mv[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
    if pos != len(mv):
        raise FormatError("trailing bytes after payload")
    return arrays, meta


def save(path, arrays: dict, meta: dict | None = None, overwrite: bool = True) -> str:
    path = Path(path)
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} exists; pass overwrite to replace it")
    data = dumps(arrays, meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> tuple[dict, dict]:
    return loads(Path(path).read_bytes())


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Checkpoint:
    """Learned parameters plus the metadata needed to reproduce them."""

    kind: str
    dims: dict
    params: dict
    rng: str = ""
    seed: int = 0
    history: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {"format": "lsmbd-checkpoint", "format_version": VERSION, "kind": self.kind,
                "dims": self.dims, "rng": self.rng, "seed": self.seed,
                "history": self.history, "extra": self.extra}

    def save(self, path, overwrite: bool = True) -> str:
        return save(path, self.params, self.meta(), overwrite)

    @classmethod
    def load(cls, path, kind: str | None = None, dims: dict | None = None) -> "Checkpoint":
        arrays, meta = load(path)
        if meta.get("format") != "lsmbd-checkpoint":
            raise FormatError(f"{path} is not a checkpoint")
        if meta.get("format_version") != VERSION:
            raise FormatError(f"checkpoint version {meta.get('format_version')} != {VERSION}")
        if kind is not None and meta["kind"] != kind:
            raise FormatError(f"{path} holds a {meta['kind']!r} checkpoint, expected {kind!r}")
        if dims is not None:
            bad = {k: (meta["dims"].get(k), v) for k, v in dims.items()
                   if meta["dims"].get(k) != v}
            if bad:
                raise FormatError(f"checkpoint dims mismatch (stored, expected): {bad}")
        return cls(meta["kind"], meta["dims"], arrays, meta.get("rng", ""), meta.get("seed", 0),
                   meta.get("history", {}), meta.get("extra", {}))
