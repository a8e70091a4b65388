"""Binary checkpoint format.

Layout, all integers little-endian:

    magic   4 bytes  b"SYMN"
    version u32      currently 1
    hdr_len u32      length of the JSON header in bytes
    header  bytes    canonical JSON: {"classes", "config", "rng", "step"}
    records repeated until EOF:
        name_len u32, name utf-8, dtype_tag u8, rank u32,
        extents rank * u64, payload (raw array bytes, C order)

Records hold model parameters under their parameter names, the frozen
class-embedding table under "embeddings/table", and optimizer momentum
under "velocity/<param>". A load followed by a save reproduces the file
byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .config import Config
from .encoder import ClassEmbeddings

__all__ = ["CheckpointFormatError", "Checkpoint", "save_checkpoint",
           "load_checkpoint", "restore_model", "MAGIC", "VERSION"]

MAGIC = b"SYMN"
VERSION = 1

_DTYPE_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointFormatError(Exception):
    """Malformed checkpoint; message carries the byte offset."""


@dataclass
class Checkpoint:
    config: Config
    classes: list[str]
    rng_state: dict
    step: int
    arrays: dict[str, np.ndarray]


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, config: Config, classes: list[str],
                    rng_state: dict, step: int,
                    arrays: Mapping[str, np.ndarray]) -> None:
    header = _canonical_json({"classes": list(classes),
                              "config": config.to_dict(),
                              "rng": rng_state, "step": int(step)})
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise ValueError(f"cannot serialize dtype {arr.dtype} "
                             f"for '{name}'")
        nm = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nm)))
        parts.append(nm)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype(_TAG_DTYPES[tag], copy=False).tobytes())
    data = b"".join(parts)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(
                f"truncated while reading {what} at offset {self.pos} "
                f"(need {n} bytes, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(
            f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    version, hdr_len = r.unpack("<II", "version header")
    if version != VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version} at offset 4 "
            f"(this build reads version {VERSION})")
    try:
        header = json.loads(r.take(hdr_len, "JSON header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable JSON header: {exc}")
    for key in ("classes", "config", "rng", "step"):
        if key not in header:
            raise CheckpointFormatError(f"JSON header missing '{key}'")

    arrays: dict[str, np.ndarray] = {}
    while r.pos < len(buf):
        at = r.pos
        (name_len,) = r.unpack("<I", "record name length")
        name = r.take(name_len, "record name").decode("utf-8")
        tag, rank = r.unpack("<BI", "record dtype/rank")
        if tag not in _TAG_DTYPES:
            raise CheckpointFormatError(
                f"unknown dtype tag {tag} in record '{name}' at offset {at}")
        shape = r.unpack(f"<{rank}Q", "record extents")
        dtype = _TAG_DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = r.take(count * dtype.itemsize, f"payload of '{name}'")
        if name in arrays:
            raise CheckpointFormatError(
                f"duplicate record '{name}' at offset {at}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return Checkpoint(config=Config.from_dict(header["config"]),
                      classes=list(header["classes"]),
                      rng_state=header["rng"], step=int(header["step"]),
                      arrays=arrays)


def restore_model(ckpt: Checkpoint):
    """Rebuild the model (and its embeddings) from a loaded checkpoint.

    Returns (model, velocity_arrays). Parameter names must match the
    freshly built model exactly.
    """
    from .model import FewShotModel

    if "embeddings/table" not in ckpt.arrays:
        raise CheckpointFormatError("checkpoint lacks 'embeddings/table'")
    emb = ClassEmbeddings(ckpt.classes, ckpt.arrays["embeddings/table"])
    model = FewShotModel(ckpt.config, emb,
                         np.random.default_rng(ckpt.config.seed))
    params = model.named_parameters()
    velocity = {}
    seen = set()
    for name, arr in ckpt.arrays.items():
        if name == "embeddings/table":
            continue
        if name.startswith("velocity/"):
            velocity[name] = arr
            continue
        if name not in params:
            raise CheckpointFormatError(
                f"checkpoint parameter '{name}' not present in model")
        p = params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointFormatError(
                f"shape mismatch for '{name}': checkpoint "
                f"{arr.shape}, model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointFormatError(
            f"checkpoint is missing parameters: {sorted(missing)}")
    return model, velocity
