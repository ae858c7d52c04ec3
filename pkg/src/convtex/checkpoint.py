"""Portable binary parameter bundles.

File layout (all integers little-endian):

    magic        4 bytes  b"CVMT"
    version      u32      currently 1
    blob length  u32
    blob         utf-8 text, flat ``key=value`` lines (config, vocabulary
                 hash, initialization scheme, ink polarity, epoch, ...)
    count        u32      number of parameter records
    per record:
        name length  u32
        name         utf-8
        rank         u32
        extents      rank x u64
        data         raw little-endian f32, C order

Floats round-trip bit-exactly, so a loss computed before a save equals the
loss computed after the matching load.  Writes go through a temporary file
and an atomic rename so a crash mid-save never corrupts an existing file.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import DataError
from .tensor import Parameter

MAGIC = b"CVMT"
VERSION = 1


def _pack_meta(meta):
    for key, value in meta.items():
        if "=" in key or "\n" in key:
            raise ValueError(f"bad metadata key {key!r}")
        if "\n" in str(value):
            raise ValueError(f"metadata value for {key!r} contains a newline")
    lines = "".join(f"{k}={v}\n" for k, v in sorted(meta.items()))
    return lines.encode("utf-8")


def _parse_meta(blob, path):
    meta = {}
    for ln, line in enumerate(blob.decode("utf-8").splitlines(), start=1):
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}: metadata line {ln} is not key=value")
        key, _, value = line.partition("=")
        meta[key] = value
    return meta


def save_checkpoint(path, params, meta):
    """Write named parameters plus a flat string-to-string metadata map.

    ``params`` is an iterable of Parameter or a name->Parameter mapping.
    """
    if isinstance(params, dict):
        params = list(params.values())
    blob = _pack_meta({str(k): str(v) for k, v in meta.items()})
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", len(params)))
            for p in params:
                name = p.name.encode("utf-8")
                arr = np.ascontiguousarray(p.value.data, dtype="<f4")
                f.write(struct.pack("<I", len(name)))
                f.write(name)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                f.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, path):
        self.path = path
        with open(path, "rb") as f:
            self.buf = f.read()
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise DataError(
                f"{self.path}: truncated reading {what} at byte {self.off}"
            )
        piece = self.buf[self.off : self.off + n]
        self.off += n
        return piece

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path):
    """Read a checkpoint -> (meta dict, name -> float32 ndarray dict)."""
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    r = _Reader(path)
    if r.take(4, "magic") != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    meta = _parse_meta(r.take(r.u32("metadata length"), "metadata"), path)
    arrays = {}
    for i in range(r.u32("record count")):
        what = f"record {i}"
        name = r.take(r.u32(f"{what} name length"), f"{what} name").decode("utf-8")
        rank = r.u32(f"{what} rank")
        if rank > 8:
            raise DataError(f"{path}: {what} has implausible rank {rank}")
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"{what} extents"))
        count = 1
        for extent in shape:
            count *= extent
        data = np.frombuffer(r.take(4 * count, f"{what} data"), dtype="<f4")
        if name in arrays:
            raise DataError(f"{path}: duplicate record name {name!r}")
        arrays[name] = data.reshape(shape).astype(np.float32)
    if r.off != len(r.buf):
        raise DataError(f"{path}: {len(r.buf) - r.off} trailing bytes")
    return meta, arrays


def restore_parameters(params, arrays, path="checkpoint"):
    """Copy loaded arrays into live Parameters in place; shapes must match."""
    by_name = {p.name: p for p in (params.values() if isinstance(params, dict) else params)}
    missing = sorted(set(by_name) - set(arrays))
    extra = sorted(set(arrays) - set(by_name))
    if missing or extra:
        raise DataError(
            f"{path}: parameter names do not match the model"
            + (f"; missing {missing}" if missing else "")
            + (f"; unexpected {extra}" if extra else "")
        )
    for name, p in by_name.items():
        if arrays[name].shape != p.value.data.shape:
            raise DataError(
                f"{path}: {name} has shape {arrays[name].shape}, "
                f"model expects {p.value.data.shape}"
            )
        p.value.data[...] = arrays[name]


def parameters_to_list(params):
    if isinstance(params, dict):
        return list(params.values())
    return [p for p in params if isinstance(p, Parameter)]
