"""IDFV tensor files and checkpoint directories.

IDFV layout::

    b"IDFV" | version 0x01 | rank (u8) | rank x u32 LE dims | float32 LE payload

A checkpoint directory holds one ``<name>.idfv`` per tensor, ``config.txt``
with the model configuration, ``meta.txt`` and ``manifest.txt`` with one
``name<TAB>shape<TAB>checksum`` line per tensor (blake2b-64 of the file
bytes, hex).
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError, ValidationError

MAGIC = b"IDFV"
VERSION = 1
MANIFEST = "manifest.txt"


def encode_idfv(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise ValidationError(f"rank {arr.ndim} does not fit in one byte")
    if any(d < 1 for d in arr.shape):
        raise ValidationError(f"IDFV dimensions must be positive, got {arr.shape}")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise ValidationError(f"dimension too large for u32: {arr.shape}")
    header = MAGIC + bytes([VERSION, arr.ndim]) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_idfv(blob: bytes, path=None) -> np.ndarray:
    if len(blob) < 6:
        raise FormatError(f"truncated header: {len(blob)} bytes", position=len(blob), path=path)
    if blob[:4] != MAGIC:
        bad = next(i for i in range(4) if blob[i] != MAGIC[i])
        raise FormatError(f"bad magic {blob[:4]!r}", position=bad, path=path)
    if blob[4] != VERSION:
        raise FormatError(f"unsupported version {blob[4]}", position=4, path=path)
    rank = blob[5]
    dims_end = 6 + 4 * rank
    if len(blob) < dims_end:
        raise FormatError(f"truncated dimension table for rank {rank}", position=len(blob), path=path)
    dims = struct.unpack(f"<{rank}I", blob[6:dims_end])
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError("zero-sized dimension", position=6 + 4 * i, path=path)
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    payload = len(blob) - dims_end
    if payload < expected:
        raise FormatError(f"truncated payload: {payload} of {expected} bytes", position=len(blob), path=path)
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes after payload", position=dims_end + expected, path=path)
    return np.frombuffer(blob, dtype="<f4", offset=dims_end).reshape(dims).astype(np.float32)


def write_idfv(path, array) -> bytes:
    blob = encode_idfv(array)
    Path(path).write_bytes(blob)
    return blob


def read_idfv(path) -> np.ndarray:
    path = Path(path)
    return decode_idfv(path.read_bytes(), path=path)


def checksum(blob: bytes) -> str:
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def _shape_text(shape) -> str:
    return "x".join(str(d) for d in shape)


def save_tensors(directory, tensors: dict, extra_files: dict | None = None) -> Path:
    """Write ``tensors`` (name -> array) plus a checksummed manifest.

    The directory is rebuilt from scratch so stale files never survive.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for old in directory.iterdir():
        if old.is_file():
            old.unlink()
    lines = []
    for name, array in tensors.items():
        if "/" in name or os.sep in name or not name:
            raise ValidationError(f"invalid tensor name {name!r}")
        array = np.asarray(array)
        if not np.all(np.isfinite(array)):
            raise ValidationError(f"refusing to save non-finite tensor {name!r}")
        blob = write_idfv(directory / f"{name}.idfv", array)
        lines.append(f"{name}\t{_shape_text(array.shape)}\t{checksum(blob)}\n")
    for filename, text in (extra_files or {}).items():
        (directory / filename).write_text(text)
    (directory / MANIFEST).write_text("".join(lines))
    return directory


def load_tensors(directory) -> dict:
    """Read every tensor listed in the manifest, verifying shape and checksum."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest in {directory}")
    out = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            name, shape, digest = line.split("\t")
        except ValueError as exc:
            raise FormatError(f"malformed manifest line {lineno}", path=manifest) from exc
        path = directory / f"{name}.idfv"
        blob = path.read_bytes()
        if checksum(blob) != digest:
            raise FormatError(f"checksum mismatch for tensor {name!r}", path=path)
        array = decode_idfv(blob, path=path)
        if _shape_text(array.shape) != shape:
            raise FormatError(f"shape {array.shape} disagrees with manifest {shape}", path=path)
        out[name] = array
    return out
