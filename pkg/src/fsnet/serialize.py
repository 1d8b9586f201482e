"""Binary containers for tensors and model checkpoints.

Tensor container layout (all integers little-endian):

    magic   4 bytes  b"FSNT"
    version u32      currently 1
    rank    u32
    extents u64 * rank
    dtype   u32      1 = float32, 2 = float64
    values  raw little-endian array data, row-major

A checkpoint wraps a plain-text key/value manifest plus a sequence of
named tensor containers:

    magic    4 bytes  b"FSCK"
    version  u32      currently 1
    manifest u64 byte length, then UTF-8 "key = value" lines
    count    u32
    entries  count * (u16 name length, UTF-8 name, tensor container)
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

TENSOR_MAGIC = b"FSNT"
CHECKPOINT_MAGIC = b"FSCK"
FORMAT_VERSION = 1

_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_FOR_KIND = {"<f4": 1, "<f8": 2}


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated file while reading {what}")
    return buf


def write_tensor(f, arr):
    """Append one tensor container to an open binary stream."""
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        data = arr.astype("<f4", copy=False)
    elif arr.dtype == np.float64:
        data = arr.astype("<f8", copy=False)
    else:
        data = arr.astype("<f4")
    tag = _TAG_FOR_KIND[data.dtype.str]
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<II", FORMAT_VERSION, data.ndim))
    f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    f.write(struct.pack("<I", tag))
    f.write(np.ascontiguousarray(data).tobytes())


def read_tensor(f):
    """Read one tensor container from an open binary stream."""
    magic = _read_exact(f, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    version, rank = struct.unpack("<II", _read_exact(f, 8, "header"))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor container version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "extents")) if rank else ()
    (tag,) = struct.unpack("<I", _read_exact(f, 4, "dtype tag"))
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = _read_exact(f, count * dtype.itemsize, "tensor values")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_tensor(path, arr):
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor(f)


def _format_manifest(fields):
    lines = [f"{key} = {value}" for key, value in fields.items()]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def parse_manifest(text):
    """Parse "key = value" lines, ignoring blanks and # comments."""
    fields = OrderedDict()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"manifest line {lineno} is not 'key = value': {line!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    return fields


def save_checkpoint(path, manifest_fields, tensors):
    """Write a manifest dict plus an ordered name -> array mapping."""
    manifest = _format_manifest(manifest_fields)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"tensor name too long: {name!r}")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            write_tensor(f, arr)


def load_checkpoint(path):
    """Read a checkpoint; returns (manifest dict, ordered name -> array)."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "checkpoint magic")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "checkpoint version"))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<Q", _read_exact(f, 8, "manifest length"))
        manifest = parse_manifest(_read_exact(f, mlen, "manifest").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "tensor name").decode("utf-8")
            tensors[name] = read_tensor(f)
        return manifest, tensors
