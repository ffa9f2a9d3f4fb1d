"""VLCK checkpoint container.

Layout (little-endian)::

    "VLCK"  u32 version
    u32 text length, UTF-8 canonical key=value block (config and scalar state)
    u32 record count, then per record:
        u16 name length, UTF-8 name, u32 rank, rank x u32 extents,
        prod(extents) x f32 values

Writes go to a temporary file that is renamed over the target, so a reader
never sees a half-written checkpoint.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .config import format_kv, parse_kv
from .errors import ConfigError, FormatError

CHECKPOINT_MAGIC = b"VLCK"
CHECKPOINT_VERSION = 1


def encode_checkpoint(config, records):
    """Serialize a str->str mapping and a name->array mapping to bytes."""
    text = format_kv(config).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(text)), text, struct.pack("<I", len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data):
    """Inverse of :func:`encode_checkpoint`; records come back as float64 arrays."""
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic, expected b'VLCK'", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (n_text,) = struct.unpack("<I", take(4, "config length"))
    text_at = pos
    try:
        config = parse_kv(take(n_text, "config block").decode("utf-8"), "checkpoint config")
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"corrupt config block: {exc}", text_at) from None
    (count,) = struct.unpack("<I", take(4, "record count"))
    records = {}
    for i in range(count):
        (n_name,) = struct.unpack("<H", take(2, f"record {i} name length"))
        name = take(n_name, f"record {i} name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"record {name} rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"record {name} extents"))
        n = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(4 * n, f"record {name} values"), dtype="<f4")
        records[name] = values.astype(np.float64).reshape(shape)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last record", pos)
    return config, records


def write_checkpoint(path, config, records):
    data = encode_checkpoint(config, records)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".vlck-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
