"""Binary checkpoint files.

Layout, all little-endian::

    b"BTMT" | u32 version | u32 record count
    per record: u16 name length | utf-8 name | u8 rank | u32 dims[rank] | f32 payload

Values are stored as float32 and come back as float64.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"BTMT"
VERSION = 1


def encode(records):
    """``records``: iterable of ``(name, array)`` in the order to store them."""
    out = [MAGIC]
    records = list(records)
    out.append(struct.pack("<II", VERSION, len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode(data):
    """Bytes -> ordered dict of float64 arrays."""
    if data[:4] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        pos, records = 12, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise DataError(f"checkpoint truncated inside record {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
            records[name] = arr.astype(np.float64)
            pos += 4 * size
    except struct.error as e:
        raise DataError(f"checkpoint truncated: {e}") from None
    if pos != len(data):
        raise DataError(f"{len(data) - pos} trailing bytes after the last record")
    return records


def save(path, records):
    Path(path).write_bytes(encode(records.items() if isinstance(records, dict) else records))


def load(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def model_records(model):
    return {name: p.data for name, p in model.named_parameters()}


def load_into(model, records, strict=True):
    """Copy matching records into ``model``'s parameters (in place)."""
    params = dict(model.named_parameters())
    missing = [n for n in params if n not in records]
    if strict and missing:
        raise DataError(f"checkpoint lacks {len(missing)} parameter(s), e.g. {missing[0]!r}")
    for name, p in params.items():
        if name not in records:
            continue
        if records[name].shape != p.data.shape:
            raise DataError(f"shape mismatch for {name}: checkpoint {records[name].shape}, "
                            f"model {p.data.shape}")
        p.data = records[name].copy()
    return model
