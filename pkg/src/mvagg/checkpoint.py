"""Binary checkpoint format for named float32 tensors.

Byte layout (all integers unsigned 32-bit little-endian)::

    magic     8 bytes   b"MVAGGCKP"
    version   u32       currently 1
    count     u32       number of entries
    entry * count:
        name_len  u32
        name      name_len bytes, UTF-8
        ndim      u32
        dims      ndim * u32
        data      prod(dims) * 4 bytes, float32 little-endian, row-major

Entries are written in the order given; readers return them in file order.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .tensor import Tensor

MAGIC = b"MVAGGCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        arr = np.asarray(arr, dtype="<f4", order="C")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> Dict[str, Tensor]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    try:
        version, count = struct.unpack_from("<II", blob, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out: Dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos: pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            if pos + 4 * n > len(blob):
                raise CheckpointError(f"truncated data for entry {name!r}")
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            out[name] = Tensor(arr.astype(np.float32), name=name)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path: Union[str, Path], tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: Union[str, Path]) -> Dict[str, Tensor]:
    return loads(Path(path).read_bytes())
