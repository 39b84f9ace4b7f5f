"""Binary checkpoint container.

Layout (all integers little-endian u32)::

    b"SPINCKPT" | version | entries...
    entry := name_len | name (utf-8) | rank | extents[rank] | float32 data

Entries run until end of file. Adam moments are stored as ``<param>/m`` and
``<param>/v``; the Adam step counter is the rank-0 entry ``adam/step``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .optim import AdamState

MAGIC = b"SPINCKPT"
VERSION = 1
STEP_KEY = "adam/step"


class CheckpointError(ValueError):
    pass


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def encode(params: dict[str, np.ndarray], adam: AdamState | None = None) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in params.items():
        chunks.append(_pack_entry(name, arr))
    if adam is not None:
        for name in params:
            if name in adam.m:
                chunks.append(_pack_entry(f"{name}/m", adam.m[name]))
                chunks.append(_pack_entry(f"{name}/v", adam.v[name]))
        chunks.append(_pack_entry(STEP_KEY, np.asarray(adam.step, dtype=np.float32)))
    return b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], AdamState | None]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a SPINCKPT file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    entries: dict[str, np.ndarray] = {}
    while pos < len(blob):
        try:
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"truncated checkpoint at byte {pos}") from exc
        entries[name] = arr.astype(np.float32)

    adam = None
    if STEP_KEY in entries:
        adam = AdamState(step=int(entries.pop(STEP_KEY).reshape(-1)[0]))
    params = {}
    for name, arr in entries.items():
        if name.endswith("/m") and adam is not None:
            adam.m[name[:-2]] = arr
        elif name.endswith("/v") and adam is not None:
            adam.v[name[:-2]] = arr
        else:
            params[name] = arr
    return params, adam


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save(path, params: dict[str, np.ndarray], adam: AdamState | None = None) -> None:
    atomic_write_bytes(path, encode(params, adam))


def load(path) -> tuple[dict[str, np.ndarray], AdamState | None]:
    return decode(Path(path).read_bytes())
