"""Volumes and the SPV1 file container.

SPV1 layout (little-endian)::

    b"SPV1" | u32 C | u32 H | u32 W | u8 has_labels | f32[C*H*W] | u8[C*H*W] if labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..checkpoint import atomic_write_bytes

SPV_MAGIC = b"SPV1"


@dataclass
class Volume:
    id: str
    intensities: np.ndarray
    labels: np.ndarray | None = None
    spacing: dict = field(default_factory=dict)

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        if self.intensities.ndim != 3:
            raise ValueError(f"volume {self.id}: intensities must be C x H x W, got {self.intensities.shape}")
        if not np.isfinite(self.intensities).all():
            raise ValueError(f"volume {self.id}: intensities contain non-finite values")
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != self.intensities.shape:
                raise ValueError(
                    f"volume {self.id}: label shape {lab.shape} != intensity shape {self.intensities.shape}"
                )
            if not np.isin(lab, (0, 1)).all():
                raise ValueError(f"volume {self.id}: labels must be 0/1")
            self.labels = lab.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape

    @property
    def num_slices(self) -> int:
        return self.intensities.shape[0]

    def lesion_pixels(self) -> np.ndarray:
        """Per-slice lesion pixel counts (zeros when unlabelled)."""
        if self.labels is None:
            return np.zeros(self.num_slices, dtype=np.int64)
        return self.labels.reshape(self.num_slices, -1).sum(axis=1).astype(np.int64)


def encode_volume(v: Volume) -> bytes:
    C, H, W = v.shape
    head = SPV_MAGIC + struct.pack("<IIIB", C, H, W, 1 if v.labels is not None else 0)
    body = np.ascontiguousarray(v.intensities, dtype="<f4").tobytes()
    if v.labels is not None:
        body += np.ascontiguousarray(v.labels, dtype=np.uint8).tobytes()
    return head + body


def decode_volume(blob: bytes, volume_id: str) -> Volume:
    if blob[:4] != SPV_MAGIC:
        raise ValueError(f"{volume_id}: not an SPV1 file")
    C, H, W, has_labels = struct.unpack_from("<IIIB", blob, 4)
    n = C * H * W
    off = 4 + 13
    need = off + 4 * n + (n if has_labels else 0)
    if len(blob) != need:
        raise ValueError(f"{volume_id}: expected {need} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(C, H, W)
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off + 4 * n).reshape(C, H, W)
    return Volume(volume_id, data.astype(np.float32), None if labels is None else labels.copy())


def write_volume(path, v: Volume) -> None:
    atomic_write_bytes(path, encode_volume(v))


def read_volume(path, volume_id: str | None = None) -> Volume:
    path = Path(path)
    return decode_volume(path.read_bytes(), volume_id or path.stem)


def normalize_volume(v: Volume) -> Volume:
    """Per-volume min-max scaling to [0, 1]; constant volumes become all zeros."""
    x = v.intensities
    if x.size == 0:
        raise ValueError(f"volume {v.id} is empty")
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        scaled = np.zeros_like(x)
    else:
        scaled = ((x.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)
    return Volume(v.id, scaled, v.labels, dict(v.spacing))


def dataset_mean(volumes) -> float:
    """Mean intensity over every voxel of ``volumes`` (accumulated in float64)."""
    total = 0.0
    count = 0
    for v in volumes:
        total += float(v.intensities.sum(dtype=np.float64))
        count += v.intensities.size
    if count == 0:
        raise ValueError("dataset_mean of an empty dataset")
    return total / count
