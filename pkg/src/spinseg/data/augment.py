"""Training-time augmentation of slice windows.

Order: flips, then rotation, then intensity noise. Every slice of ``x`` and the
label ``ybar`` receive the same geometric transform.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .windows import SliceWindow

MAX_ROTATION_DEG = 30.0
NOISE_STD = 1e-2


def rotate(img: np.ndarray, angle_deg: float, order: int) -> np.ndarray:
    """Rotate each (H, W) plane of ``img`` about the image centre, zero fill."""
    if angle_deg == 0.0:
        return img.copy()
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    H, W = img.shape[-2:]
    centre = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    # output (r, c) samples input at R^-1 ((r, c) - centre) + centre
    mat = np.array([[cos, sin], [-sin, cos]])
    offset = centre - mat @ centre
    planes = [
        ndimage.affine_transform(p, mat, offset=offset, order=order, mode="constant", cval=0.0)
        for p in img.reshape(-1, H, W)
    ]
    return np.stack(planes).reshape(img.shape).astype(img.dtype, copy=False)


def apply_transform(
    w: SliceWindow,
    hflip: bool = False,
    vflip: bool = False,
    angle: float = 0.0,
    noise: np.ndarray | None = None,
) -> SliceWindow:
    x, y = w.x, w.ybar
    if hflip:
        x, y = x[:, :, ::-1], y[:, :, ::-1]
    if vflip:
        x, y = x[:, ::-1, :], y[:, ::-1, :]
    x = np.ascontiguousarray(x, dtype=np.float32)
    y = np.ascontiguousarray(y)
    if angle != 0.0:
        x = rotate(x, angle, order=1)
        y = (rotate(y.astype(np.float32), angle, order=0) > 0.5).astype(np.uint8)
    if noise is not None:
        x = (x + noise).astype(np.float32)
    return SliceWindow(x=x, ybar=y, center_index=w.center_index, volume_id=w.volume_id)


def augment(w: SliceWindow, rng: np.random.Generator, p: float) -> SliceWindow:
    """With probability ``p``: random flips (each 0.5), a rotation drawn from
    U(-30, 30) degrees, and N(0, 0.01^2) noise on intensities."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"augmentation probability must be in [0, 1], got {p}")
    if p == 0.0 or rng.random() >= p:
        return w
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    noise = rng.normal(0.0, NOISE_STD, size=w.x.shape).astype(np.float32)
    return apply_transform(w, hflip, vflip, angle, noise)
