"""Uncompressed PGM/PPM writers for overlays and feature-map grids."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .checkpoint import atomic_write_bytes


def _to_u8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round(255.0 * (img - lo) / (hi - lo)).astype(np.uint8)


def encode_pgm(img: np.ndarray) -> bytes:
    g = _to_u8(img)
    H, W = g.shape
    return f"P5\n{W} {H}\n255\n".encode() + g.tobytes()


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    H, W, _ = rgb.shape
    return f"P6\n{W} {H}\n255\n".encode() + np.ascontiguousarray(rgb).tobytes()


def mask_contour(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, structure=np.ones((3, 3), bool), border_value=0)


def overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray | None = None) -> np.ndarray:
    """Grayscale slice with the predicted contour in red and, if given, the
    ground-truth contour in green."""
    g = _to_u8(image)
    rgb = np.repeat(g[..., None], 3, axis=2)
    if gt is not None:
        rgb[mask_contour(gt)] = (0, 255, 0)
    rgb[mask_contour(pred)] = (255, 0, 0)
    return rgb


def write_overlay(path, image, pred, gt=None) -> None:
    atomic_write_bytes(path, encode_ppm(overlay(image, pred, gt)))


def feature_grid(maps: np.ndarray, pad: int = 1) -> np.ndarray:
    """Tile (K, H, W) maps, each rescaled to [0, 1], into a near-square grid."""
    maps = np.asarray(maps, dtype=np.float64)
    K, H, W = maps.shape
    cols = int(np.ceil(np.sqrt(K)))
    rows = int(np.ceil(K / cols))
    grid = np.zeros((rows * (H + pad) - pad, cols * (W + pad) - pad))
    for k in range(K):
        m = maps[k]
        lo, hi = m.min(), m.max()
        m = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
        r, c = divmod(k, cols)
        grid[r * (H + pad) : r * (H + pad) + H, c * (W + pad) : c * (W + pad) + W] = m
    return grid


def write_feature_grid(path, maps) -> None:
    atomic_write_bytes(path, encode_pgm(feature_grid(maps)))
