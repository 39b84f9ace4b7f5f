"""Lossless 2x2 space-to-depth / depth-to-space rearrangements.

Layout (block factor 2, row-major inside a block)::

    out[b, c, 2*i + di, 2*j + dj] = in[b, 4*c + 2*di + dj, i, j]

for ``depth_to_space``; ``space_to_depth`` is its exact inverse. Both are pure
permutations, so the backward pass of each is the other.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, make_result

BLOCK = 2


def _d2s(a: np.ndarray) -> np.ndarray:
    B, C4, H, W = a.shape
    C = C4 // 4
    return np.ascontiguousarray(
        a.reshape(B, C, 2, 2, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, 2 * H, 2 * W)
    )


def _s2d(a: np.ndarray) -> np.ndarray:
    B, C, H2, W2 = a.shape
    H, W = H2 // 2, W2 // 2
    return np.ascontiguousarray(
        a.reshape(B, C, H, 2, W, 2).transpose(0, 1, 3, 5, 2, 4).reshape(B, 4 * C, H, W)
    )


def depth_to_space(t: Tensor) -> Tensor:
    """(B, 4C, H, W) -> (B, C, 2H, 2W)."""
    if t.ndim != 4:
        raise ValueError(f"depth_to_space expects (B, C, H, W), got {t.shape}")
    if t.shape[1] % 4:
        raise ValueError(f"depth_to_space: channel count {t.shape[1]} is not divisible by 4")
    return make_result(_d2s(t.data), (t,), "depth_to_space", lambda g: (_s2d(g),))


def space_to_depth(t: Tensor) -> Tensor:
    """(B, C, 2H, 2W) -> (B, 4C, H, W)."""
    if t.ndim != 4:
        raise ValueError(f"space_to_depth expects (B, C, H, W), got {t.shape}")
    H2, W2 = t.shape[2:]
    if H2 % 2 or W2 % 2:
        raise ValueError(f"space_to_depth: spatial extents {(H2, W2)} must be even")
    return make_result(_s2d(t.data), (t,), "space_to_depth", lambda g: (_d2s(g),))
