"""Synthetic lesion volumes.

Each slice shows an elliptical "tissue" region with smooth low-frequency texture.
Lesion-bearing slices receive compact, 4-connected blobs of an exact pixel count
that are brighter or darker than the surrounding tissue. Blobs never touch each
other (not even diagonally), so connected-component labelling recovers every
lesion and its size from the label volume.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume

_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))
_MAX_PLACEMENT_TRIES = 50


@dataclass(frozen=True)
class SynthSpec:
    shape: tuple[int, int, int] = (16, 64, 64)
    lesions_per_slice: int = 1
    lesion_slice_fraction: float = 0.5
    small_lesion_fraction: float = 0.3
    small_size: tuple[int, int] = (4, 99)
    large_size: tuple[int, int] = (100, 400)
    tissue_level: float = 0.5
    texture_amplitude: float = 0.08
    lesion_contrast: float = 0.35
    noise_std: float = 0.02

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"shape must be three positive extents, got {self.shape}")
        if self.lesions_per_slice < 0:
            raise ValueError("lesions_per_slice must be >= 0")
        for name in ("lesion_slice_fraction", "small_lesion_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("small_size", "large_size"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= low <= high, got {(lo, hi)}")


def tissue_mask(H: int, W: int, cy: float | None = None, cx: float | None = None,
                ry: float | None = None, rx: float | None = None) -> np.ndarray:
    cy = (H - 1) / 2.0 if cy is None else cy
    cx = (W - 1) / 2.0 if cx is None else cx
    ry = 0.4 * H if ry is None else ry
    rx = 0.4 * W if rx is None else rx
    yy, xx = np.mgrid[0:H, 0:W]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def grow_blob(allowed: np.ndarray, seed: tuple[int, int], n: int, rng: np.random.Generator) -> np.ndarray | None:
    """Grow a 4-connected region of exactly ``n`` pixels inside ``allowed``.

    Pixels join in order of an anisotropic distance to the seed (random axes and
    orientation) with a little jitter, which gives compact, irregular blobs.
    Returns None when the reachable part of ``allowed`` is too small.
    """
    H, W = allowed.shape
    if not allowed[seed]:
        return None
    theta = rng.uniform(0, np.pi)
    aspect = rng.uniform(0.6, 1.0)
    c, s = np.cos(theta), np.sin(theta)

    def score(y, x):
        dy, dx = y - seed[0], x - seed[1]
        u, v = c * dy + s * dx, (-s * dy + c * dx) / aspect
        return u * u + v * v + rng.uniform(0.0, 1.5)

    out = np.zeros_like(allowed, dtype=bool)
    seen = {seed}
    heap = [(0.0, seed)]
    taken = 0
    while heap and taken < n:
        _, (y, x) = heapq.heappop(heap)
        out[y, x] = True
        taken += 1
        for dy, dx in _NEIGHBOURS:
            q = (y + dy, x + dx)
            if 0 <= q[0] < H and 0 <= q[1] < W and q not in seen and allowed[q]:
                seen.add(q)
                heapq.heappush(heap, (score(*q), q))
    return out if taken == n else None


def draw_lesion_size(spec: SynthSpec, rng: np.random.Generator) -> int:
    lo, hi = spec.small_size if rng.random() < spec.small_lesion_fraction else spec.large_size
    return int(rng.integers(lo, hi + 1))


def generate_synthetic_volume(rng: np.random.Generator, spec: SynthSpec, volume_id: str = "synth") -> Volume:
    C, H, W = spec.shape
    # per-volume jitter of the tissue ellipse
    cy = (H - 1) / 2.0 + rng.uniform(-0.03, 0.03) * H
    cx = (W - 1) / 2.0 + rng.uniform(-0.03, 0.03) * W
    ry = rng.uniform(0.36, 0.42) * H
    rx = rng.uniform(0.36, 0.42) * W
    tissue = tissue_mask(H, W, cy, cx, ry, rx)
    area = int(tissue.sum())
    biggest = spec.large_size[1] if spec.small_lesion_fraction < 1.0 else spec.small_size[1]
    if spec.lesions_per_slice > 0 and spec.lesion_slice_fraction > 0 and biggest > area:
        raise ValueError(
            f"lesion size up to {biggest} pixels exceeds the {area}-pixel tissue region of a {H}x{W} slice"
        )

    field_ = ndimage.gaussian_filter(rng.standard_normal((C, H, W)), sigma=(1.0, H / 8.0, W / 8.0), mode="wrap")
    field_ *= spec.texture_amplitude / max(float(np.abs(field_).max()), 1e-12)
    img = np.where(tissue[None], spec.tissue_level + field_, 0.0)
    labels = np.zeros((C, H, W), dtype=np.uint8)
    ys, xs = np.nonzero(tissue)

    for t in range(C):
        if rng.random() >= spec.lesion_slice_fraction:
            continue
        for _ in range(spec.lesions_per_slice):
            n = draw_lesion_size(spec, rng)
            forbidden = ndimage.binary_dilation(labels[t].astype(bool), structure=np.ones((3, 3), bool))
            allowed = tissue & ~forbidden
            blob = None
            for _try in range(_MAX_PLACEMENT_TRIES):
                k = int(rng.integers(len(ys)))
                blob = grow_blob(allowed, (int(ys[k]), int(xs[k])), n, rng)
                if blob is not None:
                    break
            if blob is None:
                raise ValueError(f"could not place a {n}-pixel lesion in slice {t} of {volume_id}")
            sign = 1.0 if rng.random() < 0.5 else -1.0
            img[t][blob] += sign * spec.lesion_contrast
            labels[t][blob] = 1

    img += rng.normal(0.0, spec.noise_std, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return Volume(volume_id, img.astype(np.float32), labels)


def generate_corpus(n: int, spec: SynthSpec, seed: int, prefix: str = "vol") -> list[Volume]:
    """``n`` volumes with ids ``{prefix}000`` ... each from its own child seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [
        generate_synthetic_volume(np.random.default_rng(s), spec, f"{prefix}{i:03d}")
        for i, s in enumerate(children)
    ]


def lesion_sizes(v: Volume) -> list[int]:
    """Pixel counts of 8-connected lesion components, slice by slice."""
    sizes: list[int] = []
    if v.labels is None:
        return sizes
    for sl in v.labels:
        lab, k = ndimage.label(sl, structure=np.ones((3, 3), int))
        if k:
            sizes.extend(int(c) for c in np.bincount(lab.ravel())[1:])
    return sizes
