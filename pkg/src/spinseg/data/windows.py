"""Slice windows: mean padding along the slice axis and c-slice extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .volume import Volume

log = logging.getLogger(__name__)

LESION_PROBABILITY = 0.95


@dataclass
class SliceWindow:
    x: np.ndarray  # (c, H, W)
    ybar: np.ndarray  # (1, H, W), uint8
    center_index: int
    volume_id: str = ""

    @property
    def c(self) -> int:
        return self.x.shape[0]


def _check_c(c: int) -> None:
    if c < 1 or c % 2 == 0:
        raise ValueError(f"window size c must be a positive odd integer, got {c}")


def mean_pad(v: Volume | np.ndarray, c: int, mu: float) -> np.ndarray:
    """Prepend and append (c-1)/2 constant-``mu`` slices: (C+c-1, H, W)."""
    _check_c(c)
    x = v.intensities if isinstance(v, Volume) else np.asarray(v, dtype=np.float32)
    r = (c - 1) // 2
    if r == 0:
        return x.copy()
    C, H, W = x.shape
    out = np.empty((C + 2 * r, H, W), dtype=np.float32)
    out[:r] = mu
    out[r : r + C] = x
    out[r + C :] = mu
    return out


def strip_pad(padded: np.ndarray, c: int) -> np.ndarray:
    _check_c(c)
    r = (c - 1) // 2
    return padded[r : padded.shape[0] - r]


def extract_window(padded: np.ndarray, t: int, c: int, labels: np.ndarray | None = None, volume_id: str = "") -> SliceWindow:
    """Window of padded slices [t, t+c-1]; its centre is original slice ``t``."""
    _check_c(c)
    C = padded.shape[0] - (c - 1)
    if not 0 <= t < C:
        raise IndexError(f"slice index {t} out of range for a volume of {C} slices")
    x = padded[t : t + c].copy()
    H, W = padded.shape[1:]
    if labels is None:
        ybar = np.zeros((1, H, W), dtype=np.uint8)
    else:
        ybar = labels[t : t + 1].astype(np.uint8, copy=True)
    return SliceWindow(x=x, ybar=ybar, center_index=t, volume_id=volume_id)


def iter_windows(v: Volume, c: int, mu: float):
    """Windows for t = 0 .. C-1, in order."""
    padded = mean_pad(v, c, mu)
    for t in range(v.num_slices):
        yield extract_window(padded, t, c, v.labels, v.id)


class WindowSampler:
    """Draws training windows, centring on a lesion slice with probability 0.95.

    Lesion-free centres are drawn uniformly from the lesion-free slices. If the
    dataset has no lesion slices at all, sampling falls back to uniform over
    every slice.
    """

    def __init__(self, volumes, c: int, mu: float, lesion_probability: float = LESION_PROBABILITY):
        _check_c(c)
        self.volumes = list(volumes)
        if not self.volumes:
            raise ValueError("WindowSampler needs at least one volume")
        self.c = c
        self.mu = mu
        self.lesion_probability = lesion_probability
        self.padded = [mean_pad(v, c, mu) for v in self.volumes]
        self.lesion: list[tuple[int, int]] = []
        self.clean: list[tuple[int, int]] = []
        for i, v in enumerate(self.volumes):
            for t, n in enumerate(v.lesion_pixels()):
                (self.lesion if n > 0 else self.clean).append((i, t))
        if not self.lesion:
            log.warning("no lesion slices in dataset; sampling windows uniformly")

    @property
    def num_windows(self) -> int:
        return len(self.lesion) + len(self.clean)

    def _pick(self, rng: np.random.Generator) -> tuple[int, int]:
        if not self.lesion:
            pool = self.clean
        elif not self.clean:
            pool = self.lesion
        else:
            pool = self.lesion if rng.random() < self.lesion_probability else self.clean
        return pool[int(rng.integers(len(pool)))]

    def sample(self, rng: np.random.Generator) -> SliceWindow:
        i, t = self._pick(rng)
        v = self.volumes[i]
        return extract_window(self.padded[i], t, self.c, v.labels, v.id)


def sample_training_window(sampler: WindowSampler, rng: np.random.Generator) -> SliceWindow:
    return sampler.sample(rng)
