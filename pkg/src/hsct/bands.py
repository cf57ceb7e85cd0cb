"""Intensity/spectral band splitting: the 9-copy stack and per-scale targets."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .dataio import as_array

INTENSITIES = ("orig", "bright", "dim")
SCALES = ("s0", "s1", "s2")
DEFAULT_SIGMAS = (0.0, 2.0, 4.0)


def intensity_split(img) -> tuple[np.ndarray, np.ndarray]:
    """Mask pixels at/above and below the image mean; ``bright + dim == img``."""
    arr = as_array(img)
    m = min(max(arr.mean(), arr.min()), arr.max())  # keep rounding from pushing it past the data
    above = arr >= m
    return np.where(above, arr, 0.0), np.where(above, 0.0, arr)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def spectral_lowpass(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur truncated at ceil(3 sigma), reflecting edges."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    arr = as_array(img)
    if sigma == 0:
        return arr.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(arr, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def check_sigmas(sigmas: Sequence[float]) -> tuple[float, ...]:
    sig = tuple(float(s) for s in sigmas)
    if len(sig) != 3 or sig[0] != 0 or not sig[0] < sig[1] < sig[2]:
        raise ValueError(f"sigmas must be 0 = s0 < s1 < s2, got {sig}")
    return sig


@dataclass(frozen=True)
class BandStack:
    source: np.ndarray
    bands: np.ndarray  # (3 intensities, 3 scales, h, w)
    sigmas: tuple[float, float, float]

    def band(self, intensity: str, scale: str) -> np.ndarray:
        return self.bands[INTENSITIES.index(intensity), SCALES.index(scale)]

    def scale_input(self, s: int) -> np.ndarray:
        """The (orig, bright, dim) channels of one spectral scale, shape (3, h, w)."""
        return self.bands[:, s]


def build_band_stack(img, sigmas: Sequence[float] = DEFAULT_SIGMAS) -> BandStack:
    sig = check_sigmas(sigmas)
    src = as_array(img)
    bright, dim = intensity_split(src)
    bands = np.stack([np.stack([spectral_lowpass(v, s) for s in sig]) for v in (src, bright, dim)])
    return BandStack(src, bands, sig)


def scale_targets(gt, sigmas: Sequence[float] = DEFAULT_SIGMAS, thresh: float = 0.5) -> np.ndarray:
    """Binary class labels per scale, shape (3, h, w), uint8."""
    arr = as_array(gt)
    return np.stack([(spectral_lowpass(arr, s) >= thresh) for s in sigmas]).astype(np.uint8)
