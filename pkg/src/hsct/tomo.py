"""Parallel-beam Radon projection, view subsampling, noise and FBP.

Geometry: pixel (row i, col j) sits at x = j - c, y = c - i with
c = (n - 1) / 2. At angle theta (degrees, measured from +y towards -x, i.e.
counter-clockwise) rays run along d = (-sin, cos) and the detector offset
is t = x cos + y sin, with bin k centred at t = k - c.

The image is treated as its bilinear interpolant (zero outside the grid);
each ray integral is a Riemann sum of that interpolant with sub-pixel step.
Forward and adjoint share one set of sample weights, so they are exact
transposes of each other.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import sparse

from .dataio import DEFAULT_PIXEL_SIZE, FormatError, Image, as_array, load_array, read_meta, save_array

RAY_STEP = 0.25  # pixels between samples along a ray


@dataclass(frozen=True)
class Sinogram:
    """Projection data, shape (n_angles, n_det), in value x micrometer."""

    angles_deg: np.ndarray
    data: np.ndarray
    pixel_size: float = DEFAULT_PIXEL_SIZE

    def __post_init__(self):
        ang = np.array(self.angles_deg, dtype=np.float64).reshape(-1)
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != ang.size:
            raise ValueError(f"sinogram shape {arr.shape} does not match {ang.size} angles")
        if ang.size and (np.any(ang < 0) or np.any(ang >= 180)):
            raise ValueError("angles must lie in [0, 180)")
        if np.any(np.diff(ang) <= 0):
            raise ValueError("angles must be strictly increasing")
        ang.setflags(write=False)
        arr.setflags(write=False)
        object.__setattr__(self, "angles_deg", ang)
        object.__setattr__(self, "data", arr)

    @property
    def n_angles(self) -> int:
        return self.data.shape[0]

    @property
    def n_det(self) -> int:
        return self.data.shape[1]

    def with_data(self, data) -> "Sinogram":
        return Sinogram(self.angles_deg, data, self.pixel_size)


def even_angles(n: int) -> np.ndarray:
    """n angles evenly spread over [0, 180)."""
    if n <= 0:
        raise ValueError("need at least one angle")
    return np.arange(n) * (180.0 / n)


def inscribed_circle(n: int) -> np.ndarray:
    """Pixels whose centres lie strictly inside radius (n - 1)/2.

    This is also the support of every phantom, so masked reconstructions and
    ground truth agree on which pixels can be nonzero.
    """
    c = (n - 1) / 2
    yy, xx = np.mgrid[0:n, 0:n]
    return (xx - c) ** 2 + (yy - c) ** 2 < c ** 2


def _ray_samples(n: int, theta_deg: float, step: float):
    """Rays, flat pixel indices and bilinear weights (times step) of every sample."""
    c = (n - 1) / 2
    th = np.deg2rad(theta_deg)
    cos, sin = np.cos(th), np.sin(th)
    half = c * np.sqrt(2) + 1.0
    m = int(np.ceil(half / step))
    s = (np.arange(-m, m) + 0.5) * step  # midpoints, symmetric about 0
    t = np.arange(n) - c
    x = t[:, None] * cos - s[None, :] * sin
    y = t[:, None] * sin + s[None, :] * cos
    col = x + c
    row = c - y
    keep = (col > -1) & (col < n) & (row > -1) & (row < n)
    ray = np.broadcast_to(np.arange(n)[:, None], col.shape)[keep]
    col, row = col[keep], row[keep]
    c0 = np.floor(col).astype(np.int64)
    r0 = np.floor(row).astype(np.int64)
    fc = col - c0
    fr = row - r0
    rays, pixs, wts = [], [], []
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n) & (w > 0)
        rays.append(ray[ok])
        pixs.append(rr[ok] * n + cc[ok])
        wts.append(w[ok] * step)
    return np.concatenate(rays), np.concatenate(pixs), np.concatenate(wts)


@lru_cache(maxsize=256)
def angle_matrix(n: int, theta_deg: float, step: float = RAY_STEP) -> sparse.csr_matrix:
    """Sparse (n_det x n*n) projection matrix for one angle, unit pixel size."""
    ray, pix, w = _ray_samples(n, theta_deg, step)
    return sparse.csr_matrix((w, (ray, pix)), shape=(n, n * n))


def _check_angles(angles) -> np.ndarray:
    ang = np.asarray(angles, dtype=np.float64).reshape(-1)
    if ang.size == 0:
        raise ValueError("empty angle list")
    if np.any(ang < 0) or np.any(ang >= 180):
        raise ValueError("angles must lie in [0, 180)")
    return ang


def project_stack(stack: np.ndarray, angles_deg, pixel_size: float = DEFAULT_PIXEL_SIZE,
                  step: float = RAY_STEP) -> np.ndarray:
    """Radon transform of S square slices at once; returns (S, n_angles, n)."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
        raise ValueError(f"expected (S, n, n) slices, got {stack.shape}")
    ang = _check_angles(angles_deg)
    s, n, _ = stack.shape
    cols = stack.reshape(s, n * n).T
    out = np.empty((s, ang.size, n))
    for i, th in enumerate(ang):
        out[:, i, :] = (angle_matrix(n, float(th), step) @ cols).T
    return out * pixel_size


def radon_forward(img, angles_deg: Sequence[float], pixel_size: float | None = None,
                  step: float = RAY_STEP) -> Sinogram:
    """Line integrals of ``img`` for every angle and detector bin."""
    arr = as_array(img)
    if pixel_size is None:
        pixel_size = img.pixel_size if isinstance(img, Image) else DEFAULT_PIXEL_SIZE
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"radon_forward needs a square image, got {arr.shape}")
    ang = _check_angles(angles_deg)
    return Sinogram(ang, project_stack(arr[None], ang, pixel_size, step)[0], pixel_size)


def radon_adjoint(sino: Sinogram, size: int | None = None, step: float = RAY_STEP) -> Image:
    """Exact transpose of :func:`radon_forward` (same pixel size)."""
    n = sino.n_det if size is None else int(size)
    if n != sino.n_det:
        raise ValueError(f"size {n} does not match {sino.n_det} detector bins")
    acc = np.zeros(n * n)
    for i, th in enumerate(sino.angles_deg):
        acc += angle_matrix(n, float(th), step).T @ sino.data[i]
    return Image(acc.reshape(n, n) * sino.pixel_size, sino.pixel_size)


def subsample_indices(n_angles: int, n_views: int) -> list[int]:
    if n_views <= 0:
        raise ValueError("n_views must be positive")
    if n_views > n_angles:
        raise ValueError(f"cannot keep {n_views} of {n_angles} views")
    idx = [int(np.floor(k * n_angles / n_views + 0.5)) for k in range(n_views)]
    return list(dict.fromkeys(i for i in idx if i < n_angles))


def subsample_views(sino: Sinogram, n_views: int) -> Sinogram:
    idx = subsample_indices(sino.n_angles, n_views)
    return Sinogram(sino.angles_deg[idx], sino.data[idx], sino.pixel_size)


def add_noise_snr(sino: Sinogram, snr_db: float | None, rng: np.random.Generator) -> Sinogram:
    """White Gaussian noise with power mean(sino**2) / 10**(snr_db / 10).

    ``snr_db`` of None or +inf returns the input untouched.
    """
    if snr_db is None or np.isinf(snr_db):
        return sino
    power = float(np.mean(sino.data**2))
    if power <= 0:
        raise ValueError("SNR is undefined for an all-zero sinogram")
    sigma = np.sqrt(power / 10 ** (snr_db / 10))
    return sino.with_data(sino.data + sigma * rng.standard_normal(sino.data.shape))


def fbp_filter(n_det: int, kind: str = "ramp") -> np.ndarray:
    """Frequency response on the length-2*n_det zero-padded DFT grid.

    Ramp is 2|nu| (nu in cycles/sample) so back-projection scales by
    pi / (2 n_angles); its DC bin is a quarter of the first nonzero bin.
    """
    size = 2 * n_det
    nu = np.fft.fftfreq(size)
    h = 2 * np.abs(nu)
    h[0] = 0.25 * h[1]
    if kind == "hann":
        h = h * 0.5 * (1 + np.cos(2 * np.pi * nu))
    elif kind != "ramp":
        raise ValueError(f"unknown filter {kind!r}")
    return h


def filter_rows(data: np.ndarray, kind: str = "ramp") -> np.ndarray:
    n_det = data.shape[-1]
    h = fbp_filter(n_det, kind)
    spec = np.fft.fft(data, n=2 * n_det, axis=-1)
    return np.real(np.fft.ifft(spec * h, axis=-1))[..., :n_det]


def backproject(rows: np.ndarray, angles_deg, n: int) -> np.ndarray:
    """Smear detector rows back over an n x n grid with linear interpolation."""
    c = (n - 1) / 2
    yy, xx = np.mgrid[0:n, 0:n]
    x = (xx - c).ravel()
    y = (c - yy).ravel()
    out = np.zeros(n * n)
    for row, th in zip(rows, np.deg2rad(angles_deg)):
        t = x * np.cos(th) + y * np.sin(th) + c
        k0 = np.floor(t).astype(np.int64)
        f = t - k0
        padded = np.concatenate([[0.0], row, [0.0]])  # zero outside the detector
        i0 = np.clip(k0 + 1, 0, n + 1)
        i1 = np.clip(k0 + 2, 0, n + 1)
        out += (1 - f) * padded[i0] + f * padded[i1]
    return out.reshape(n, n)


def fbp_reconstruct(sino: Sinogram, filter: str = "ramp", circle: bool = True) -> Image:
    """Filtered back-projection.

    With ``circle`` (the default) pixels outside the inscribed circle are set
    to zero: rays through the grid corners miss the detector, so those
    pixels carry only filter ringing. The map stays linear either way.
    """
    if sino.n_angles < 2:
        raise ValueError("FBP needs at least 2 angles")
    rows = filter_rows(sino.data, filter)
    img = backproject(rows, sino.angles_deg, sino.n_det)
    img *= np.pi / (2 * sino.n_angles) / sino.pixel_size
    if circle:
        img *= inscribed_circle(sino.n_det)
    return Image(img, sino.pixel_size)


def save_sinogram(path, sino: Sinogram) -> None:
    save_array(path, sino.data, {"angles_deg": sino.angles_deg.tolist(), "pixel_size": sino.pixel_size})


def load_sinogram(path) -> Sinogram:
    meta = read_meta(path)
    if "angles_deg" not in meta:
        raise FormatError(f"{path}: sinogram sidecar with angles_deg is missing")
    return Sinogram(meta["angles_deg"], load_array(path), meta.get("pixel_size", DEFAULT_PIXEL_SIZE))
