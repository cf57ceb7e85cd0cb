"""Synthetic ground-truth slices: Shepp-Logan and a porous cellular network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataio import DEFAULT_PIXEL_SIZE, Image
from .tomo import inscribed_circle

# Modified (Toft) Shepp-Logan: intensity, semi-axes a b, centre x0 y0, angle (deg)
_SHEPP_LOGAN = [
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0),
    (-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18),
    (0.10, 0.2100, 0.2500, 0.00, 0.3500, 0),
    (0.10, 0.0460, 0.0460, 0.00, 0.1000, 0),
    (0.10, 0.0460, 0.0460, 0.00, -0.1000, 0),
    (0.10, 0.0460, 0.0230, -0.08, -0.6050, 0),
    (0.10, 0.0230, 0.0230, 0.00, -0.6060, 0),
    (0.10, 0.0230, 0.0460, 0.06, -0.6050, 0),
]


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "cellular"
    size: int = 128
    seed: int = 0
    porosity: float = 0.5
    feature_radius: float | None = None  # pixels, defaults to size / 16

    def __post_init__(self):
        if self.kind not in ("shepp_logan", "cellular"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if self.size < 32:
            raise ValueError("phantom size must be >= 32")
        if not 0.05 < self.porosity < 0.95:
            raise ValueError("porosity must lie in (0.05, 0.95)")

    @property
    def radius(self) -> float:
        return self.size / 16 if self.feature_radius is None else float(self.feature_radius)


def disk_mask(size: int) -> np.ndarray:
    """Support of all phantoms, the same mask FBP applies."""
    return inscribed_circle(size)


def gen_shepp_logan(size: int, pixel_size: float = DEFAULT_PIXEL_SIZE) -> Image:
    if size < 32:
        raise ValueError("Shepp-Logan size must be >= 32")
    c = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size]
    # normalised coordinates, y pointing up
    x = (xx - c) / (size / 2)
    y = (c - yy) / (size / 2)
    img = np.zeros((size, size))
    for val, a, b, x0, y0, deg in _SHEPP_LOGAN:
        th = np.deg2rad(deg)
        xr = (x - x0) * np.cos(th) + (y - y0) * np.sin(th)
        yr = -(x - x0) * np.sin(th) + (y - y0) * np.cos(th)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    img = np.clip(img, 0.0, 1.0) * disk_mask(size)
    return Image(img, pixel_size)


def gen_disk(size: int, radius: float, value: float = 1.0, pixel_size: float = DEFAULT_PIXEL_SIZE,
             supersample: int = 1) -> Image:
    """Centred disk; ``supersample`` > 1 sets each pixel to its covered area fraction."""
    c = (size - 1) / 2
    k = int(supersample)
    off = (np.arange(k) + 0.5) / k - 0.5
    yy, xx = np.mgrid[0:size, 0:size]
    cover = np.zeros((size, size))
    for dy in off:
        for dx in off:
            cover += (xx + dx - c) ** 2 + (yy + dy - c) ** 2 <= radius**2
    return Image(value * cover / k**2, pixel_size)


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return mask.copy()
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == np.argmax(counts)


def gen_cellular(spec: PhantomSpec, rng: np.random.Generator,
                 pixel_size: float = DEFAULT_PIXEL_SIZE, max_tries: int = 8) -> Image:
    """Binary porous network: smoothed impulse noise thresholded at a quantile.

    Only the largest 8-connected material component is kept; the threshold is
    lowered a few times if pruning stranded islands leaves the material
    fraction short of ``1 - porosity``. Fractions are measured inside the
    inscribed circle, outside of which the phantom is zero.
    """
    n = spec.size
    inside = disk_mask(n)
    target = 1.0 - spec.porosity
    sigma = spec.radius / 2
    for _ in range(max_tries):
        impulses = (rng.random((n, n)) < 0.05) * rng.standard_normal((n, n))
        field = ndimage.gaussian_filter(impulses, sigma, mode="reflect")
        vals = field[inside]
        frac_goal = target
        for _ in range(6):
            thr = np.quantile(vals, 1.0 - frac_goal)
            mat = largest_component((field >= thr) & inside)
            frac = mat[inside].mean()
            if abs(frac - target) <= 0.05 or frac_goal >= 0.99:
                break
            frac_goal = min(0.99, frac_goal + (target - frac))
        if abs(frac - target) <= 0.1:
            return Image(mat.astype(np.float64), pixel_size)
    raise PhantomError(f"no connected phantom near porosity {spec.porosity} after {max_tries} tries")


def generate(spec: PhantomSpec, rng: np.random.Generator | None = None,
             pixel_size: float = DEFAULT_PIXEL_SIZE) -> Image:
    if spec.kind == "shepp_logan":
        return gen_shepp_logan(spec.size, pixel_size)
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(spec.seed))
    return gen_cellular(spec, rng, pixel_size)
