"""MSE, PSNR and blockwise SSIM.

Argument order is ``(x, y)`` with ``y`` the target image: PSNR's peak and
SSIM's dynamic range L are both max(y).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataio import as_array

BLOCK = 8
K1, K2 = 0.01, 0.03


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    xa, ya = as_array(x), as_array(y)
    if xa.shape != ya.shape:
        raise ValueError(f"shape mismatch {xa.shape} vs {ya.shape}")
    return xa, ya


def mse(x, y) -> float:
    xa, ya = _pair(x, y)
    return float(np.mean((ya - xa) ** 2))


def psnr(x, y) -> float:
    """10 log10(max(y)^2 / MSE); +inf when the images coincide."""
    xa, ya = _pair(x, y)
    err = mse(xa, ya)
    if err == 0:
        return float("inf")
    return float(10 * np.log10(ya.max() ** 2 / err))


def ssim(x, y, data_range: float | None = None, block: int = BLOCK) -> float:
    """Mean SSIM over non-overlapping ``block`` x ``block`` tiles.

    Ragged edges that do not fill a whole tile are dropped. Statistics use
    population (1/n) moments.
    """
    xa, ya = _pair(x, y)
    h, w = xa.shape
    if h < block or w < block:
        raise ValueError(f"images must be at least {block}x{block}")
    L = float(ya.max()) if data_range is None else float(data_range)
    c1 = (K1 * L) ** 2
    c2 = (K2 * L) ** 2
    hb, wb = h // block, w // block

    def tiles(a):
        return a[: hb * block, : wb * block].reshape(hb, block, wb, block).swapaxes(1, 2).reshape(hb, wb, -1)

    tx, ty = tiles(xa), tiles(ya)
    mx, my = tx.mean(-1), ty.mean(-1)
    dx, dy = tx - mx[..., None], ty - my[..., None]
    vx, vy = (dx**2).mean(-1), (dy**2).mean(-1)
    cov = (dx * dy).mean(-1)
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx**2 + my**2 + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    mse: float
    psnr_db: float
    ssim: float
    block: int = BLOCK

    def to_json(self) -> dict:
        d = asdict(self)
        if np.isinf(d["psnr_db"]):
            d["psnr_db"] = "inf"
        return d


def report(pred, gt) -> MetricReport:
    return MetricReport(mse(pred, gt), psnr(pred, gt), ssim(pred, gt))
