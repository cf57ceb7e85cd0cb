"""Transport-of-intensity propagation and single-material phase retrieval.

Units: pixel size in micrometers, wavelength in nanometers, propagation
distance in millimeters; everything is converted to micrometers internally.

Forward: dI/dz = -(1/k) div(I0 grad(phi)), discretised with centred
differences on a staggered grid (fluxes live between pixels) and zero flux
through the outer boundary, which makes the operator exactly conservative.

Inverse: phi = (gamma / 2) ln F^-1[ F(Iz / Iref) / (1 + pi gamma z lambda |u|^2) ].
The matching contact-plane intensity of a single-material object is
Iref * exp(2 phi / gamma); :func:`contact_intensity` builds it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import DEFAULT_PIXEL_SIZE, Image, as_array
from .tomo import Sinogram, add_noise_snr, radon_forward

WEAK_PHASE = 0.1  # rad, peak |phi| used when scaling a phantom into a phase map


@dataclass(frozen=True)
class PhysParams:
    wavelength: float = 0.045  # nm
    z: float = 60.0  # mm
    gamma: float = 500.0
    pixel_size: float = DEFAULT_PIXEL_SIZE  # um

    def __post_init__(self):
        for name in ("wavelength", "gamma", "pixel_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.z < 0:
            raise ValueError("z must be non-negative")

    @property
    def wavelength_um(self) -> float:
        return self.wavelength * 1e-3

    @property
    def z_um(self) -> float:
        return self.z * 1e3

    @property
    def k(self) -> float:
        """Wavenumber in rad/um."""
        return 2 * np.pi / self.wavelength_um


def _check_pair(phi: np.ndarray, i0: np.ndarray):
    if phi.shape != i0.shape:
        raise ValueError(f"shape mismatch {phi.shape} vs {i0.shape}")
    if np.any(i0 <= 0):
        raise ValueError("i0 must be strictly positive")


def _divergence_flux(phi: np.ndarray, i0: np.ndarray, h: float) -> np.ndarray:
    """div(i0 grad phi) along every axis of an n-d array, zero boundary flux."""
    out = np.zeros_like(phi)
    for ax in range(phi.ndim):
        dphi = np.diff(phi, axis=ax) / h
        n = phi.shape[ax]
        lo = [slice(None)] * phi.ndim
        hi = [slice(None)] * phi.ndim
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        flux = 0.5 * (i0[tuple(lo)] + i0[tuple(hi)]) * dphi
        pad = [(0, 0)] * phi.ndim
        pad[ax] = (1, 1)
        flux = np.pad(flux, pad)
        out += np.diff(flux, axis=ax) / h
    return out


def tie_forward(phi, i0, p: PhysParams) -> Image:
    """dI/dz at the contact plane, in intensity per micrometer."""
    phi_a, i0_a = as_array(phi), as_array(i0)
    _check_pair(phi_a, i0_a)
    return Image(-_divergence_flux(phi_a, i0_a, p.pixel_size) / p.k, p.pixel_size)


def _propagate(phi: np.ndarray, i0: np.ndarray, p: PhysParams) -> np.ndarray:
    _check_pair(phi, i0)
    if p.z == 0:
        return i0.copy()
    iz = i0 - p.z_um * _divergence_flux(phi, i0, p.pixel_size) / p.k
    return np.maximum(iz, 1e-6 * i0.mean())


def propagate_intensity(phi, i0, p: PhysParams) -> Image:
    """First-order propagated intensity i0 + z dI/dz, floored at 1e-6 mean(i0)."""
    return Image(_propagate(as_array(phi), as_array(i0), p), p.pixel_size)


def contact_intensity(phi, p: PhysParams, flat: float = 1.0) -> np.ndarray:
    """Contact-plane intensity exp(2 phi / gamma) of a single-material object."""
    return flat * np.exp(2 * as_array(phi) / p.gamma)


def retrieval_filter(shape: tuple[int, ...], p: PhysParams) -> np.ndarray:
    """Denominator 1 + pi gamma z lambda |u|^2 on the unpadded DFT grid."""
    u2 = np.zeros(shape)
    for ax, n in enumerate(shape):
        u = np.fft.fftfreq(n, d=p.pixel_size)
        sh = [1] * len(shape)
        sh[ax] = n
        u2 = u2 + (u**2).reshape(sh)
    return 1 + np.pi * p.gamma * p.z_um * p.wavelength_um * u2


def _retrieve(iz: np.ndarray, iref: np.ndarray, p: PhysParams, subtract_mean: bool):
    if iz.shape != iref.shape:
        raise ValueError(f"shape mismatch {iz.shape} vs {iref.shape}")
    if np.any(iref <= 0):
        raise ValueError("reference intensity must be strictly positive")
    ratio = iz / iref
    filt = np.real(np.fft.ifftn(np.fft.fftn(ratio) / retrieval_filter(ratio.shape, p)))
    floor = 1e-12
    n_clamped = int(np.count_nonzero(filt <= floor))
    phi = 0.5 * p.gamma * np.log(np.maximum(filt, floor))
    if subtract_mean:
        phi -= phi.mean()
    return phi, n_clamped


def duality_retrieve(iz, i0_ref, p: PhysParams, subtract_mean: bool = True) -> tuple[Image, int]:
    """Single-shot phase from one defocused intensity.

    Returns the phase map and the number of pixels whose filtered intensity
    was non-positive and had to be clamped before the logarithm.
    """
    phi, n_clamped = _retrieve(as_array(iz), as_array(i0_ref), p, subtract_mean)
    return Image(phi, p.pixel_size), n_clamped


def phase_sinogram(gt, angles_deg, p: PhysParams, snr_db: float | None,
                   rng: np.random.Generator, phase_peak: float = WEAK_PHASE) -> Sinogram:
    """Simulated sinogram of retrieved projected phase, in Radon units of ``gt``.

    Per angle the Radon row is scaled to a weak phase profile (peak
    ``phase_peak`` rad over the whole sinogram, negative for a phase delay),
    turned into a contact intensity, propagated by z in 1-D, corrupted with
    white noise at ``snr_db`` (power relative to the propagated contrast
    Iz - 1), then retrieved and mapped back by the inverse scale.
    """
    gt_img = gt if isinstance(gt, Image) else Image(gt, p.pixel_size)
    proj = radon_forward(gt_img, angles_deg)
    peak = np.abs(proj.data).max()
    if peak == 0:
        return proj
    scale = -phase_peak / peak
    phi = proj.data * scale
    i0 = contact_intensity(phi, p)
    iz = np.stack([_propagate(row, i0_row, p) for row, i0_row in zip(phi, i0)])
    if snr_db is not None and not np.isinf(snr_db):
        contrast = Sinogram(proj.angles_deg, iz - 1.0, proj.pixel_size)
        iz = add_noise_snr(contrast, snr_db, rng).data + 1.0
        iz = np.maximum(iz, 1e-6)
    flat = np.ones(proj.n_det)
    rows = [_retrieve(row, flat, p, subtract_mean=False)[0] for row in iz]
    return proj.with_data(np.stack(rows) / scale)
