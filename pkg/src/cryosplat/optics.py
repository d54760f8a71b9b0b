"""Fourier-domain physics: centered FFTs, CTF evaluation, phase-shift translation.

Conventions (used consistently by every operation and test):

* Centered layout: the zero frequency / spatial origin sits at pixel index
  ``size // 2`` in both domains. A unit impulse at that pixel transforms to
  an all-ones spectrum.
* Normalization: forward transform unnormalized, inverse scaled by 1/D^2.
* CTF sign: density-positive volumes produce negative contrast at low
  frequency, matching prevailing single-particle conventions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gmm import GridSpec
from .splat import RenderedImage

# CODATA 2018 values
_PLANCK = 6.62607015e-34       # J s
_ELECTRON_MASS = 9.1093837015e-31  # kg
_ELEMENTARY_CHARGE = 1.602176634e-19  # C
_LIGHT_SPEED = 299792458.0     # m / s


def electron_wavelength(voltage_kv: float) -> float:
    """Relativistic electron wavelength in Angstrom for a voltage in kV."""
    if voltage_kv <= 0:
        raise ValueError("acceleration voltage must be positive")
    ev = _ELEMENTARY_CHARGE * voltage_kv * 1e3
    wavelength_m = _PLANCK / math.sqrt(2.0 * _ELECTRON_MASS * ev * (1.0 + ev / (2.0 * _ELECTRON_MASS * _LIGHT_SPEED**2)))
    return wavelength_m * 1e10


@dataclass(frozen=True)
class CtfParams:
    """Per-image microscope parameters defining the contrast transfer function."""

    defocus_u: float              # Angstrom
    defocus_v: float              # Angstrom
    astigmatism_angle: float = 0.0  # radians
    voltage: float = 300.0        # kV
    spherical_aberration: float = 2.7  # mm
    amplitude_contrast: float = 0.1    # fraction in [0, 1)
    phase_shift: float = 0.0      # radians
    b_factor: float = 0.0         # Angstrom^2, >= 0

    def __post_init__(self):
        if self.voltage <= 0:
            raise ValueError("voltage must be positive")
        if not 0.0 <= self.amplitude_contrast < 1.0:
            raise ValueError("amplitude contrast must lie in [0, 1)")
        if self.b_factor < 0:
            raise ValueError("b_factor must be non-negative")

    @property
    def wavelength(self) -> float:
        return electron_wavelength(self.voltage)


@dataclass
class Spectrum:
    """Complex D x D spectrum in centered layout."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != (self.grid.size, self.grid.size):
            raise ValueError("spectrum array does not match grid size")


def fft_centered(img: RenderedImage) -> Spectrum:
    """Forward 2D FFT with the origin pixel carrying zero phase."""
    pixels = img.pixels
    if pixels.shape[0] != pixels.shape[1] or pixels.shape[0] < 4:
        raise ValueError("fft_centered requires a square image with D >= 4")
    values = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(pixels)))
    return Spectrum(grid=img.grid, values=values)


def ifft_centered(spectrum: Spectrum) -> RenderedImage:
    """Inverse of ``fft_centered``; returns the real part."""
    values = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(spectrum.values)))
    return RenderedImage(grid=spectrum.grid, pixels=values.real)


def ctf_evaluate(params: CtfParams, grid: GridSpec) -> np.ndarray:
    """Evaluate the CTF on the centered frequency grid, shape (D, D).

    H(k) = -(sqrt(1 - w^2) sin(chi) + w cos(chi)) * exp(-b |k|^2 / 4) with
    chi = pi lambda d(theta) |k|^2 - (pi / 2) Cs lambda^3 |k|^4 + phase_shift
    and the astigmatic defocus
    d(theta) = ((du + dv) + (du - dv) cos 2(theta - theta_a)) / 2.
    Frequencies are in cycles/Angstrom: centered index / (D * pixel_size).
    """
    if grid.pixel_size <= 0:
        raise ValueError("grid pixel_size must be positive to evaluate a CTF")
    freqs = grid.freq_indices() / (grid.size * grid.pixel_size)
    kx = freqs[None, :]
    ky = freqs[:, None]
    k2 = kx * kx + ky * ky
    theta = np.arctan2(ky, kx)

    lam = params.wavelength
    cs_angstrom = params.spherical_aberration * 1e7
    defocus = 0.5 * (
        (params.defocus_u + params.defocus_v)
        + (params.defocus_u - params.defocus_v) * np.cos(2.0 * (theta - params.astigmatism_angle))
    )
    chi = np.pi * lam * defocus * k2 - 0.5 * np.pi * cs_angstrom * lam**3 * k2 * k2 + params.phase_shift
    w = params.amplitude_contrast
    ctf = -(np.sqrt(1.0 - w * w) * np.sin(chi) + w * np.cos(chi))
    if params.b_factor > 0:
        ctf = ctf * np.exp(-params.b_factor * k2 / 4.0)
    return ctf


def apply_ctf(img: RenderedImage, ctf) -> RenderedImage:
    """Multiply the centered spectrum by the CTF and invert.

    ``ctf`` is either ``CtfParams`` (evaluated on the image grid) or a
    precomputed D x D real array. H is real and even on the grid, so the
    operator is self-adjoint and the imaginary residue is negligible.
    """
    if isinstance(ctf, CtfParams):
        ctf = ctf_evaluate(ctf, img.grid)
    else:
        ctf = np.asarray(ctf, dtype=np.float64)
        if ctf.shape != img.pixels.shape:
            raise ValueError(
                f"CTF array shape {ctf.shape} does not match image shape {img.pixels.shape}"
            )
    spectrum = fft_centered(img)
    spectrum.values *= ctf
    return ifft_centered(spectrum)


def phase_shift_translate(img: RenderedImage, translation_px) -> RenderedImage:
    """Translate an image by (tx, ty) pixels via the Fourier phase ramp.

    Whole-pixel translations reduce to circular shifts. A zero translation
    returns the pixels unchanged (the phase ramp is identically one).
    """
    tx, ty = float(translation_px[0]), float(translation_px[1])
    if not (math.isfinite(tx) and math.isfinite(ty)):
        raise ValueError("translation must be finite")
    if tx == 0.0 and ty == 0.0:
        return RenderedImage(grid=img.grid, pixels=img.pixels.copy())
    k = img.grid.freq_indices()
    phase = np.exp(-2j * np.pi * (k[None, :] * tx + k[:, None] * ty) / img.grid.size)
    spectrum = fft_centered(img)
    spectrum.values *= phase
    return ifft_centered(spectrum)
