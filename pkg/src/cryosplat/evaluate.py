"""Voxelization of mixtures and Fourier shell correlation.

Volumes are (D, D, D) float64 arrays indexed [z, y, x] on the same
FFT-aligned coordinate map as images, so summing a volume along its z axis
discretizes the identity-pose projection. FSC shells collect frequency
indices whose rounded centered radius equals the shell number; resolutions
come from the first threshold crossing with linear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .gmm import (
    COL_MEAN,
    COL_QUAT,
    COL_RAW_AMP,
    COL_RAW_SCALE,
    GaussianMixture,
    GridSpec,
    activate,
    normalize_quaternion,
    quaternion_to_matrix,
)
from .splat import CULL_SIGMA, _CUTOFF_SQ, _SUB
from .train import Dataset, TrainConfig, half_config, train

FSC_GOLD_THRESHOLD = 0.143
FSC_HALF_THRESHOLD = 0.5


@dataclass
class VoxelVolume:
    """Cubic density samples at voxel centers, indexed [z, y, x]."""

    grid: GridSpec
    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        d = self.grid.size
        if self.voxels.shape != (d, d, d):
            raise ValueError("voxel array does not match grid size")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("voxel volume contains non-finite values")


@dataclass
class FscCurve:
    """Per-shell correlations plus resolutions read at the usual thresholds.

    ``resolution_0143`` / ``resolution_05`` are in Angstrom, or None when the
    curve never drops below the threshold (resolution not reached within the
    measured band, i.e. supported out to Nyquist).
    """

    shells: np.ndarray        # (S,) int shell indices, 1..D//2
    correlations: np.ndarray  # (S,) float
    pixel_size: float
    grid_size: int
    resolution_0143: float | None
    resolution_05: float | None

    def spatial_frequencies(self) -> np.ndarray:
        """Shell centers in cycles per Angstrom."""
        return self.shells / (self.grid_size * self.pixel_size)

    def min_correlation(self, max_shell: int | None = None) -> float:
        sel = self.shells <= (max_shell if max_shell is not None else self.shells.max())
        return float(self.correlations[sel].min())


def voxelize(mixture: GaussianMixture, grid: GridSpec) -> VoxelVolume:
    """Sample the mixture density at voxel centers, culled like the rasterizer."""
    raw = mixture.params
    n = len(mixture)
    s = activate(raw[:, COL_RAW_SCALE])
    amp = activate(raw[:, COL_RAW_AMP])
    rot = quaternion_to_matrix(normalize_quaternion(raw[:, COL_QUAT]))
    cov = np.einsum("nij,nj,nkj->nik", rot, s * s, rot)

    prec = np.linalg.inv(cov)
    det = np.linalg.det(cov)
    weight = amp / ((2.0 * np.pi) ** 1.5 * np.sqrt(det))
    lam_max = np.linalg.eigvalsh(cov)[:, -1]
    radius = CULL_SIGMA * np.sqrt(lam_max)

    h = grid.pixel_width
    c0 = grid.origin_index
    d = grid.size
    centers_px = raw[:, COL_MEAN] / h + c0
    bbox = np.empty((n, 6), dtype=np.int64)
    for axis in range(3):
        bbox[:, 2 * axis] = np.maximum(np.ceil(centers_px[:, axis] - radius / h), 0)
        bbox[:, 2 * axis + 1] = np.minimum(np.floor(centers_px[:, axis] + radius / h), d - 1)

    prec6 = np.empty((n, 6), dtype=np.float64)
    prec6[:, 0] = prec[:, 0, 0]
    prec6[:, 1] = prec[:, 0, 1]
    prec6[:, 2] = prec[:, 0, 2]
    prec6[:, 3] = prec[:, 1, 1]
    prec6[:, 4] = prec[:, 1, 2]
    prec6[:, 5] = prec[:, 2, 2]

    voxels = np.zeros((d, d, d), dtype=np.float64)
    _kernels.voxelize_gaussians(
        voxels,
        np.ascontiguousarray(raw[:, COL_MEAN]),
        prec6,
        np.ascontiguousarray(weight),
        bbox,
        h,
        c0,
        _CUTOFF_SQ,
        _SUB,
    )
    return VoxelVolume(grid=grid, voxels=voxels)


def _fft3_centered(voxels: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(voxels)))


def _resolution_at(shells, correlations, threshold, grid_size, pixel_size):
    """First crossing below threshold, linearly interpolated; None if never crossed."""
    prev_s, prev_c = 0.0, 1.0
    for s, c in zip(shells, correlations):
        if c < threshold:
            k = prev_s + (prev_c - threshold) / (prev_c - c) * (s - prev_s)
            return grid_size * pixel_size / k
        prev_s, prev_c = float(s), float(c)
    return None


def fsc(a: VoxelVolume, b: VoxelVolume) -> FscCurve:
    """Fourier shell correlation between two volumes on matching grids."""
    if a.grid.size != b.grid.size:
        raise ValueError(f"grid mismatch: {a.grid.size} vs {b.grid.size}")
    if a.grid.pixel_size != b.grid.pixel_size:
        raise ValueError("grid mismatch: differing pixel sizes")
    d = a.grid.size
    fa = _fft3_centered(a.voxels)
    fb = _fft3_centered(b.voxels)

    idx = a.grid.freq_indices().astype(np.float64)
    kz, ky, kx = np.meshgrid(idx, idx, idx, indexing="ij")
    shell = np.rint(np.sqrt(kx * kx + ky * ky + kz * kz)).astype(np.int64).ravel()

    n_bins = int(shell.max()) + 1
    cross = fa * np.conj(fb)
    num_re = np.bincount(shell, weights=cross.real.ravel(), minlength=n_bins)
    num_im = np.bincount(shell, weights=cross.imag.ravel(), minlength=n_bins)
    pow_a = np.bincount(shell, weights=np.abs(fa).ravel() ** 2, minlength=n_bins)
    pow_b = np.bincount(shell, weights=np.abs(fb).ravel() ** 2, minlength=n_bins)

    shells = np.arange(1, d // 2 + 1)
    num_re = num_re[shells]
    num_im = num_im[shells]
    denom = np.sqrt(pow_a[shells] * pow_b[shells])
    # real volumes pair k with -k (mod D) inside each shell, so the numerator
    # is real up to rounding; a large imaginary part means corrupted input
    mag = np.hypot(num_re, num_im)
    if np.any(np.abs(num_im) > 1e-6 * mag + 1e-300):
        raise ValueError("shell numerator has unexpectedly large imaginary part")
    with np.errstate(invalid="ignore", divide="ignore"):
        correlations = np.where(denom > 0, num_re / denom, 0.0)
    correlations = np.clip(correlations, -1.0, 1.0)

    return FscCurve(
        shells=shells,
        correlations=correlations,
        pixel_size=a.grid.pixel_size,
        grid_size=d,
        resolution_0143=_resolution_at(shells, correlations, FSC_GOLD_THRESHOLD, d, a.grid.pixel_size),
        resolution_05=_resolution_at(shells, correlations, FSC_HALF_THRESHOLD, d, a.grid.pixel_size),
    )


def gold_standard_fsc(
    dataset: Dataset,
    config: TrainConfig,
    *,
    n_gaussians: int,
    voxel_grid: GridSpec | None = None,
) -> FscCurve:
    """Train on even- and odd-index halves independently and correlate them.

    The odd half uses seed + 1 so the two random initializations differ.
    """
    if len(dataset) < 2:
        raise ValueError("gold-standard FSC needs at least 2 records")
    grid = voxel_grid if voxel_grid is not None else dataset.grid
    volumes = []
    for which in ("even", "odd"):
        mixture, _ = train(dataset.half(which), half_config(config, which), n_gaussians=n_gaussians)
        volumes.append(voxelize(mixture, grid))
    return fsc(volumes[0], volumes[1])


def _format_resolution(value: float | None) -> str:
    if value is None:
        return "Nyquist (threshold never crossed)"
    return f"{value:.4f} A"


def fsc_table(curve: FscCurve) -> str:
    """Plain-text table: shell_index spatial_freq_per_A correlation."""
    lines = [
        "# shell_index spatial_freq_per_A correlation",
        f"# resolution at 0.5:   {_format_resolution(curve.resolution_05)}",
        f"# resolution at 0.143: {_format_resolution(curve.resolution_0143)}",
    ]
    freqs = curve.spatial_frequencies()
    for s, f, c in zip(curve.shells, freqs, curve.correlations):
        lines.append(f"{s} {f:.8f} {c:.8f}")
    return "\n".join(lines) + "\n"


def paired_fsc_report(curves: dict) -> str:
    """Side-by-side FSC table for several labelled curves on one grid."""
    labels = list(curves)
    first = curves[labels[0]]
    lines = ["# shell spatial_freq_per_A " + " ".join(labels)]
    for label in labels:
        lines.append(
            f"# {label}: resolution at 0.5 = {_format_resolution(curves[label].resolution_05)}, "
            f"at 0.143 = {_format_resolution(curves[label].resolution_0143)}"
        )
    freqs = first.spatial_frequencies()
    for i, (s, f) in enumerate(zip(first.shells, freqs)):
        row = [f"{s}", f"{f:.8f}"] + [f"{curves[lb].correlations[i]:.8f}" for lb in labels]
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"
