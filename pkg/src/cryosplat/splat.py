"""Posed projection of 3D Gaussians and tile-based rasterization.

The forward path per Gaussian: activate raw parameters, build the world
covariance, rotate into the camera frame, drop the z components (the line
integral of a 3D Gaussian along z is the 2D Gaussian of the top-left
covariance block, normalization retained), and accumulate the normalized
2D density times amplitude onto the pixel grid. Rendering is a pure sum:
no alpha compositing, no depth ordering.

Footprints are truncated on the ellipse ``d^T P d < CULL_SIGMA**2`` and the
constant boundary value is subtracted, so every footprint reaches zero
continuously at the cutoff. This keeps truncation error orders of magnitude
below the rasterizer's stated tolerances and makes the rendered image a
continuous function of the parameters (pixels entering or leaving the
footprint carry value zero at the transition).

``rasterize_backward`` is the hand-derived adjoint of this exact forward
path, chaining through softplus activation, quaternion normalization, the
covariance build, the viewing rotation, marginalization, and the normalized
2D evaluation. Its culling matches the forward culling exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DegenerateRotationError, DegenerateSplatError
from .gmm import (
    COL_MEAN,
    COL_QUAT,
    COL_RAW_AMP,
    COL_RAW_SCALE,
    GaussianMixture,
    GaussianParams,
    GridSpec,
    activate,
    activate_derivative,
    build_covariance,
    normalize_quaternion,
    quaternion_to_matrix,
)

# Cull radius in standard deviations of the largest 2D eigenvalue. The
# subtracted boundary value exp(-CULL_SIGMA^2 / 2) bounds the pointwise
# truncation error relative to each Gaussian's peak.
CULL_SIGMA = 6.5
_CUTOFF_SQ = CULL_SIGMA * CULL_SIGMA
_SUB = float(np.exp(-0.5 * _CUTOFF_SQ))

# Smaller 2D eigenvalues are floored at (this fraction of a pixel width)^2
# before evaluation, preventing division blow-ups from collapsed Gaussians.
EIGEN_FLOOR_FRACTION = 0.1

DEFAULT_TILE_SIZE = 16


class ClampCounter:
    """Counts Gaussians whose 2D covariance hit the eigenvalue floor."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


CLAMP_EVENTS = ClampCounter()


@dataclass
class Pose:
    """Rigid viewing pose: rotation in SO(3) plus in-plane translation.

    ``translation`` is (tx, ty) in normalized units, embedded as (tx, ty, 0).
    """

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise ValueError("pose rotation must be a 3x3 matrix")
        if self.translation.shape != (2,):
            raise ValueError("pose translation must be a 2-vector")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("pose rotation is not a proper rotation (orthonormal, det +1)")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3))

    @classmethod
    def from_quaternion(cls, q, translation=(0.0, 0.0)) -> "Pose":
        return cls(quaternion_to_matrix(normalize_quaternion(q)), np.asarray(translation, float))

    @property
    def translation3(self) -> np.ndarray:
        return np.array([self.translation[0], self.translation[1], 0.0])


@dataclass
class CameraSpaceGaussian:
    """A Gaussian rotated/translated into the camera frame."""

    mean3: np.ndarray
    cov3: np.ndarray


@dataclass
class SplatGaussian2D:
    """A 3D Gaussian marginalized along the viewing axis.

    The density integrates to ``amplitude`` analytically: the
    1 / (2 pi sqrt(det)) normalization is retained.
    """

    mean2: np.ndarray
    cov2: np.ndarray
    amplitude: float = 1.0

    def density(self, points: np.ndarray) -> np.ndarray:
        """Exact (untruncated) density at ``points`` of shape (..., 2)."""
        points = np.asarray(points, dtype=np.float64)
        d = points - self.mean2
        prec = np.linalg.inv(self.cov2)
        q = np.einsum("...i,ij,...j->...", d, prec, d)
        norm = 1.0 / (2.0 * np.pi * np.sqrt(np.linalg.det(self.cov2)))
        return self.amplitude * norm * np.exp(-0.5 * q)


@dataclass
class RenderedImage:
    """A D x D image of density samples at pixel centers."""

    grid: GridSpec
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (self.grid.size, self.grid.size):
            raise ValueError("pixel array does not match grid size")


def view_transform(g: GaussianParams, pose: Pose) -> CameraSpaceGaussian:
    """Rotate one Gaussian into the camera frame: mean W mu + t, covariance W Sigma W^T."""
    cov = build_covariance(g.quaternion, g.raw_scale)
    mean3 = pose.rotation @ np.asarray(g.mean, dtype=np.float64) + pose.translation3
    cov3 = pose.rotation @ cov @ pose.rotation.T
    return CameraSpaceGaussian(mean3=mean3, cov3=cov3)


def orthographic_project(cg: CameraSpaceGaussian, amplitude: float = 1.0) -> SplatGaussian2D:
    """Marginalize a camera-frame Gaussian along z.

    Drops the z components of the mean and covariance; the resulting 2D
    Gaussian integrates to ``amplitude`` exactly.
    """
    cov2 = np.asarray(cg.cov3, dtype=np.float64)[:2, :2].copy()
    det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] * cov2[1, 0]
    if det <= 0 or cov2[0, 0] <= 0:
        raise DegenerateSplatError("projected 2x2 covariance is not positive definite")
    return SplatGaussian2D(mean2=np.asarray(cg.mean3[:2], float).copy(), cov2=cov2, amplitude=amplitude)


# ---------------------------------------------------------------------------
# Vectorized projection of a whole mixture (shared by forward and backward)
# ---------------------------------------------------------------------------


class _Projection:
    """Per-Gaussian screen-space quantities plus what the backward chain needs."""

    __slots__ = (
        "mean2", "prec", "cnorm", "amp", "bbox", "n_clamped", "clamped",
        "s", "qn", "qnorm", "R", "B2", "W",
    )

    def __init__(self, mixture: GaussianMixture, pose: Pose, grid: GridSpec):
        raw = mixture.params
        W = pose.rotation
        self.W = W
        self.s = activate(raw[:, COL_RAW_SCALE])                       # (N, 3)
        self.amp = activate(raw[:, COL_RAW_AMP])                       # (N,)
        q = raw[:, COL_QUAT]
        self.qnorm = np.sqrt((q * q).sum(axis=1))
        if not np.all(self.qnorm > 0) or not np.all(np.isfinite(self.qnorm)):
            raise DegenerateRotationError("quaternion with zero or non-finite norm")
        self.qn = q / self.qnorm[:, None]
        self.R = quaternion_to_matrix(self.qn)                         # (N, 3, 3)
        M = self.R * self.s[:, None, :]                                # R @ diag(s)
        self.B2 = W[:2, :] @ M                                         # (N, 2, 3)
        mean_cam2 = raw[:, COL_MEAN] @ W[:2, :].T + pose.translation
        self.mean2 = np.ascontiguousarray(mean_cam2)
        b2 = self.B2
        cov2 = np.empty((len(mixture), 2, 2), dtype=np.float64)
        cov2[:, 0, 0] = (b2[:, 0, :] * b2[:, 0, :]).sum(axis=1)
        cov2[:, 0, 1] = (b2[:, 0, :] * b2[:, 1, :]).sum(axis=1)
        cov2[:, 1, 0] = cov2[:, 0, 1]
        cov2[:, 1, 1] = (b2[:, 1, :] * b2[:, 1, :]).sum(axis=1)

        floor = (EIGEN_FLOOR_FRACTION * grid.pixel_width) ** 2
        cov2, lam_max, self.clamped = _clamp_eigenvalues(cov2, floor)
        self.n_clamped = int(self.clamped.sum())

        det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
        self.prec = np.empty((len(mixture), 3), dtype=np.float64)
        self.prec[:, 0] = cov2[:, 1, 1] / det
        self.prec[:, 1] = -cov2[:, 0, 1] / det
        self.prec[:, 2] = cov2[:, 0, 0] / det
        self.cnorm = 1.0 / (2.0 * np.pi * np.sqrt(det))

        radius_px = CULL_SIGMA * np.sqrt(lam_max) / grid.pixel_width
        c0 = grid.origin_index
        D = grid.size
        px = self.mean2 / grid.pixel_width + c0
        self.bbox = np.empty((len(mixture), 4), dtype=np.int64)
        self.bbox[:, 0] = np.maximum(np.ceil(px[:, 0] - radius_px), 0)
        self.bbox[:, 1] = np.minimum(np.floor(px[:, 0] + radius_px), D - 1)
        self.bbox[:, 2] = np.maximum(np.ceil(px[:, 1] - radius_px), 0)
        self.bbox[:, 3] = np.minimum(np.floor(px[:, 1] + radius_px), D - 1)


def _clamp_eigenvalues(cov2: np.ndarray, floor: float):
    """Floor the eigenvalues of symmetric 2x2 matrices; return (cov, lam_max, mask)."""
    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    d = cov2[:, 1, 1]
    mid = 0.5 * (a + d)
    rad = np.sqrt(np.maximum(0.25 * (a - d) ** 2 + b * b, 0.0))
    lam1 = mid + rad
    lam2 = mid - rad
    mask = lam2 < floor
    if not mask.any():
        return cov2, lam1, mask

    cov2 = cov2.copy()
    idx = np.nonzero(mask)[0]
    for i in idx:
        l1 = max(lam1[i], floor)
        l2 = max(lam2[i], floor)
        # eigenvector of the larger eigenvalue; fall back to axes if isotropic
        v1 = np.array([b[i], lam1[i] - a[i]])
        v1_alt = np.array([lam1[i] - d[i], b[i]])
        if np.dot(v1_alt, v1_alt) > np.dot(v1, v1):
            v1 = v1_alt
        n = np.sqrt(np.dot(v1, v1))
        if n == 0.0:
            v1 = np.array([1.0, 0.0])
        else:
            v1 = v1 / n
        v2 = np.array([-v1[1], v1[0]])
        cov2[i] = l1 * np.outer(v1, v1) + l2 * np.outer(v2, v2)
    lam_max = np.maximum(lam1, floor)
    return cov2, lam_max, mask


def rasterize(
    mixture: GaussianMixture,
    pose: Pose,
    grid: GridSpec,
    *,
    tile_size: int = DEFAULT_TILE_SIZE,
) -> RenderedImage:
    """Render the mixture at a pose onto the FFT-aligned pixel grid.

    ``pixels[iy, ix]`` samples the projected density at (x(ix), y(iy));
    a Gaussian centered at the origin peaks at pixel (size//2, size//2).
    Gaussians entirely outside the field of view contribute zero.
    """
    proj = _Projection(mixture, pose, grid)
    CLAMP_EVENTS.count += proj.n_clamped
    pixels = np.zeros((grid.size, grid.size), dtype=np.float64)
    n_tiles_x = -(-grid.size // tile_size)
    gauss_ids, tile_starts = _kernels.build_tile_work(
        proj.bbox, tile_size, n_tiles_x, n_tiles_x
    )
    _kernels.forward_tiles(
        pixels,
        gauss_ids,
        tile_starts,
        n_tiles_x,
        tile_size,
        proj.mean2,
        proj.prec,
        np.ascontiguousarray(proj.amp * proj.cnorm),
        proj.bbox,
        grid.pixel_width,
        grid.origin_index,
        _CUTOFF_SQ,
        _SUB,
    )
    return RenderedImage(grid=grid, pixels=pixels)


def rasterize_backward(
    mixture: GaussianMixture,
    pose: Pose,
    grid: GridSpec,
    dL_dpixels: np.ndarray,
) -> np.ndarray:
    """Gradients of sum(dL_dpixels * rendered_pixels) w.r.t. raw parameters.

    Returns an (N, 11) array in storage column order. Culling matches the
    forward pass exactly. Where the eigenvalue floor was active the clamped
    covariance is treated as the effective one (the floored eigenvalue has
    zero sensitivity, which is the correct subgradient of the clamp).
    """
    dL = np.ascontiguousarray(dL_dpixels, dtype=np.float64)
    if dL.shape != (grid.size, grid.size):
        raise ValueError("dL_dpixels shape does not match grid")
    proj = _Projection(mixture, pose, grid)

    sums = np.zeros((len(mixture), 6), dtype=np.float64)
    _kernels.backward_pixels(
        dL,
        proj.mean2,
        proj.prec,
        proj.bbox,
        grid.pixel_width,
        grid.origin_index,
        _CUTOFF_SQ,
        _SUB,
        sums,
    )

    raw = mixture.params
    ac = proj.amp * proj.cnorm
    dA = proj.cnorm * sums[:, 0]
    dmean2 = ac[:, None] * sums[:, 1:3]
    dcov2 = np.empty((len(mixture), 2, 2), dtype=np.float64)
    dcov2[:, 0, 0] = ac * sums[:, 3]
    dcov2[:, 0, 1] = ac * sums[:, 4]
    dcov2[:, 1, 0] = ac * sums[:, 4]
    dcov2[:, 1, 1] = ac * sums[:, 5]

    # cov2 = B2 B2^T with dcov2 symmetric; only the top two rows of the
    # camera-frame factor reach the screen, so chain through them alone
    dB2 = 2.0 * (dcov2 @ proj.B2)
    dM = proj.W[:2, :].T @ dB2  # W^T restricted to the projected rows
    dscale = (proj.R * dM).sum(axis=1)
    dR = dM * proj.s[:, None, :]

    dmean = dmean2 @ proj.W[:2, :]

    qw, qx, qy, qz = proj.qn[:, 0], proj.qn[:, 1], proj.qn[:, 2], proj.qn[:, 3]
    r = dR
    dqn = np.empty((len(mixture), 4), dtype=np.float64)
    dqn[:, 0] = 2 * (
        -qz * r[:, 0, 1] + qy * r[:, 0, 2] + qz * r[:, 1, 0]
        - qx * r[:, 1, 2] - qy * r[:, 2, 0] + qx * r[:, 2, 1]
    )
    dqn[:, 1] = 2 * (
        qy * r[:, 0, 1] + qz * r[:, 0, 2] + qy * r[:, 1, 0]
        - 2 * qx * r[:, 1, 1] - qw * r[:, 1, 2] + qz * r[:, 2, 0]
        + qw * r[:, 2, 1] - 2 * qx * r[:, 2, 2]
    )
    dqn[:, 2] = 2 * (
        -2 * qy * r[:, 0, 0] + qx * r[:, 0, 1] + qw * r[:, 0, 2]
        + qx * r[:, 1, 0] + qz * r[:, 1, 2] - qw * r[:, 2, 0]
        + qz * r[:, 2, 1] - 2 * qy * r[:, 2, 2]
    )
    dqn[:, 3] = 2 * (
        -2 * qz * r[:, 0, 0] - qw * r[:, 0, 1] + qx * r[:, 0, 2]
        + qw * r[:, 1, 0] - 2 * qz * r[:, 1, 1] + qy * r[:, 1, 2]
        + qx * r[:, 2, 0] + qy * r[:, 2, 1]
    )
    # through unit normalization: project out the radial component
    dq = (dqn - np.sum(dqn * proj.qn, axis=1, keepdims=True) * proj.qn) / proj.qnorm[:, None]

    grads = np.empty_like(raw)
    grads[:, COL_MEAN] = dmean
    grads[:, COL_RAW_SCALE] = dscale * activate_derivative(raw[:, COL_RAW_SCALE])
    grads[:, COL_QUAT] = dq
    grads[:, COL_RAW_AMP] = dA * activate_derivative(raw[:, COL_RAW_AMP])
    return grads
