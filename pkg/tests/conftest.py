"""Shared fixtures and independent oracle implementations.

The oracles here deliberately avoid the package's own projection path:
rotations come from scipy, rendering is a dense per-pixel per-Gaussian
double loop with no culling, and gradients come from central finite
differences through the public forward API.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import cryosplat as cs
from cryosplat.gmm import PARAMS_PER_GAUSSIAN, inverse_activate


def softplus_ref(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def dense_render(mixture: cs.GaussianMixture, pose: cs.Pose, grid: cs.GridSpec) -> np.ndarray:
    """Dense no-culling rasterization oracle using scipy rotations."""
    coords = grid.coords()
    X, Y = np.meshgrid(coords, coords)
    out = np.zeros_like(X)
    W = pose.rotation
    t = np.array([pose.translation[0], pose.translation[1], 0.0])
    for i in range(len(mixture)):
        g = mixture.gaussian(i)
        q = np.asarray(g.quaternion, float)
        q = q / np.linalg.norm(q)
        # scipy uses (x, y, z, w) ordering
        R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        s = softplus_ref(np.asarray(g.raw_scale, float))
        cov = R @ np.diag(s**2) @ R.T
        cov_cam = W @ cov @ W.T
        mu = W @ g.mean + t
        c2 = cov_cam[:2, :2]
        prec = np.linalg.inv(c2)
        norm = 1.0 / (2.0 * np.pi * np.sqrt(np.linalg.det(c2)))
        dx = X - mu[0]
        dy = Y - mu[1]
        quad = prec[0, 0] * dx * dx + 2 * prec[0, 1] * dx * dy + prec[1, 1] * dy * dy
        out += softplus_ref(g.raw_amplitude) * norm * np.exp(-0.5 * quad)
    return out


def random_mixture(
    rng: np.random.Generator,
    n: int,
    grid: cs.GridSpec,
    scale_px=(1.0, 3.0),
    mean_range: float = 0.2,
    amp_range=(0.3, 2.0),
) -> cs.GaussianMixture:
    """Random well-conditioned mixture (scales given in pixel widths)."""
    params = np.zeros((n, PARAMS_PER_GAUSSIAN))
    params[:, 0:3] = rng.uniform(-mean_range, mean_range, (n, 3))
    params[:, 3:6] = inverse_activate(rng.uniform(*scale_px, (n, 3)) * grid.pixel_width)
    params[:, 6:10] = rng.standard_normal((n, 4))
    params[:, 10] = inverse_activate(rng.uniform(*amp_range, n))
    return cs.GaussianMixture(params)


def random_pose(rng: np.random.Generator, translation_range: float = 0.0) -> cs.Pose:
    t = rng.uniform(-translation_range, translation_range, 2) if translation_range else np.zeros(2)
    return cs.Pose.from_quaternion(rng.standard_normal(4), t)


def pipeline_loss(mixture, pose, ctf_array, observed, grid) -> float:
    """Forward loss of the full render -> CTF -> MSE pipeline."""
    rendered = cs.rasterize(mixture, pose, grid)
    model = cs.apply_ctf(rendered, ctf_array)
    return cs.loss_mse(model, observed)


def fd_pipeline_gradients(mixture, pose, ctf_array, observed, grid, step=1e-5):
    """Central finite differences of the full pipeline loss, (N, 11)."""
    base = mixture.params
    grads = np.zeros_like(base)
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            p = base.copy()
            p[i, j] += step
            up = pipeline_loss(cs.GaussianMixture(p, mode=mixture.mode), pose, ctf_array, observed, grid)
            p = base.copy()
            p[i, j] -= step
            dn = pipeline_loss(cs.GaussianMixture(p, mode=mixture.mode), pose, ctf_array, observed, grid)
            grads[i, j] = (up - dn) / (2 * step)
    return grads


def slice_theorem_ncc(mixture, pose, grid, band_radius):
    """Normalized cross-correlation between the projection spectrum and the
    central slice of the volume spectrum (cubic interpolation oracle)."""
    from scipy.ndimage import map_coordinates

    vol = cs.voxelize(mixture, grid)
    F3 = np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(vol.voxels)))
    c0 = grid.origin_index
    idx = grid.freq_indices()
    KX, KY = np.meshgrid(idx, idx)
    band = np.sqrt(KX**2 + KY**2) <= band_radius

    image = cs.rasterize(mixture, pose, grid)
    F2 = cs.fft_centered(image).values
    freq = np.stack([KX.ravel(), KY.ravel(), np.zeros(KX.size)]).astype(float)
    rotated = pose.rotation.T @ freq
    coords = np.stack([rotated[2] + c0, rotated[1] + c0, rotated[0] + c0])
    sl = (
        map_coordinates(F3.real, coords, order=3)
        + 1j * map_coordinates(F3.imag, coords, order=3)
    ).reshape(grid.size, grid.size)[band]
    f2 = F2[band]
    return float(
        np.abs(np.vdot(sl, f2)) / np.sqrt((np.abs(sl) ** 2).sum() * (np.abs(f2) ** 2).sum())
    )


@pytest.fixture
def grid64():
    return cs.GridSpec(64, 0.5, 3.0)


@pytest.fixture
def grid32():
    return cs.GridSpec(32, 0.5, 3.0)
