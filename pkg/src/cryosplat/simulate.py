"""Forward-model data generation: poses, CTFs, translations, calibrated noise.

Particle i draws its pose/CTF/translation from a generator seeded with
``spec.seed + i`` and its noise from one seeded with ``spec.noise.seed + i``,
so generation is deterministic and order-independent. Noise variance is
calibrated against the variance of the clean (post-CTF, post-translation)
signal over the whole dataset: var_noise = var_signal / snr.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gmm import (
    COL_MEAN,
    COL_QUAT,
    COL_RAW_AMP,
    COL_RAW_SCALE,
    GaussianMixture,
    GridSpec,
    PARAMS_PER_GAUSSIAN,
    inverse_activate,
    normalize_quaternion,
)
from .optics import CtfParams, apply_ctf, phase_shift_translate
from .splat import Pose, rasterize
from .train import Dataset, ParticleRecord

PHANTOM_KINDS = ("helix", "blob-cluster", "two-lobe")


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian pixel noise controlled by a signal-to-noise variance ratio.

    ``snr = math.inf`` disables noise entirely.
    """

    snr: float
    seed: int = 0

    def __post_init__(self):
        if not self.snr > 0:
            raise ValueError("snr must be positive (use math.inf to disable noise)")


def snr_from_db(db: float) -> float:
    """Convert an SNR in decibel to a variance ratio: 10**(db / 10)."""
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class DefocusRange:
    """Uniformly sampled defocus (defocus_v = defocus_u, no astigmatism)."""

    minimum: float  # Angstrom
    maximum: float  # Angstrom
    template: CtfParams = CtfParams(defocus_u=15000.0, defocus_v=15000.0)

    def sample(self, rng: np.random.Generator) -> CtfParams:
        from dataclasses import replace

        d = float(rng.uniform(self.minimum, self.maximum))
        return replace(self.template, defocus_u=d, defocus_v=d, astigmatism_angle=0.0)


@dataclass
class SimSpec:
    truth: GaussianMixture
    num_particles: int
    grid: GridSpec
    ctf_distribution: object            # DefocusRange or sequence of CtfParams
    noise: NoiseModel
    translation_range: float = 0.0      # pixels
    integer_translations: bool = False
    pose_jitter_deg: float = 0.0        # optional error between true and recorded pose
    seed: int = 0

    def __post_init__(self):
        if self.num_particles < 2:
            raise ValueError("num_particles must be >= 2 (both half-splits must be non-empty)")


def sample_rotation_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Unnormalized 4D Gaussian vector; its direction is uniform over SO(3)."""
    return rng.standard_normal(4)


def sample_pose(
    rng: np.random.Generator,
    translation_range: float = 0.0,
    integer_translations: bool = False,
) -> Pose:
    """Pose with rotation uniform over SO(3) and translation uniform in a box.

    The translation is expressed in the units the caller intends to use it in
    (normalized units for the splat-side transform).
    """
    q = sample_rotation_quaternion(rng)
    t = rng.uniform(-translation_range, translation_range, size=2) if translation_range else np.zeros(2)
    if integer_translations:
        t = np.rint(t)
    return Pose.from_quaternion(q, t)


def _quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _jitter_quaternion(rng: np.random.Generator, degrees: float) -> np.ndarray:
    """Small random rotation: axis uniform, angle normal with the given std."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(degrees) * rng.standard_normal()
    return np.concatenate(([math.cos(angle / 2.0)], math.sin(angle / 2.0) * axis))


def make_phantom(kind: str, n: int, seed: int = 0) -> GaussianMixture:
    """Deterministic structured ground-truth mixtures, mass within radius extent/2.

    ``helix``: Gaussians along a two-turn helical curve, long axis aligned to
    the local tangent. ``two-lobe``: two tight clusters on the x axis.
    ``blob-cluster``: an isotropic cloud of random anisotropic Gaussians.
    """
    if n < 1:
        raise ValueError("phantom needs n >= 1")
    rng = np.random.default_rng(seed)
    params = np.zeros((n, PARAMS_PER_GAUSSIAN), dtype=np.float64)
    params[:, COL_RAW_AMP] = inverse_activate(1.0 / n)

    if kind == "helix":
        t = np.linspace(0.0, 1.0, n)
        theta = 4.0 * np.pi * t
        radius, z_half = 0.15, 0.2
        params[:, 0] = radius * np.cos(theta)
        params[:, 1] = radius * np.sin(theta)
        params[:, 2] = -z_half + 2.0 * z_half * t
        tangent = np.stack(
            [-radius * 4.0 * np.pi * np.sin(theta), radius * 4.0 * np.pi * np.cos(theta), np.full(n, 2.0 * z_half)],
            axis=1,
        )
        tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
        # quaternion rotating the x axis onto the tangent
        x_axis = np.array([1.0, 0.0, 0.0])
        for i in range(n):
            axis = np.cross(x_axis, tangent[i])
            axis /= np.linalg.norm(axis)
            angle = math.acos(float(np.clip(np.dot(x_axis, tangent[i]), -1.0, 1.0)))
            params[i, COL_QUAT] = np.concatenate(
                ([math.cos(angle / 2.0)], math.sin(angle / 2.0) * axis)
            )
        params[:, 3] = inverse_activate(0.030)   # along the tangent
        params[:, 4] = inverse_activate(0.015)
        params[:, 5] = inverse_activate(0.015)
    elif kind == "two-lobe":
        centers = np.array([[-0.12, 0.0, 0.0], [0.12, 0.0, 0.0]])
        means = centers[np.arange(n) % 2] + rng.normal(0.0, 0.02, size=(n, 3))
        norms = np.linalg.norm(means, axis=1)
        over = norms > 0.245
        means[over] *= (0.245 / norms[over])[:, None]
        params[:, COL_MEAN] = means
        params[:, COL_RAW_SCALE] = inverse_activate(0.04)
        params[:, COL_QUAT.start] = 1.0
    elif kind == "blob-cluster":
        means = np.empty((n, 3))
        filled = 0
        while filled < n:
            cand = rng.normal(0.0, 0.1, size=(n - filled, 3))
            keep = cand[np.linalg.norm(cand, axis=1) <= 0.24]
            means[filled : filled + len(keep)] = keep
            filled += len(keep)
        params[:, COL_MEAN] = means
        scales = rng.uniform(0.02, 0.04, size=(n, 3))
        params[:, COL_RAW_SCALE] = inverse_activate(scales)
        params[:, COL_QUAT] = normalize_quaternion(rng.standard_normal((n, 4)))
    else:
        raise ValueError(f"unknown phantom kind {kind!r} (choose from {PHANTOM_KINDS})")
    return GaussianMixture(params)


@dataclass
class SimulationResult:
    dataset: Dataset
    quaternions: np.ndarray      # (K, 4) raw (unnormalized) pose quaternions
    noise_sigma: float

    @property
    def records(self):
        return self.dataset.records


def simulate(spec: SimSpec) -> SimulationResult:
    """Render, modulate, translate, and corrupt particles from the truth mixture.

    Images are stored as float32 (the stack sample type). When
    ``pose_jitter_deg > 0`` the recorded pose is a jittered copy of the true
    rendering pose, emulating imperfect pose assignments.
    """
    grid = spec.grid
    n = spec.num_particles
    clean = np.empty((n, grid.size, grid.size), dtype=np.float64)
    quats = np.empty((n, 4), dtype=np.float64)
    poses = []
    ctfs = []
    translations = np.zeros((n, 2), dtype=np.float64)

    for i in range(n):
        rng = np.random.default_rng(spec.seed + i)
        q = sample_rotation_quaternion(rng)
        true_pose = Pose.from_quaternion(q)
        if isinstance(spec.ctf_distribution, DefocusRange):
            ctf = spec.ctf_distribution.sample(rng)
        else:
            choices = list(spec.ctf_distribution)
            ctf = choices[int(rng.integers(len(choices)))]
        if spec.translation_range:
            t = rng.uniform(-spec.translation_range, spec.translation_range, size=2)
            if spec.integer_translations:
                t = np.rint(t)
            translations[i] = t
        if spec.pose_jitter_deg > 0:
            q = _quaternion_multiply(_jitter_quaternion(rng, spec.pose_jitter_deg), q)

        img = apply_ctf(rasterize(spec.truth, true_pose, grid), ctf)
        if translations[i, 0] != 0.0 or translations[i, 1] != 0.0:
            img = phase_shift_translate(img, translations[i])
        clean[i] = img.pixels
        quats[i] = q
        poses.append(Pose.from_quaternion(q))
        ctfs.append(ctf)

    if math.isinf(spec.noise.snr):
        noise_sigma = 0.0
    else:
        noise_sigma = float(np.sqrt(clean.var() / spec.noise.snr))

    records = []
    for i in range(n):
        img = clean[i]
        if noise_sigma > 0.0:
            noise_rng = np.random.default_rng(spec.noise.seed + i)
            img = img + noise_rng.normal(0.0, noise_sigma, size=img.shape)
        records.append(
            ParticleRecord(
                image=img.astype(np.float32),
                pose=poses[i],
                ctf=ctfs[i],
                translation=translations[i],
            )
        )
    return SimulationResult(
        dataset=Dataset(records=records, grid=grid),
        quaternions=quats,
        noise_sigma=noise_sigma,
    )
