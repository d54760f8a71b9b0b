"""Gaussian-mixture volume representation.

A mixture of N anisotropic 3D Gaussians is stored as an (N, 11) float64
array. Columns, in checkpoint order:

    0:3   mean (x, y, z), normalized volume units
    3:6   raw scale (pre-softplus), one per principal axis
    6:10  quaternion (w, x, y, z), unnormalized storage
    10    raw amplitude (pre-softplus)

Scales and amplitudes are stored pre-activation; ``activate`` (softplus)
maps them to the strictly positive physical values. Quaternions are
normalized on every covariance build, never in storage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateRotationError

COL_MEAN = slice(0, 3)
COL_RAW_SCALE = slice(3, 6)
COL_QUAT = slice(6, 10)
COL_RAW_AMP = 10
PARAMS_PER_GAUSSIAN = 11

MODES = ("anisotropic", "isotropic")

_CHECKPOINT_MAGIC = b"CGS1"
_MODE_BYTES = {"anisotropic": 0, "isotropic": 1}
_BYTE_MODES = {v: k for k, v in _MODE_BYTES.items()}


@dataclass(frozen=True)
class GridSpec:
    """Square/cubic discretization of the normalized domain [-extent, extent].

    ``pixel_size`` is the physical sampling rate in Angstrom per pixel and is
    used only for resolution reporting and CTF frequencies. Pixel index
    ``size // 2`` maps exactly to coordinate 0.
    """

    size: int
    extent: float = 0.5
    pixel_size: float = 1.0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"grid size must be positive, got {self.size}")
        if self.extent <= 0:
            raise ValueError(f"grid extent must be positive, got {self.extent}")

    @property
    def pixel_width(self) -> float:
        """Pixel width in normalized units: 2 * extent / size."""
        return 2.0 * self.extent / self.size

    @property
    def origin_index(self) -> int:
        """Index of the pixel whose coordinate is exactly 0."""
        return self.size // 2

    def coords(self) -> np.ndarray:
        """Real-space coordinate of every pixel index along one axis."""
        return (np.arange(self.size) - self.origin_index) * self.pixel_width

    def freq_indices(self) -> np.ndarray:
        """Centered integer frequency indices (zero at ``origin_index``)."""
        return np.arange(self.size) - self.origin_index


def activate(raw):
    """Softplus ln(1 + exp(raw)), overflow-safe for large inputs."""
    raw = np.asarray(raw, dtype=np.float64)
    out = np.maximum(raw, 0.0) + np.log1p(np.exp(-np.abs(raw)))
    return out if out.ndim else float(out)


def activate_derivative(raw):
    """Derivative of softplus: the logistic sigmoid."""
    raw = np.asarray(raw, dtype=np.float64)
    e = np.exp(-np.abs(raw))  # never overflows
    out = np.where(raw >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def inverse_activate(value):
    """Inverse softplus: ln(exp(value) - 1), for strictly positive values."""
    value = np.asarray(value, dtype=np.float64)
    if np.any(value <= 0):
        raise ValueError("inverse softplus requires strictly positive input")
    # value + log(1 - exp(-value)) is stable for both small and large inputs
    out = value + np.log(-np.expm1(-value))
    return out if out.ndim else float(out)


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Unit-normalize quaternions of shape (4,) or (N, 4)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if not np.all(norm > 0) or not np.all(np.isfinite(norm)):
        raise DegenerateRotationError("quaternion with zero or non-finite norm")
    return q / norm


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z), shape (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariance(quaternion, raw_scale) -> np.ndarray:
    """Covariance R diag(softplus(raw_scale))^2 R^T of one Gaussian.

    The quaternion is normalized first; a zero-norm quaternion raises
    ``DegenerateRotationError``. The result is symmetric positive definite.
    """
    qn = normalize_quaternion(np.asarray(quaternion, dtype=np.float64))
    R = quaternion_to_matrix(qn)
    s = np.asarray(activate(raw_scale), dtype=np.float64)
    return (R * s**2) @ R.T


@dataclass
class GaussianParams:
    """Raw parameters of a single Gaussian (11 scalars)."""

    mean: np.ndarray
    raw_scale: np.ndarray
    quaternion: np.ndarray
    raw_amplitude: float

    def as_row(self) -> np.ndarray:
        row = np.empty(PARAMS_PER_GAUSSIAN, dtype=np.float64)
        row[COL_MEAN] = self.mean
        row[COL_RAW_SCALE] = self.raw_scale
        row[COL_QUAT] = self.quaternion
        row[COL_RAW_AMP] = self.raw_amplitude
        return row

    @classmethod
    def from_row(cls, row: np.ndarray) -> "GaussianParams":
        row = np.asarray(row, dtype=np.float64)
        return cls(
            mean=row[COL_MEAN].copy(),
            raw_scale=row[COL_RAW_SCALE].copy(),
            quaternion=row[COL_QUAT].copy(),
            raw_amplitude=float(row[COL_RAW_AMP]),
        )

    @property
    def scale(self) -> np.ndarray:
        return activate(self.raw_scale)

    @property
    def amplitude(self) -> float:
        return float(activate(self.raw_amplitude))

    def covariance(self) -> np.ndarray:
        return build_covariance(self.quaternion, self.raw_scale)


@dataclass
class GaussianMixture:
    """A fixed-count mixture of anisotropic (or isotropic) Gaussians.

    ``params`` is the (N, 11) raw parameter array; see module docstring for
    the column layout. In isotropic mode the three raw-scale columns of each
    Gaussian hold one shared value at all times.
    """

    params: np.ndarray
    mode: str = "anisotropic"
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.ndim != 2 or self.params.shape[1] != PARAMS_PER_GAUSSIAN:
            raise ValueError(f"params must have shape (N, {PARAMS_PER_GAUSSIAN})")
        if self.params.shape[0] < 1:
            raise ValueError("mixture must contain at least one Gaussian")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "isotropic":
            sc = self.params[:, COL_RAW_SCALE]
            if not (np.all(sc[:, 0] == sc[:, 1]) and np.all(sc[:, 0] == sc[:, 2])):
                raise ValueError("isotropic mixture requires identical raw scales per Gaussian")

    @property
    def count(self) -> int:
        return self.params.shape[0]

    def __len__(self) -> int:
        return self.count

    def gaussian(self, i: int) -> GaussianParams:
        return GaussianParams.from_row(self.params[i])

    def means(self) -> np.ndarray:
        return self.params[:, COL_MEAN]

    def scales(self) -> np.ndarray:
        return activate(self.params[:, COL_RAW_SCALE])

    def amplitudes(self) -> np.ndarray:
        return activate(self.params[:, COL_RAW_AMP])

    def copy(self) -> "GaussianMixture":
        return GaussianMixture(self.params.copy(), mode=self.mode, seed=self.seed)


def init_random(n: int, seed: int, grid: GridSpec, mode: str = "anisotropic") -> GaussianMixture:
    """Random mixture initialization.

    Means are i.i.d. normal with per-axis standard deviation 0.9 * extent / 6
    (the bulk of the mass sits inside a sphere of radius extent / 2). Every
    activated scale starts at one tenth of that deviation, quaternions at
    identity, and activated amplitudes at 1 / (2n) so the total starting mass
    is 1/2 regardless of n. Raw values are set by inverse softplus so the
    activated targets hold exactly. Deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError(f"number of Gaussians must be >= 1, got {n}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    mean_std = 0.9 * grid.extent / 6.0
    scale_target = 0.1 * mean_std
    amp_target = 1.0 / (2.0 * n)

    rng = np.random.default_rng(seed)
    params = np.zeros((n, PARAMS_PER_GAUSSIAN), dtype=np.float64)
    params[:, COL_MEAN] = rng.normal(0.0, mean_std, size=(n, 3))
    params[:, COL_RAW_SCALE] = inverse_activate(scale_target)
    params[:, COL_QUAT.start] = 1.0  # identity quaternion (1, 0, 0, 0)
    params[:, COL_RAW_AMP] = inverse_activate(amp_target)
    return GaussianMixture(params, mode=mode, seed=seed)


def param_count(mixture: GaussianMixture) -> int:
    """Total trainable scalar count: 11 per Gaussian."""
    return PARAMS_PER_GAUSSIAN * mixture.count


def save_checkpoint(mixture: GaussianMixture, path) -> None:
    """Write the binary checkpoint: magic "CGS1", u64 count, u8 mode, N x 11 f64 LE."""
    header = struct.pack("<4sQB", _CHECKPOINT_MAGIC, mixture.count, _MODE_BYTES[mixture.mode])
    payload = np.ascontiguousarray(mixture.params, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path) -> GaussianMixture:
    """Read a checkpoint written by ``save_checkpoint``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_size = struct.calcsize("<4sQB")
    if len(blob) < header_size:
        raise DataError(f"checkpoint {path} is truncated (no header)")
    magic, count, mode_byte = struct.unpack_from("<4sQB", blob)
    if magic != _CHECKPOINT_MAGIC:
        raise DataError(f"checkpoint {path} has bad magic {magic!r}")
    if mode_byte not in _BYTE_MODES:
        raise DataError(f"checkpoint {path} has unknown mode byte {mode_byte}")
    expected = header_size + count * PARAMS_PER_GAUSSIAN * 8
    if len(blob) != expected:
        raise DataError(
            f"checkpoint {path} has {len(blob)} bytes, expected {expected} for {count} Gaussians"
        )
    params = np.frombuffer(blob, dtype="<f8", offset=header_size).reshape(
        count, PARAMS_PER_GAUSSIAN
    )
    return GaussianMixture(params.astype(np.float64), mode=_BYTE_MODES[mode_byte])
