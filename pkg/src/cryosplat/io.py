"""File formats: MRC2014 volumes/stacks and the plain-text metadata table."""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DataError, UnsupportedModeError
from .gmm import (
    GaussianMixture,
    GridSpec,
    normalize_quaternion,
    quaternion_to_matrix,
    save_checkpoint,
)
from .optics import CtfParams
from .simulate import SimulationResult
from .splat import Pose
from .train import Dataset, ParticleRecord

_MRC_HEADER_SIZE = 1024
_MRC_MODE_FLOAT32 = 2

META_COLUMNS = (
    "index",
    "qw",
    "qx",
    "qy",
    "qz",
    "tx_px",
    "ty_px",
    "defocus_u",
    "defocus_v",
    "astig_angle",
    "voltage_kv",
    "cs_mm",
    "amp_contrast",
    "phase_shift",
    "b_factor",
)


def write_mrc(path, data: np.ndarray, pixel_size: float, *, volume: bool | None = None) -> None:
    """Write a float32 MRC2014 file (mode 2, little-endian).

    ``data`` is (nz, ny, nx): a cubic volume or an image stack with nz
    images. ``pixel_size`` in Angstrom is stored via the cell dimensions.
    """
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise ValueError("MRC data must be 2D or 3D")
    nz, ny, nx = data.shape
    if nx != ny:
        raise ValueError(f"MRC images must be square, got nx={nx}, ny={ny}")
    if volume is None:
        volume = nz == nx
    if volume and nz != nx:
        raise ValueError("an MRC volume must be cubic")
    payload = np.ascontiguousarray(data, dtype="<f4")

    header = bytearray(_MRC_HEADER_SIZE)
    struct.pack_into("<3i", header, 0, nx, ny, nz)
    struct.pack_into("<i", header, 12, _MRC_MODE_FLOAT32)
    struct.pack_into("<3i", header, 16, 0, 0, 0)           # nxstart..nzstart
    struct.pack_into("<3i", header, 28, nx, ny, nz)        # mx, my, mz
    apix = np.float32(pixel_size)
    struct.pack_into("<3f", header, 40, apix * nx, apix * ny, apix * nz)
    struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)  # cell angles
    struct.pack_into("<3i", header, 64, 1, 2, 3)           # axis order
    struct.pack_into(
        "<3f", header, 76, float(payload.min()), float(payload.max()), float(payload.mean())
    )
    struct.pack_into("<i", header, 88, 1 if volume else 0)  # ispg: volume vs stack
    struct.pack_into("<i", header, 92, 0)                   # nsymbt
    header[208:212] = b"MAP "
    header[212:216] = bytes([0x44, 0x44, 0x00, 0x00])       # little-endian stamp
    struct.pack_into("<f", header, 216, float(payload.std()))
    struct.pack_into("<i", header, 220, 0)                  # nlabl

    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_mrc(path):
    """Read a mode-2 MRC file; returns (data (nz, ny, nx) float32, pixel_size)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _MRC_HEADER_SIZE:
        raise DataError(f"{path}: truncated MRC file (no header)")
    nx, ny, nz = struct.unpack_from("<3i", blob, 0)
    (mode,) = struct.unpack_from("<i", blob, 12)
    if mode != _MRC_MODE_FLOAT32:
        raise UnsupportedModeError(mode)
    if nx < 1 or ny < 1 or nz < 1:
        raise DataError(f"{path}: invalid MRC dimensions {nx} x {ny} x {nz}")
    if nx != ny:
        raise DataError(f"{path}: dimension mismatch, nx={nx} != ny={ny}")
    (nsymbt,) = struct.unpack_from("<i", blob, 92)
    offset = _MRC_HEADER_SIZE + nsymbt
    expected = offset + nx * ny * nz * 4
    if len(blob) < expected:
        raise DataError(f"{path}: truncated MRC payload ({len(blob)} < {expected} bytes)")
    (mx,) = struct.unpack_from("<i", blob, 28)
    (xlen,) = struct.unpack_from("<f", blob, 40)
    pixel_size = float(np.float32(xlen / mx)) if mx > 0 and xlen > 0 else 1.0
    data = np.frombuffer(blob, dtype="<f4", count=nx * ny * nz, offset=offset)
    return data.reshape(nz, ny, nx).copy(), pixel_size


def write_meta(path, quaternions: np.ndarray, translations: np.ndarray, ctfs) -> None:
    """Write the particle metadata table, one row per stack image.

    Values are printed with 17 significant digits so parsing reproduces the
    float64 bit patterns exactly.
    """
    n = len(ctfs)
    lines = ["# " + " ".join(META_COLUMNS)]
    for i in range(n):
        c = ctfs[i]
        fields = [
            quaternions[i, 0], quaternions[i, 1], quaternions[i, 2], quaternions[i, 3],
            translations[i, 0], translations[i, 1],
            c.defocus_u, c.defocus_v, c.astigmatism_angle, c.voltage,
            c.spherical_aberration, c.amplitude_contrast, c.phase_shift, c.b_factor,
        ]
        lines.append(str(i) + " " + " ".join(f"{v:.17g}" for v in fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_meta(path) -> np.ndarray:
    """Parse the metadata table into an (n, 15) float64 array."""
    try:
        rows = np.loadtxt(path, comments="#", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: malformed metadata table ({exc})") from exc
    if rows.size == 0:
        raise DataError(f"{path}: empty metadata table")
    if rows.shape[1] != len(META_COLUMNS):
        raise DataError(
            f"{path}: expected {len(META_COLUMNS)} columns, found {rows.shape[1]}"
        )
    indices = rows[:, 0].astype(np.int64)
    if not np.array_equal(indices, np.arange(len(rows))):
        raise DataError(f"{path}: metadata indices must run 0..{len(rows) - 1} in order")
    return rows


def load_dataset(stack_path, meta_path, extent: float = 0.5) -> Dataset:
    """Load a particle stack plus metadata into trainer records.

    Count consistency between the two files is checked before any records
    are built.
    """
    data, pixel_size = read_mrc(stack_path)
    rows = read_meta(meta_path)
    if data.shape[0] != rows.shape[0]:
        raise DataError(
            f"stack has {data.shape[0]} images but metadata has {rows.shape[0]} rows"
        )
    grid = GridSpec(data.shape[1], extent, pixel_size)
    records = []
    for i in range(rows.shape[0]):
        r = rows[i]
        pose = Pose(quaternion_to_matrix(normalize_quaternion(r[1:5])))
        ctf = CtfParams(
            defocus_u=r[7],
            defocus_v=r[8],
            astigmatism_angle=r[9],
            voltage=r[10],
            spherical_aberration=r[11],
            amplitude_contrast=r[12],
            phase_shift=r[13],
            b_factor=r[14],
        )
        records.append(
            ParticleRecord(image=data[i], pose=pose, ctf=ctf, translation=r[5:7].copy())
        )
    return Dataset(records=records, grid=grid)


def write_simulation(result: SimulationResult, out_dir, prefix: str, truth: GaussianMixture):
    """Write stack, metadata, and ground-truth checkpoint; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    stack_path = os.path.join(out_dir, f"{prefix}.mrcs")
    meta_path = os.path.join(out_dir, f"{prefix}_meta.txt")
    truth_path = os.path.join(out_dir, f"{prefix}_truth.cgs")
    records = result.records
    stack = np.stack([r.image.astype(np.float32) for r in records])
    write_mrc(stack_path, stack, result.dataset.grid.pixel_size, volume=False)
    translations = np.stack([r.translation for r in records])
    write_meta(meta_path, result.quaternions, translations, [r.ctf for r in records])
    save_checkpoint(truth, truth_path)
    return stack_path, meta_path, truth_path
