"""Differentiable orthographic Gaussian splatting for projection-image reconstruction.

A 3D density is represented as a mixture of anisotropic Gaussians and fitted
to noisy 2D projection images with known poses by rendering each view in
real space, modulating it with the contrast transfer function in Fourier
space, and descending the mean squared error with Adam from a random
initialization. Volumes are evaluated by voxelization and Fourier shell
correlation.
"""

from .errors import (
    CryosplatError,
    DataError,
    DegenerateRotationError,
    DegenerateSplatError,
    DivergenceError,
    UnsupportedModeError,
)
from .evaluate import FscCurve, VoxelVolume, fsc, gold_standard_fsc, voxelize
from .gmm import (
    GaussianMixture,
    GaussianParams,
    GridSpec,
    activate,
    build_covariance,
    init_random,
    inverse_activate,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .optics import (
    CtfParams,
    Spectrum,
    apply_ctf,
    ctf_evaluate,
    electron_wavelength,
    fft_centered,
    ifft_centered,
    phase_shift_translate,
)
from .simulate import (
    DefocusRange,
    NoiseModel,
    SimSpec,
    make_phantom,
    sample_pose,
    simulate,
    snr_from_db,
)
from .splat import (
    CameraSpaceGaussian,
    Pose,
    RenderedImage,
    SplatGaussian2D,
    orthographic_project,
    rasterize,
    rasterize_backward,
    view_transform,
)
from .train import (
    AdamState,
    Dataset,
    ParticleRecord,
    TrainConfig,
    loss_mse,
    train,
    train_step,
)

__version__ = "0.1.0"
