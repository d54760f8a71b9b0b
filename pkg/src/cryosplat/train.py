"""End-to-end optimization: render + CTF forward, MSE loss, Adam updates.

One optimization stream at batch size 1. The learning rate is a single
scalar applied identically to all 11 parameter kinds and decays by
``decay_gamma`` at each epoch boundary: lr(e) = learning_rate * gamma**e
with e starting at 0. Runs are deterministic for a fixed seed.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError
from .gmm import (
    COL_RAW_SCALE,
    GaussianMixture,
    GridSpec,
    MODES,
    init_random,
    save_checkpoint,
)
from .optics import CtfParams, apply_ctf, ctf_evaluate, phase_shift_translate
from .splat import Pose, RenderedImage, rasterize, rasterize_backward

# A step whose loss exceeds this multiple of the epoch-0 median aborts the run.
DIVERGENCE_FACTOR = 1e3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 1
    learning_rate: float = 0.001
    decay_gamma: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    mode: str = "anisotropic"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")
        if self.learning_rate <= 0 or self.decay_gamma <= 0:
            raise ValueError("learning_rate and decay_gamma must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    def epoch_lr(self, epoch: int) -> float:
        return self.learning_rate * self.decay_gamma**epoch


@dataclass(eq=False)
class ParticleRecord:
    """One observed image with its pose, CTF, and recorded translation (pixels)."""

    image: np.ndarray
    pose: Pose
    ctf: CtfParams
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.image.ndim != 2 or self.image.shape[0] != self.image.shape[1]:
            raise ValueError("particle image must be square")
        if not np.all(np.isfinite(self.image)):
            raise ValueError("particle image contains non-finite values")


@dataclass
class Dataset:
    records: list
    grid: GridSpec

    def __len__(self) -> int:
        return len(self.records)

    def half(self, which: str) -> "Dataset":
        """Even- or odd-index half split (gold-standard protocol)."""
        if which not in ("even", "odd"):
            raise ValueError("half must be 'even' or 'odd'")
        offset = 0 if which == "even" else 1
        return Dataset(records=self.records[offset::2], grid=self.grid)


class AdamState:
    """First/second moment buffers for the (N, 11) raw parameter array."""

    def __init__(self, n: int):
        self.m = np.zeros((n, 11), dtype=np.float64)
        self.v = np.zeros((n, 11), dtype=np.float64)
        self.t = 0

    def update(self, params: np.ndarray, grads: np.ndarray, lr: float, config: TrainConfig) -> None:
        """One Adam step, in place. A single lr scales every parameter kind."""
        b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_epsilon
        self.t += 1
        self.m *= b1
        self.m += (1.0 - b1) * grads
        self.v *= b2
        self.v += (1.0 - b2) * grads * grads
        m_hat = self.m / (1.0 - b1**self.t)
        v_hat = self.v / (1.0 - b2**self.t)
        params -= lr * m_hat / (np.sqrt(v_hat) + eps)


def loss_mse(rendered, observed) -> float:
    """Mean over all pixels of the squared difference."""
    a = rendered.pixels if isinstance(rendered, RenderedImage) else np.asarray(rendered)
    b = observed.pixels if isinstance(observed, RenderedImage) else np.asarray(observed)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff))


def _centered_observation(record: ParticleRecord) -> np.ndarray:
    """Observed image with its recorded translation removed."""
    img = np.asarray(record.image, dtype=np.float64)
    if record.translation[0] == 0.0 and record.translation[1] == 0.0:
        return img
    dummy_grid = GridSpec(img.shape[0])
    shifted = phase_shift_translate(
        RenderedImage(grid=dummy_grid, pixels=img), -record.translation
    )
    return shifted.pixels


def _step(
    mixture: GaussianMixture,
    pose: Pose,
    ctf_array: np.ndarray,
    observed: np.ndarray,
    grid: GridSpec,
    config: TrainConfig,
    adam: AdamState,
    lr: float,
) -> float:
    rendered = rasterize(mixture, pose, grid)
    model = apply_ctf(rendered, ctf_array)
    loss = loss_mse(model, observed)
    if not math.isfinite(loss):
        return loss  # caller raises with context

    d = grid.size
    dL_dmodel = (2.0 / (d * d)) * (model.pixels - observed)
    # the CTF operator is self-adjoint, so the backward pass reuses it
    dL_drendered = apply_ctf(RenderedImage(grid=grid, pixels=dL_dmodel), ctf_array)
    grads = rasterize_backward(mixture, pose, grid, dL_drendered.pixels)
    if config.mode == "isotropic":
        # one shared raw scale per Gaussian: gradients accumulate across axes
        grads[:, COL_RAW_SCALE] = grads[:, COL_RAW_SCALE].sum(axis=1, keepdims=True)
    adam.update(mixture.params, grads, lr, config)
    return loss


def train_step(
    mixture: GaussianMixture,
    record: ParticleRecord,
    config: TrainConfig,
    adam: AdamState,
    *,
    lr: float | None = None,
    grid: GridSpec | None = None,
    record_index: int = -1,
):
    """One render / compare / update cycle against a single record.

    Renders the mixture at the record's pose, applies its CTF, removes the
    recorded translation from the observed image by phase shifting, computes
    the MSE loss, backpropagates, and applies one Adam update in place.

    Returns ``(mixture, loss)``.
    """
    if grid is None:
        grid = GridSpec(record.image.shape[0], pixel_size=1.0)
    if lr is None:
        lr = config.learning_rate
    observed = _centered_observation(record)
    ctf_array = ctf_evaluate(record.ctf, grid)
    loss = _step(mixture, record.pose, ctf_array, observed, grid, config, adam, lr)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss", epoch=-1, step=-1, record_index=record_index)
    return mixture, loss


def train(
    dataset: Dataset,
    config: TrainConfig,
    *,
    n_gaussians: int,
    out_dir: str | None = None,
    initial: GaussianMixture | None = None,
):
    """Optimize a randomly initialized mixture over the dataset.

    Shuffles records each epoch (seeded), runs one Adam step per record, and
    decays the learning rate at every epoch boundary. When ``out_dir`` is
    given, writes one checkpoint per completed epoch
    (``checkpoint_epoch_<e>.cgs``, 0-based) and a plain-text loss trace with
    one line per step: ``epoch step loss lr``.

    Returns ``(mixture, epoch_losses)`` with one float array per epoch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    grid = dataset.grid

    mixture = initial.copy() if initial is not None else init_random(
        n_gaussians, config.seed, grid, mode=config.mode
    )
    adam = AdamState(len(mixture))
    shuffle_rng = np.random.default_rng(config.seed)

    observations = [_centered_observation(r) for r in dataset.records]
    ctf_arrays = [ctf_evaluate(r.ctf, grid) for r in dataset.records]

    trace_lines = []
    epoch_losses = []
    epoch0_median = None
    for epoch in range(config.epochs):
        lr = config.epoch_lr(epoch)
        order = shuffle_rng.permutation(len(dataset))
        losses = np.empty(len(dataset), dtype=np.float64)
        for step, ridx in enumerate(order):
            ridx = int(ridx)
            rec = dataset.records[ridx]
            loss = _step(
                mixture, rec.pose, ctf_arrays[ridx], observations[ridx], grid, config, adam, lr
            )
            if not math.isfinite(loss):
                raise DivergenceError("non-finite loss", epoch=epoch, step=step, record_index=ridx)
            losses[step] = loss
            if epoch0_median is not None:
                reference = epoch0_median
            else:
                reference = float(np.median(losses[: step + 1]))
            if loss > DIVERGENCE_FACTOR * reference:
                raise DivergenceError(
                    f"loss {loss:.6g} exceeded {DIVERGENCE_FACTOR:g} x epoch-0 median {reference:.6g}",
                    epoch=epoch,
                    step=step,
                    record_index=ridx,
                )
            trace_lines.append(f"{epoch} {step} {loss:.17g} {lr:.17g}")
        if epoch == 0:
            epoch0_median = float(np.median(losses))
        epoch_losses.append(losses)
        if out_dir is not None:
            save_checkpoint(mixture, os.path.join(out_dir, f"checkpoint_epoch_{epoch}.cgs"))

    if out_dir is not None:
        with open(os.path.join(out_dir, "loss_trace.txt"), "w") as fh:
            fh.write(f"# seed {config.seed}\n")
            fh.write("# epoch step loss lr\n")
            fh.write("\n".join(trace_lines) + "\n")
    return mixture, epoch_losses


def half_config(config: TrainConfig, which: str) -> TrainConfig:
    """Config for one half of a gold-standard split: seeds differ by +1."""
    if which == "even":
        return config
    if which == "odd":
        return replace(config, seed=config.seed + 1)
    raise ValueError("half must be 'even' or 'odd'")
