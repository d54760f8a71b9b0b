"""Render-throughput benchmark: forward + backward of one image.

One "frame" is the full per-image gradient path of training: rasterize,
apply the CTF, map the loss gradient back through the (self-adjoint) CTF,
and run the rasterizer backward pass. FPS is 1 / median frame time over the
timed repeats; one untimed warmup run absorbs JIT compilation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .gmm import COL_RAW_SCALE, GridSpec, init_random, inverse_activate
from .optics import CtfParams, apply_ctf, ctf_evaluate
from .simulate import sample_pose
from .splat import RenderedImage, rasterize, rasterize_backward


@dataclass
class BenchResult:
    size: int
    n_gaussians: int
    repeats: int
    median_seconds: float

    @property
    def fps(self) -> float:
        return 1.0 / self.median_seconds


def _bench_mixture(n: int, grid: GridSpec, seed: int):
    """Random mixture with footprints of a realistic mid-training size."""
    mixture = init_random(n, seed, grid)
    rng = np.random.default_rng(seed + 1)
    scales = rng.uniform(0.8, 1.6, size=(n, 3)) * grid.pixel_width
    mixture.params[:, COL_RAW_SCALE] = inverse_activate(scales)
    return mixture


def _make_frame(n_gaussians: int, size: int, seed: int):
    grid = GridSpec(size, pixel_size=1.5)
    mixture = _bench_mixture(n_gaussians, grid, seed)
    pose = sample_pose(np.random.default_rng(seed + 2))
    params = CtfParams(defocus_u=15000.0, defocus_v=15000.0)
    d2 = size * size

    def frame():
        # every observed image carries its own defocus: evaluating the CTF
        # is part of the per-image work
        ctf = ctf_evaluate(params, grid)
        rendered = rasterize(mixture, pose, grid)
        model = apply_ctf(rendered, ctf)
        dL_dmodel = (2.0 / d2) * model.pixels
        dL_drendered = apply_ctf(RenderedImage(grid=grid, pixels=dL_dmodel), ctf)
        rasterize_backward(mixture, pose, grid, dL_drendered.pixels)

    return frame


def benchmark_case(n_gaussians: int, size: int, repeats: int, seed: int = 0) -> BenchResult:
    frame = _make_frame(n_gaussians, size, seed)
    frame()  # warmup, excluded from timing
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        frame()
        times.append(time.perf_counter() - start)
    return BenchResult(
        size=size,
        n_gaussians=n_gaussians,
        repeats=repeats,
        median_seconds=float(np.median(times)),
    )


def run_benchmark(n_gaussians_list, sizes, repeats: int, seed: int = 0):
    """All (size, N) combinations; returns a list of BenchResult.

    Timed repeats are interleaved round-robin across the cases so slow drifts
    in machine load bias every case equally rather than one endpoint.
    """
    cases = [(size, n) for size in sizes for n in n_gaussians_list]
    frames = {case: _make_frame(case[1], case[0], seed) for case in cases}
    for frame in frames.values():
        frame()  # warmup, excluded from timing
    times = {case: [] for case in cases}
    for _ in range(repeats):
        for case in cases:
            start = time.perf_counter()
            frames[case]()
            times[case].append(time.perf_counter() - start)
    return [
        BenchResult(
            size=size,
            n_gaussians=n,
            repeats=repeats,
            median_seconds=float(np.median(times[(size, n)])),
        )
        for size, n in cases
    ]


def format_results(results) -> str:
    lines = ["size n_gaussians repeats median_ms fps"]
    for r in results:
        lines.append(
            f"{r.size} {r.n_gaussians} {r.repeats} {1e3 * r.median_seconds:.3f} {r.fps:.3f}"
        )
    return "\n".join(lines) + "\n"
