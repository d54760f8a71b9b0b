"""Command-line interface.

Every run prints its fully resolved configuration (defaults included) as a
JSON line before doing any work; re-running with that configuration and the
same worker setup reproduces the outputs bitwise.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import numpy as np

from . import bench as bench_mod
from . import io as io_mod
from .errors import DataError, DivergenceError
from .evaluate import VoxelVolume, fsc, fsc_table, paired_fsc_report, voxelize
from .gmm import GridSpec, load_checkpoint
from .optics import CtfParams
from .simulate import DefocusRange, NoiseModel, SimSpec, make_phantom, simulate
from .train import TrainConfig, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _print_config(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "config": config}, sort_keys=True))


def _build_parser() -> _Parser:
    parser = _Parser(prog="cryosplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic particle stack")
    p.add_argument("--config", required=True, help="JSON simulation config")
    p.add_argument("--out-dir", default=None, help="output directory (default: config or cwd)")

    p = sub.add_parser("reconstruct", help="optimize a mixture against a particle stack")
    p.add_argument("--stack", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--n-gaussians", type=int, required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--decay-gamma", type=float, default=0.1)
    p.add_argument("--extent", type=float, default=0.5)
    p.add_argument("--isotropic", action="store_true")
    p.add_argument("--half", choices=("even", "odd"), default=None,
                   help="train on one gold-standard half (odd uses seed + 1)")
    p.add_argument("--out-dir", default=".")

    p = sub.add_parser("voxelize", help="sample a checkpoint onto a voxel grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--apix", type=float, required=True)
    p.add_argument("--extent", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fsc", help="Fourier shell correlation between two volumes")
    p.add_argument("--volume-a", required=True)
    p.add_argument("--volume-b", required=True)
    p.add_argument("--out", default=None, help="write the FSC table here")

    p = sub.add_parser("compare-fsc", help="FSC of several volumes against one reference")
    p.add_argument("--reference", required=True)
    p.add_argument("--volumes", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("bench", help="forward+backward render throughput")
    p.add_argument("--n-gaussians", default="2048,3072,5120,10000,30000")
    p.add_argument("--size", default="192,256")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)

    return parser


_SIM_DEFAULTS = {
    "prefix": "particles",
    "seed": 0,
    "num_particles": 100,
    "size": 64,
    "extent": 0.5,
    "pixel_size": 3.0,
    "phantom": {"kind": "helix", "n": 50, "seed": 0},
    "truth_checkpoint": None,
    "ctf": {
        "defocus_min": 10000.0,
        "defocus_max": 25000.0,
        "voltage": 300.0,
        "cs": 2.7,
        "amplitude_contrast": 0.1,
        "phase_shift": 0.0,
        "b_factor": 0.0,
    },
    "translation_range_px": 0.0,
    "integer_translations": False,
    "snr": 0.1,
    "noise_seed": 0,
    "pose_jitter_deg": 0.0,
    "out_dir": ".",
}


def _merge_defaults(defaults: dict, overrides: dict, context: str) -> dict:
    merged = {}
    for key, val in defaults.items():
        if key in overrides and isinstance(val, dict) and isinstance(overrides[key], dict):
            merged[key] = _merge_defaults(val, overrides[key], f"{context}.{key}")
        elif key in overrides:
            merged[key] = overrides[key]
        else:
            merged[key] = val
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise _UsageError(f"unknown {context} config keys: {sorted(unknown)}")
    return merged


def _cmd_simulate(args) -> int:
    with open(args.config) as fh:
        user_cfg = json.load(fh)
    cfg = _merge_defaults(_SIM_DEFAULTS, user_cfg, "simulate")
    if args.out_dir is not None:
        cfg["out_dir"] = args.out_dir
    _print_config("simulate", cfg)

    grid = GridSpec(cfg["size"], cfg["extent"], cfg["pixel_size"])
    if cfg["truth_checkpoint"]:
        truth = load_checkpoint(cfg["truth_checkpoint"])
    else:
        ph = cfg["phantom"]
        truth = make_phantom(ph["kind"], ph["n"], ph.get("seed", 0))
    ctf_cfg = cfg["ctf"]
    template = CtfParams(
        defocus_u=ctf_cfg["defocus_min"],
        defocus_v=ctf_cfg["defocus_min"],
        voltage=ctf_cfg["voltage"],
        spherical_aberration=ctf_cfg["cs"],
        amplitude_contrast=ctf_cfg["amplitude_contrast"],
        phase_shift=ctf_cfg["phase_shift"],
        b_factor=ctf_cfg["b_factor"],
    )
    snr = math.inf if cfg["snr"] in ("inf", None) else float(cfg["snr"])
    spec = SimSpec(
        truth=truth,
        num_particles=cfg["num_particles"],
        grid=grid,
        ctf_distribution=DefocusRange(ctf_cfg["defocus_min"], ctf_cfg["defocus_max"], template),
        noise=NoiseModel(snr=snr, seed=cfg["noise_seed"]),
        translation_range=cfg["translation_range_px"],
        integer_translations=cfg["integer_translations"],
        pose_jitter_deg=cfg["pose_jitter_deg"],
        seed=cfg["seed"],
    )
    result = simulate(spec)
    paths = io_mod.write_simulation(result, cfg["out_dir"], cfg["prefix"], truth)
    print(f"stack: {paths[0]}")
    print(f"meta: {paths[1]}")
    print(f"truth: {paths[2]}")
    print(f"noise_sigma: {result.noise_sigma:.8g}")
    return 0


def _cmd_reconstruct(args) -> int:
    seed = args.seed + (1 if args.half == "odd" else 0)
    config = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        decay_gamma=args.decay_gamma,
        seed=seed,
        mode="isotropic" if args.isotropic else "anisotropic",
    )
    resolved = {
        "stack": args.stack,
        "meta": args.meta,
        "n_gaussians": args.n_gaussians,
        "epochs": args.epochs,
        "seed": seed,
        "lr": args.lr,
        "decay_gamma": args.decay_gamma,
        "extent": args.extent,
        "mode": config.mode,
        "half": args.half,
        "out_dir": args.out_dir,
        "adam": [config.adam_beta1, config.adam_beta2, config.adam_epsilon],
        "batch_size": config.batch_size,
    }
    _print_config("reconstruct", resolved)

    dataset = io_mod.load_dataset(args.stack, args.meta, extent=args.extent)
    if args.half is not None:
        dataset = dataset.half(args.half)
        print(f"half {args.half}: {len(dataset)} records")
    os.makedirs(args.out_dir, exist_ok=True)
    mixture, epoch_losses = train(
        dataset, config, n_gaussians=args.n_gaussians, out_dir=args.out_dir
    )
    for e, losses in enumerate(epoch_losses):
        print(f"epoch {e}: lr {config.epoch_lr(e):.3e} mean loss {losses.mean():.8g}")
    print(f"final checkpoint: {os.path.join(args.out_dir, f'checkpoint_epoch_{config.epochs - 1}.cgs')}")
    return 0


def _cmd_voxelize(args) -> int:
    _print_config("voxelize", {
        "checkpoint": args.checkpoint, "size": args.size, "apix": args.apix,
        "extent": args.extent, "out": args.out,
    })
    mixture = load_checkpoint(args.checkpoint)
    grid = GridSpec(args.size, args.extent, args.apix)
    volume = voxelize(mixture, grid)
    io_mod.write_mrc(args.out, volume.voxels.astype(np.float32), args.apix, volume=True)
    print(f"volume: {args.out}")
    return 0


def _load_volume(path) -> VoxelVolume:
    data, apix = io_mod.read_mrc(path)
    if data.shape[0] != data.shape[1]:
        raise DataError(f"{path} is not a cubic volume")
    grid = GridSpec(data.shape[0], 0.5, apix)
    return VoxelVolume(grid=grid, voxels=data.astype(np.float64))


def _cmd_fsc(args) -> int:
    _print_config("fsc", {"volume_a": args.volume_a, "volume_b": args.volume_b, "out": args.out})
    va = _load_volume(args.volume_a)
    vb = _load_volume(args.volume_b)
    if va.grid.size != vb.grid.size or va.grid.pixel_size != vb.grid.pixel_size:
        raise DataError("volumes have mismatched grids")
    curve = fsc(va, vb)
    table = fsc_table(curve)
    print(table, end="")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    return 0


def _cmd_compare_fsc(args) -> int:
    if len(args.volumes) != len(args.labels):
        raise _UsageError("--volumes and --labels must have the same length")
    _print_config("compare-fsc", {
        "reference": args.reference, "volumes": args.volumes,
        "labels": args.labels, "out": args.out,
    })
    ref = _load_volume(args.reference)
    curves = {}
    for label, path in zip(args.labels, args.volumes):
        curves[label] = fsc(_load_volume(path), ref)
    report = paired_fsc_report(curves)
    print(report, end="")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report)
    return 0


def _cmd_bench(args) -> int:
    try:
        ns = [int(x) for x in args.n_gaussians.split(",") if x]
        sizes = [int(x) for x in args.size.split(",") if x]
    except ValueError as exc:
        raise _UsageError(f"bad --n-gaussians/--size list: {exc}") from exc
    if not ns or not sizes or args.repeats < 1:
        raise _UsageError("bench needs non-empty size/count lists and repeats >= 1")
    _print_config("bench", {
        "n_gaussians": ns, "size": sizes, "repeats": args.repeats,
        "seed": args.seed, "workers": 1,
    })
    results = bench_mod.run_benchmark(ns, sizes, args.repeats, args.seed)
    print(bench_mod.format_results(results), end="")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "reconstruct": _cmd_reconstruct,
    "voxelize": _cmd_voxelize,
    "fsc": _cmd_fsc,
    "compare-fsc": _cmd_compare_fsc,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return 0 if exc.code in (0, None) else 1
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
