"""Numba pixel/voxel loops behind the rasterizer and the voxelizer.

All kernels are single-threaded and accumulate in float64; results are
bitwise reproducible. Per-pixel accumulation order is ascending Gaussian
index regardless of tile size, because each Gaussian is evaluated only on
the intersection of its own bounding box with the tile.

Gaussians are truncated on the ellipse q = d^T P d < cutoff_sq and the
(constant) boundary value ``sub = exp(-cutoff_sq / 2)`` is subtracted, so
the rendered footprint goes continuously to zero at the cutoff.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def build_tile_work(bbox, tile_size, n_tiles_x, n_tiles_y):
    """Tile-major work list via a counting scatter, O(items).

    Returns (gauss_ids, tile_starts): within each tile, Gaussian indices
    appear in ascending order, which fixes the per-pixel accumulation order
    independently of the tile size.
    """
    N = bbox.shape[0]
    n_tiles = n_tiles_x * n_tiles_y
    counts = np.zeros(n_tiles + 1, np.int64)
    for g in range(N):
        x0 = bbox[g, 0]
        x1 = bbox[g, 1]
        y0 = bbox[g, 2]
        y1 = bbox[g, 3]
        if x0 > x1 or y0 > y1:
            continue
        ty0 = y0 // tile_size
        ty1 = y1 // tile_size
        tx0 = x0 // tile_size
        tx1 = x1 // tile_size
        for ty in range(ty0, ty1 + 1):
            base = ty * n_tiles_x + 1
            for tx in range(tx0, tx1 + 1):
                counts[base + tx] += 1
    tile_starts = np.cumsum(counts)
    cursor = tile_starts[:-1].copy()
    gauss_ids = np.empty(tile_starts[-1], np.int64)
    for g in range(N):
        x0 = bbox[g, 0]
        x1 = bbox[g, 1]
        y0 = bbox[g, 2]
        y1 = bbox[g, 3]
        if x0 > x1 or y0 > y1:
            continue
        ty0 = y0 // tile_size
        ty1 = y1 // tile_size
        tx0 = x0 // tile_size
        tx1 = x1 // tile_size
        for ty in range(ty0, ty1 + 1):
            base = ty * n_tiles_x
            for tx in range(tx0, tx1 + 1):
                tid = base + tx
                gauss_ids[cursor[tid]] = g
                cursor[tid] += 1
    return gauss_ids, tile_starts


@njit(cache=True)
def forward_tiles(
    pixels,       # (D, D) float64 output, pre-zeroed
    gauss_ids,    # (W,) int64, tile-major then ascending-gaussian work list
    tile_starts,  # (T+1,) int64 work-range bounds per tile
    n_tiles_x,    # int
    tile_size,    # int
    mean2,        # (N, 2) float64
    prec,         # (N, 3) float64: p00, p01, p11 of the 2x2 precision
    weight,       # (N,) float64: amplitude * normalization
    bbox,         # (N, 4) int64: x0, x1, y0, y1 inclusive, clipped
    h,            # pixel width, normalized units
    c0,           # origin pixel index
    cutoff_sq,    # squared cull radius in sigma units
    sub,          # boundary value subtracted from exp(-q/2)
):
    D = pixels.shape[0]
    n_tiles = tile_starts.shape[0] - 1
    for tid in range(n_tiles):
        lo = tile_starts[tid]
        hi = tile_starts[tid + 1]
        if lo == hi:
            continue
        ty = tid // n_tiles_x
        tx = tid % n_tiles_x
        py0 = ty * tile_size
        py1 = min(py0 + tile_size, D) - 1
        px0 = tx * tile_size
        px1 = min(px0 + tile_size, D) - 1
        for w in range(lo, hi):
            g = gauss_ids[w]
            x0 = max(bbox[g, 0], px0)
            x1 = min(bbox[g, 1], px1)
            y0 = max(bbox[g, 2], py0)
            y1 = min(bbox[g, 3], py1)
            if x0 > x1 or y0 > y1:
                continue
            p00 = prec[g, 0]
            p01 = prec[g, 1]
            p11 = prec[g, 2]
            mx = mean2[g, 0]
            my = mean2[g, 1]
            wgt = weight[g]
            mpx = mx / h + c0
            for iy in range(y0, y1 + 1):
                dy = (iy - c0) * h - my
                # columns possibly inside the cutoff ellipse on this row,
                # padded one pixel so the q test below stays decisive
                bh = p01 * dy
                disc = bh * bh - p00 * (p11 * dy * dy - cutoff_sq)
                if disc <= 0.0:
                    continue
                root = np.sqrt(disc)
                xa = max(x0, int(np.ceil((-bh - root) / (p00 * h) + mpx)) - 1)
                xb = min(x1, int(np.floor((-bh + root) / (p00 * h) + mpx)) + 1)
                for ix in range(xa, xb + 1):
                    dx = (ix - c0) * h - mx
                    q = p00 * dx * dx + 2.0 * p01 * dx * dy + p11 * dy * dy
                    if q < cutoff_sq:
                        pixels[iy, ix] += wgt * (np.exp(-0.5 * q) - sub)


@njit(cache=True)
def backward_pixels(
    grad_pixels,  # (D, D) float64 upstream gradient
    mean2,
    prec,
    bbox,
    h,
    c0,
    cutoff_sq,
    sub,
    out,          # (N, 6) float64: raw sums sA, sx, sy, s00, s01, s11
):
    N = mean2.shape[0]
    for g in range(N):
        x0 = bbox[g, 0]
        x1 = bbox[g, 1]
        y0 = bbox[g, 2]
        y1 = bbox[g, 3]
        if x0 > x1 or y0 > y1:
            continue
        p00 = prec[g, 0]
        p01 = prec[g, 1]
        p11 = prec[g, 2]
        mx = mean2[g, 0]
        my = mean2[g, 1]
        mpx = mx / h + c0
        sA = 0.0
        sx = 0.0
        sy = 0.0
        s00 = 0.0
        s01 = 0.0
        s11 = 0.0
        for iy in range(y0, y1 + 1):
            dy = (iy - c0) * h - my
            bh = p01 * dy
            disc = bh * bh - p00 * (p11 * dy * dy - cutoff_sq)
            if disc <= 0.0:
                continue
            root = np.sqrt(disc)
            xa = max(x0, int(np.ceil((-bh - root) / (p00 * h) + mpx)) - 1)
            xb = min(x1, int(np.floor((-bh + root) / (p00 * h) + mpx)) + 1)
            for ix in range(xa, xb + 1):
                dx = (ix - c0) * h - mx
                q = p00 * dx * dx + 2.0 * p01 * dx * dy + p11 * dy * dy
                if q >= cutoff_sq:
                    continue
                gp = grad_pixels[iy, ix]
                e = np.exp(-0.5 * q)
                v = e - sub
                pdx = p00 * dx + p01 * dy
                pdy = p01 * dx + p11 * dy
                sA += gp * v
                sx += gp * e * pdx
                sy += gp * e * pdy
                s00 += gp * (0.5 * e * pdx * pdx - 0.5 * v * p00)
                s01 += gp * (0.5 * e * pdx * pdy - 0.5 * v * p01)
                s11 += gp * (0.5 * e * pdy * pdy - 0.5 * v * p11)
        out[g, 0] = sA
        out[g, 1] = sx
        out[g, 2] = sy
        out[g, 3] = s00
        out[g, 4] = s01
        out[g, 5] = s11


@njit(cache=True)
def voxelize_gaussians(
    voxels,    # (D, D, D) float64 output [z, y, x], pre-zeroed
    mean3,     # (N, 3) float64
    prec6,     # (N, 6) float64: p00, p01, p02, p11, p12, p22
    weight,    # (N,) float64: amplitude * 3D normalization
    bbox,      # (N, 6) int64: x0, x1, y0, y1, z0, z1 inclusive, clipped
    h,
    c0,
    cutoff_sq,
    sub,
):
    N = mean3.shape[0]
    for g in range(N):
        x0 = bbox[g, 0]
        x1 = bbox[g, 1]
        y0 = bbox[g, 2]
        y1 = bbox[g, 3]
        z0 = bbox[g, 4]
        z1 = bbox[g, 5]
        if x0 > x1 or y0 > y1 or z0 > z1:
            continue
        p00 = prec6[g, 0]
        p01 = prec6[g, 1]
        p02 = prec6[g, 2]
        p11 = prec6[g, 3]
        p12 = prec6[g, 4]
        p22 = prec6[g, 5]
        mx = mean3[g, 0]
        my = mean3[g, 1]
        mz = mean3[g, 2]
        wgt = weight[g]
        for iz in range(z0, z1 + 1):
            dz = (iz - c0) * h - mz
            for iy in range(y0, y1 + 1):
                dy = (iy - c0) * h - my
                qyz = p11 * dy * dy + 2.0 * p12 * dy * dz + p22 * dz * dz
                bx = 2.0 * (p01 * dy + p02 * dz)
                for ix in range(x0, x1 + 1):
                    dx = (ix - c0) * h - mx
                    q = p00 * dx * dx + bx * dx + qyz
                    if q < cutoff_sq:
                        voxels[iz, iy, ix] += wgt * (np.exp(-0.5 * q) - sub)
