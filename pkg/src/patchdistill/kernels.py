"""Hot numeric kernels with a numba path and a pure-numpy path.

Every kernel exists twice: an explicit-loop version compiled with numba and a
vectorised numpy version. The public names at the bottom of the module bind
to one or the other according to :mod:`patchdistill._accel`. Both variants are
importable directly (``*_numba`` / ``*_numpy``) so tests and the benchmark can
compare them.
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

HIST_SIZE = 256


# --------------------------------------------------------------------------
# CLAHE: per-tile clipped-histogram lookup tables
# --------------------------------------------------------------------------


@njit
def clahe_luts_numba(padded, tiles_y, tiles_x, clip_count):
    tile_h = padded.shape[0] // tiles_y
    tile_w = padded.shape[1] // tiles_x
    area = tile_h * tile_w
    lut_scale = np.float32(HIST_SIZE - 1) / np.float32(area)
    luts = np.empty((tiles_y, tiles_x, HIST_SIZE), dtype=np.uint8)
    hist = np.empty(HIST_SIZE, dtype=np.int64)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            hist[:] = 0
            for y in range(ty * tile_h, (ty + 1) * tile_h):
                for x in range(tx * tile_w, (tx + 1) * tile_w):
                    hist[padded[y, x]] += 1
            if clip_count > 0:
                clipped = 0
                for i in range(HIST_SIZE):
                    if hist[i] > clip_count:
                        clipped += hist[i] - clip_count
                        hist[i] = clip_count
                batch = clipped // HIST_SIZE
                residual = clipped - batch * HIST_SIZE
                for i in range(HIST_SIZE):
                    hist[i] += batch
                if residual != 0:
                    step = max(HIST_SIZE // residual, 1)
                    i = 0
                    while i < HIST_SIZE and residual > 0:
                        hist[i] += 1
                        i += step
                        residual -= 1
            total = 0
            for i in range(HIST_SIZE):
                total += hist[i]
                v = np.rint(np.float32(total) * lut_scale)
                if v > 255.0:
                    v = 255.0
                luts[ty, tx, i] = np.uint8(v)
    return luts


def clahe_luts_numpy(padded, tiles_y, tiles_x, clip_count):
    tile_h = padded.shape[0] // tiles_y
    tile_w = padded.shape[1] // tiles_x
    area = tile_h * tile_w
    blocks = padded.reshape(tiles_y, tile_h, tiles_x, tile_w).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(tiles_y * tiles_x, area).astype(np.int64)
    offsets = np.arange(tiles_y * tiles_x, dtype=np.int64)[:, None] * HIST_SIZE
    hist = np.bincount((blocks + offsets).ravel(), minlength=tiles_y * tiles_x * HIST_SIZE)
    hist = hist.reshape(tiles_y * tiles_x, HIST_SIZE)
    if clip_count > 0:
        clipped = np.maximum(hist - clip_count, 0).sum(axis=1)
        hist = np.minimum(hist, clip_count)
        batch = clipped // HIST_SIZE
        residual = clipped - batch * HIST_SIZE
        hist = hist + batch[:, None]
        bins = np.arange(HIST_SIZE)
        for row in np.flatnonzero(residual):
            step = max(HIST_SIZE // int(residual[row]), 1)
            hit = bins[::step][: int(residual[row])]
            hist[row, hit] += 1
    lut_scale = np.float32(HIST_SIZE - 1) / np.float32(area)
    cdf = np.cumsum(hist, axis=1).astype(np.float32)
    luts = np.minimum(np.rint(cdf * lut_scale), 255).astype(np.uint8)
    return luts.reshape(tiles_y, tiles_x, HIST_SIZE)


# --------------------------------------------------------------------------
# CLAHE: bilinear blend of the four neighbouring tile mappings
# --------------------------------------------------------------------------


@njit
def clahe_interpolate_numba(image, luts, tile_h, tile_w):
    h, w = image.shape
    tiles_y, tiles_x = luts.shape[0], luts.shape[1]
    inv_tw = np.float32(1.0) / np.float32(tile_w)
    inv_th = np.float32(1.0) / np.float32(tile_h)
    half = np.float32(0.5)
    one = np.float32(1.0)
    out = np.empty((h, w), dtype=np.uint8)
    for y in range(h):
        tyf = np.float32(y) * inv_th - half
        ty1 = int(np.floor(tyf))
        ya = tyf - np.float32(ty1)
        ya1 = one - ya
        ty2 = min(ty1 + 1, tiles_y - 1)
        ty1 = max(ty1, 0)
        for x in range(w):
            txf = np.float32(x) * inv_tw - half
            tx1 = int(np.floor(txf))
            xa = txf - np.float32(tx1)
            xa1 = one - xa
            tx2 = min(tx1 + 1, tiles_x - 1)
            tx1 = max(tx1, 0)
            v = image[y, x]
            top = np.float32(luts[ty1, tx1, v]) * xa1 + np.float32(luts[ty1, tx2, v]) * xa
            bot = np.float32(luts[ty2, tx1, v]) * xa1 + np.float32(luts[ty2, tx2, v]) * xa
            res = np.rint(top * ya1 + bot * ya)
            if res < 0.0:
                res = 0.0
            elif res > 255.0:
                res = 255.0
            out[y, x] = np.uint8(res)
    return out


def _axis_weights(n, tile, tiles):
    f = np.arange(n, dtype=np.float32) * (np.float32(1.0) / np.float32(tile)) - np.float32(0.5)
    lo = np.floor(f).astype(np.int64)
    frac = (f - lo.astype(np.float32)).astype(np.float32)
    hi = np.minimum(lo + 1, tiles - 1)
    lo = np.maximum(lo, 0)
    return lo, hi, frac, (np.float32(1.0) - frac).astype(np.float32)


def clahe_interpolate_numpy(image, luts, tile_h, tile_w):
    h, w = image.shape
    tiles_y, tiles_x = luts.shape[:2]
    ty1, ty2, ya, ya1 = _axis_weights(h, tile_h, tiles_y)
    tx1, tx2, xa, xa1 = _axis_weights(w, tile_w, tiles_x)
    v = image.astype(np.int64)
    Y1, Y2 = ty1[:, None], ty2[:, None]
    X1, X2 = tx1[None, :], tx2[None, :]
    l11 = luts[Y1, X1, v].astype(np.float32)
    l12 = luts[Y1, X2, v].astype(np.float32)
    l21 = luts[Y2, X1, v].astype(np.float32)
    l22 = luts[Y2, X2, v].astype(np.float32)
    top = l11 * xa1[None, :] + l12 * xa[None, :]
    bot = l21 * xa1[None, :] + l22 * xa[None, :]
    res = np.rint(top * ya1[:, None] + bot * ya[:, None])
    return np.clip(res, 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# Midranks (1-based, ties share the average rank)
# --------------------------------------------------------------------------


@njit
def midranks_numba(values):
    # Tie order is irrelevant here (ties share the average rank), so the
    # faster unstable sort is fine. The sort dominates; expect parity with numpy.
    n = values.shape[0]
    order = np.argsort(values)
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def midranks_numpy(values):
    values = np.asarray(values)
    n = values.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], n] - 1
    avg = 0.5 * (starts + ends) + 1.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts + 1)
    return ranks


# --------------------------------------------------------------------------
# Rank-aware relabeling: score above a global cut OR in the per-row top-k
# --------------------------------------------------------------------------


@njit
def irat_labels_numba(scores, s_prev, k):
    n, m = scores.shape
    out = np.zeros((n, m), dtype=np.uint8)
    for i in range(n):
        for t in range(m):
            g = scores[i, t]
            if g > s_prev:
                out[i, t] = 1
                continue
            ahead = 0
            for u in range(m):
                h = scores[i, u]
                if h > g or (h == g and u < t):
                    ahead += 1
            if ahead < k:
                out[i, t] = 1
    return out


def irat_labels_numpy(scores, s_prev, k):
    scores = np.asarray(scores, dtype=np.float64)
    n, m = scores.shape
    order = np.argsort(-scores, axis=1, kind="stable")
    top = np.zeros((n, m), dtype=bool)
    np.put_along_axis(top, order[:, :k], True, axis=1)
    return ((scores > s_prev) | top).astype(np.uint8)


if USE_NUMBA:
    clahe_luts = clahe_luts_numba
    clahe_interpolate = clahe_interpolate_numba
    midranks = midranks_numba
    irat_labels = irat_labels_numba
else:
    clahe_luts = clahe_luts_numpy
    clahe_interpolate = clahe_interpolate_numpy
    midranks = midranks_numpy
    irat_labels = irat_labels_numpy
