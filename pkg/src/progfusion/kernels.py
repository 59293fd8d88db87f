"""Loop-heavy kernels, each in a numba and a pure-numpy variant.

Public names (``gather_patches``, ``scatter_patches``, ``piecewise_map``,
``auc_pair_count``) dispatch according to :mod:`progfusion.backend`. Both
variants of every kernel stay importable so tests and the benchmark can
compare them directly.

Patch layout convention: a volume is (C, D, H, W); a patch row flattens the
cubic block with spatial offsets row-major and channels innermost, i.e.
element order (dz, dy, dx, c). Rows are emitted in lexicographic block
order (bz, by, bx).
"""

from __future__ import annotations

import numpy as np

from .backend import HAVE_NUMBA, USE_NUMBA

if HAVE_NUMBA:
    from numba import njit


# ---------------------------------------------------------------- patches

def gather_patches_numpy(vol: np.ndarray, p: int) -> np.ndarray:
    c, d, h, w = vol.shape
    nz, ny, nx = d // p, h // p, w // p
    blocks = vol.reshape(c, nz, p, ny, p, nx, p)
    # -> (bz, by, bx, dz, dy, dx, c)
    rows = blocks.transpose(1, 3, 5, 2, 4, 6, 0)
    return np.ascontiguousarray(rows.reshape(nz * ny * nx, p * p * p * c))


def scatter_patches_numpy(rows: np.ndarray, c: int, d: int, h: int, w: int, p: int) -> np.ndarray:
    nz, ny, nx = d // p, h // p, w // p
    blocks = rows.reshape(nz, ny, nx, p, p, p, c)
    vol = blocks.transpose(6, 0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(vol.reshape(c, d, h, w))


if HAVE_NUMBA:

    @njit(cache=True)
    def gather_patches_numba(vol, p):
        c, d, h, w = vol.shape
        nz, ny, nx = d // p, h // p, w // p
        out = np.empty((nz * ny * nx, p * p * p * c), dtype=vol.dtype)
        for bz in range(nz):
            for by in range(ny):
                for bx in range(nx):
                    row = (bz * ny + by) * nx + bx
                    i = 0
                    for dz in range(p):
                        for dy in range(p):
                            for dx in range(p):
                                for ch in range(c):
                                    out[row, i] = vol[ch, bz * p + dz, by * p + dy, bx * p + dx]
                                    i += 1
        return out

    @njit(cache=True)
    def scatter_patches_numba(rows, c, d, h, w, p):
        nz, ny, nx = d // p, h // p, w // p
        out = np.empty((c, d, h, w), dtype=rows.dtype)
        for bz in range(nz):
            for by in range(ny):
                for bx in range(nx):
                    row = (bz * ny + by) * nx + bx
                    i = 0
                    for dz in range(p):
                        for dy in range(p):
                            for dx in range(p):
                                for ch in range(c):
                                    out[ch, bz * p + dz, by * p + dy, bx * p + dx] = rows[row, i]
                                    i += 1
        return out


# ------------------------------------------------------- piecewise linear

def piecewise_map_numpy(values: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.interp(values, src, dst)


if HAVE_NUMBA:

    @njit(cache=True)
    def piecewise_map_numba(values, src, dst):
        n = src.shape[0]
        out = np.empty_like(values)
        for i in range(values.shape[0]):
            x = values[i]
            if x <= src[0]:
                out[i] = dst[0]
            elif x >= src[n - 1]:
                out[i] = dst[n - 1]
            else:
                j = np.searchsorted(src, x)
                if src[j] == x:
                    out[i] = dst[j]
                else:
                    x0, x1 = src[j - 1], src[j]
                    y0, y1 = dst[j - 1], dst[j]
                    out[i] = y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        return out


# --------------------------------------------------------- pairwise AUC

def auc_pair_count_numpy(pos: np.ndarray, neg: np.ndarray) -> tuple[int, int]:
    greater = 0
    ties = 0
    # chunk the positives so the broadcast stays small at n = 1e4
    step = 256
    for start in range(0, pos.shape[0], step):
        block = pos[start : start + step, None]
        greater += int(np.count_nonzero(block > neg[None, :]))
        ties += int(np.count_nonzero(block == neg[None, :]))
    return greater, ties


if HAVE_NUMBA:

    @njit(cache=True)
    def auc_pair_count_numba(pos, neg):
        greater = 0
        ties = 0
        for i in range(pos.shape[0]):
            s = pos[i]
            for j in range(neg.shape[0]):
                if s > neg[j]:
                    greater += 1
                elif s == neg[j]:
                    ties += 1
        return greater, ties


# ------------------------------------------------------------- dispatch

if USE_NUMBA:
    gather_patches = gather_patches_numba
    scatter_patches = scatter_patches_numba
    piecewise_map = piecewise_map_numba
    auc_pair_count = auc_pair_count_numba
else:
    gather_patches = gather_patches_numpy
    scatter_patches = scatter_patches_numpy
    piecewise_map = piecewise_map_numpy
    auc_pair_count = auc_pair_count_numpy
