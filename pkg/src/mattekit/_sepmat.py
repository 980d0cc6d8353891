"""Separable row/column operator matrices for spatial transforms.

Every spatial resampling used here (bilinear resize, binomial blur with
reflect-101 borders, 2x decimation, 2x expansion, block averaging) can be
written as ``rows @ plane @ cols.T`` with small dense matrices. Building each
matrix once fixes the reduction order, so 32-bit results are bit-reproducible
run to run, and the autodiff backward pass is simply the transposed product.

Matrices are built in float64 and cached; callers cast to their working dtype.
"""

from functools import lru_cache

import numpy as np

# 5-tap binomial kernel used for pyramid filtering.
BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def reflect101_index(i: int, n: int) -> int:
    """Map an out-of-range index into [0, n) by reflection about the edges
    without repeating the border sample (OpenCV's BORDER_REFLECT_101)."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    m = i % period
    if m < 0:
        m += period
    return period - m if m >= n else m


@lru_cache(maxsize=None)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix with half-pixel centers and edge
    clamping: source coordinate of output j is (j + 0.5) * n_in/n_out - 0.5."""
    m = np.zeros((n_out, n_in))
    for j in range(n_out):
        c = (j + 0.5) * (n_in / n_out) - 0.5
        c = min(max(c, 0.0), n_in - 1.0)
        i0 = int(np.floor(c))
        i1 = min(i0 + 1, n_in - 1)
        w = c - i0
        m[j, i0] += 1.0 - w
        m[j, i1] += w
    return m


@lru_cache(maxsize=None)
def blur5_matrix(n: int) -> np.ndarray:
    """(n, n) binomial 5-tap blur with reflect-101 border handling."""
    m = np.zeros((n, n))
    for i in range(n):
        for t in range(5):
            m[i, reflect101_index(i - 2 + t, n)] += BINOMIAL5[t]
    return m


@lru_cache(maxsize=None)
def subsample2_matrix(n: int) -> np.ndarray:
    """(ceil(n/2), n) matrix keeping the even-index samples."""
    n_out = (n + 1) // 2
    m = np.zeros((n_out, n))
    for j in range(n_out):
        m[j, 2 * j] = 1.0
    return m


@lru_cache(maxsize=None)
def reduce2_matrix(n: int) -> np.ndarray:
    """Blur then decimate: one pyramid analysis step along an axis."""
    return subsample2_matrix(n) @ blur5_matrix(n)


@lru_cache(maxsize=None)
def expand2_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) pyramid expansion: zero-interleave to n_out samples then
    blur with the doubled binomial kernel so constants are preserved."""
    if not n_in <= n_out <= 2 * n_in:
        raise ValueError(f"cannot expand {n_in} samples to {n_out}")
    interleave = np.zeros((n_out, n_in))
    for i in range(n_in):
        if 2 * i < n_out:
            interleave[2 * i, i] = 1.0
    return (2.0 * blur5_matrix(n_out)) @ interleave


@lru_cache(maxsize=None)
def area_matrix(n: int, factor: int) -> np.ndarray:
    """(n // factor, n) block-mean matrix. n must be divisible by factor."""
    if n % factor != 0:
        raise ValueError(f"extent {n} not divisible by factor {factor}")
    m = np.zeros((n // factor, n))
    for j in range(n // factor):
        m[j, j * factor:(j + 1) * factor] = 1.0 / factor
    return m
