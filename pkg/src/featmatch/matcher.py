"""Masked Pearson patch matching between decoded main and side features.

The main map is cut into non-overlapping B x B patches, the side map into
densely strided (stride 1) windows of the same size. For every pair the
Pearson correlation over the flattened B*B*C values is multiplied by a
Gaussian distance prior, and the best side window per main patch is kept.
The expensive inner products are computed by sliding each main patch over
the side map (batched as matrix products); window means and variances come
from integral images. The resulting field, computed once on the finest
feature level, is reused on coarser levels through the 2^(h-1) index rule.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, GeometryError
from .tensor import FeaturePyramid, make_patch_grid, require_feature_map

VARIANCE_EPS = 1e-12

# side-window rows per inner-product chunk, sized against a float64 budget
_CHUNK_ELEMENTS = 8_000_000


def pearson(patch_a: np.ndarray, patch_b: np.ndarray) -> float:
    """Pearson correlation of two equally shaped patches, flattened.

    Channels are part of the flattened vector. If either patch has
    variance below 1e-12 the score is defined as 0 (uncorrelated, never
    NaN). The result is clipped to [-1, 1].
    """
    a = np.asarray(patch_a, dtype=np.float64).ravel()
    b = np.asarray(patch_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise GeometryError(f"patch shapes differ: {patch_a.shape} vs {patch_b.shape}")
    ca = a - a.mean()
    cb = b - b.mean()
    var_a = np.dot(ca, ca) / a.size
    var_b = np.dot(cb, cb) / b.size
    if var_a < VARIANCE_EPS or var_b < VARIANCE_EPS:
        return 0.0
    r = np.dot(ca, cb) / (a.size * math.sqrt(var_a * var_b))
    return float(np.clip(r, -1.0, 1.0))


def gaussian_mask_tables(n_i: int, n_j: int, n_k: int, n_l: int, patch: int, sigma: float):
    """Separable Gaussian prior factors.

    Main patch (i, j) sits at position (i*B, j*B); side window (k, l) at
    (k, l), all in the matched layer's index units. Returns (col_table,
    row_table) with col_table[i, k] = exp(-(i*B - k)^2 / (2 sigma^2)) and
    row_table[j, l] analogous, so mask = row_table[j, l] * col_table[i, k].
    """
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    cols = np.arange(n_i, dtype=np.float64)[:, None] * patch - np.arange(n_k, dtype=np.float64)
    rows = np.arange(n_j, dtype=np.float64)[:, None] * patch - np.arange(n_l, dtype=np.float64)
    denom = 2.0 * sigma * sigma
    return np.exp(-(cols**2) / denom), np.exp(-(rows**2) / denom)


@dataclass(frozen=True)
class CorrelationField:
    """Masked correlation of every main patch against every side window.

    ``scores[j, i, l, k]`` is the masked Pearson value of main patch
    (i, j) against side window (k, l), stored as float32 (computed in
    float64, rounded once). ``best_k``/``best_l`` hold the argmax per main
    patch with the fixed tie-break: first hit scanning l, then k.
    """

    patch: int
    sigma: float
    map_shape: tuple
    scores: np.ndarray  # (n_j, n_i, n_l, n_k) float32
    best_k: np.ndarray  # (n_j, n_i) int64
    best_l: np.ndarray  # (n_j, n_i) int64

    @property
    def n_i(self) -> int:
        return self.scores.shape[1]

    @property
    def n_j(self) -> int:
        return self.scores.shape[0]

    @property
    def n_k(self) -> int:
        return self.scores.shape[3]

    @property
    def n_l(self) -> int:
        return self.scores.shape[2]

    @property
    def nbytes(self) -> int:
        return self.scores.nbytes + self.best_k.nbytes + self.best_l.nbytes

    def mask_nbytes(self) -> int:
        """Bytes of the float64 mask materialized while building the field."""
        return self.scores.size * 8


def _argmax_first_hit(scores: np.ndarray):
    n_j, n_i, n_l, n_k = scores.shape
    flat = scores.reshape(n_j, n_i, n_l * n_k).argmax(axis=2)
    return (flat % n_k).astype(np.int64), (flat // n_k).astype(np.int64)


def correlation_field(
    main: np.ndarray,
    side: np.ndarray,
    patch: int,
    sigma: float,
    workers: int = 1,
    timings: dict | None = None,
) -> CorrelationField:
    """Masked Pearson field between a main map and a same-sized side map.

    The main map dims must be divisible by ``patch``. ``workers`` > 1
    splits the side-window rows across threads; outputs are bit-identical
    for any worker count because each chunk writes a disjoint block.
    ``timings``, if given, receives wall-time entries for the mask and the
    correlation proper.
    """
    main = require_feature_map(main, "main features")
    side = require_feature_map(side, "side features")
    if main.shape != side.shape:
        raise GeometryError(f"main {main.shape} and side {side.shape} shapes differ")
    h, w, c = main.shape
    if h % patch or w % patch:
        raise GeometryError(f"map dims ({h}, {w}) not divisible by patch size {patch}")
    main_grid = make_patch_grid(h, w, patch, patch)
    side_grid = make_patch_grid(h, w, patch, 1)
    n_i, n_j = main_grid.i_max + 1, main_grid.j_max + 1
    n_k, n_l = side_grid.i_max + 1, side_grid.j_max + 1
    n = patch * patch * c

    t0 = time.perf_counter()
    col_mask, row_mask = gaussian_mask_tables(n_i, n_j, n_k, n_l, patch, sigma)
    mask = row_mask[None, :, :, None] * col_mask[:, None, None, :]  # (i, j, l, k)
    mask = np.ascontiguousarray(np.swapaxes(mask, 0, 1))  # (j, i, l, k)
    t_mask = time.perf_counter() - t0

    t0 = time.perf_counter()
    # main patch statistics, flattened in (channel, row, col) order to match
    # the side-window views below
    patches = main.astype(np.float64).reshape(n_j, patch, n_i, patch, c)
    patches = patches.transpose(0, 2, 4, 1, 3).reshape(n_j * n_i, c, patch, patch)
    pmat = np.ascontiguousarray(patches.reshape(n_j * n_i, n))
    p_centered = pmat - pmat.mean(axis=1)[:, None]
    p_sumsq = np.einsum("ij,ij->i", p_centered, p_centered)
    p_live = p_sumsq >= VARIANCE_EPS * n  # variance >= eps

    # per-window sums and sums of squares via integral images
    side64 = side.astype(np.float64)
    w_sum = _window_sums(side64.sum(axis=2), patch)
    w_sumsq_raw = _window_sums((side64 * side64).sum(axis=2), patch)
    w_sumsq = np.maximum(w_sumsq_raw - w_sum * w_sum / n, 0.0)
    w_live = w_sumsq >= VARIANCE_EPS * n

    denom = np.sqrt(p_sumsq)[:, None, None] * np.sqrt(w_sumsq)[None, :, :]
    live = p_live[:, None, None] & w_live[None, :, :]
    denom[~live] = 1.0  # avoid 0/0; dead pairs are zeroed below

    windows = sliding_window_view(side64, (patch, patch), axis=(0, 1))
    # windows: (n_l, n_k, c, patch, patch) strided view
    scores = np.empty((n_j, n_i, n_l, n_k), dtype=np.float32)

    def fill_rows(l0: int, l1: int) -> None:
        block = np.ascontiguousarray(windows[l0:l1]).reshape((l1 - l0) * n_k, n)
        # sum((a - mean_a) * b) == sum((a - mean_a) * (b - mean_b)), so
        # centering the main patches alone yields the covariance
        cov = p_centered @ block.T  # (P, rows*n_k)
        r = cov / denom[:, l0:l1].reshape(len(pmat), -1)
        np.clip(r, -1.0, 1.0, out=r)
        r[~live[:, l0:l1].reshape(len(pmat), -1)] = 0.0
        r = r.reshape(n_j, n_i, l1 - l0, n_k)
        scores[:, :, l0:l1] = r * mask[:, :, l0:l1]

    rows_per_chunk = max(1, _CHUNK_ELEMENTS // (n_k * n))
    bounds = [(l0, min(l0 + rows_per_chunk, n_l)) for l0 in range(0, n_l, rows_per_chunk)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: fill_rows(*b), bounds))
    else:
        for b in bounds:
            fill_rows(*b)
    t_corr = time.perf_counter() - t0

    best_k, best_l = _argmax_first_hit(scores)
    if timings is not None:
        timings["mask_s"] = timings.get("mask_s", 0.0) + t_mask
        timings["correlation_s"] = timings.get("correlation_s", 0.0) + t_corr
    return CorrelationField(
        patch=patch,
        sigma=sigma,
        map_shape=main.shape,
        scores=scores,
        best_k=best_k,
        best_l=best_l,
    )


def correlation_field_per_level(
    main_level: np.ndarray,
    side_level: np.ndarray,
    patch: int,
    sigma: float,
    workers: int = 1,
    timings: dict | None = None,
) -> CorrelationField:
    """Direct matching at one pyramid level (the no-reuse ablation path).

    Identical contract to :func:`correlation_field`; it exists so the
    benchmark can compare matching at every level against reusing the
    finest-level field.
    """
    return correlation_field(main_level, side_level, patch, sigma, workers=workers, timings=timings)


def _window_sums(plane: np.ndarray, patch: int) -> np.ndarray:
    """Sum of every patch x patch window of a 2D plane (integral image)."""
    ii = np.zeros((plane.shape[0] + 1, plane.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(plane, axis=0), axis=1, out=ii[1:, 1:])
    b = patch
    return ii[b:, b:] - ii[:-b, b:] - ii[b:, :-b] + ii[:-b, :-b]


def align_level1(field: CorrelationField, lossless_side: np.ndarray) -> np.ndarray:
    """Assemble the aligned map: best side window copied per main patch."""
    lossless_side = require_feature_map(lossless_side, "lossless side features")
    if lossless_side.shape[:2] != field.map_shape[:2]:
        raise GeometryError(
            f"lossless side dims {lossless_side.shape[:2]} do not match field {field.map_shape[:2]}"
        )
    b = field.patch
    out = np.empty(
        (field.n_j * b, field.n_i * b, lossless_side.shape[2]), dtype=lossless_side.dtype
    )
    for j in range(field.n_j):
        for i in range(field.n_i):
            k, l = int(field.best_k[j, i]), int(field.best_l[j, i])
            out[j * b : (j + 1) * b, i * b : (i + 1) * b] = lossless_side[l : l + b, k : k + b]
    return out


def lift_index(level: int, k: int, l: int) -> tuple[int, int]:
    """Level-1 side index of the level-h side patch (k, l): scale by 2^(h-1)."""
    factor = _level_factor(level)
    return factor * k, factor * l


def reuse_index(level: int, k1: int, l1: int) -> tuple[int, int]:
    """Level-h side index corresponding to level-1 index (k1, l1).

    Exact inverse of :func:`lift_index` on multiples of 2^(h-1); other
    indices floor down to the patch containing the lifted position.
    """
    factor = _level_factor(level)
    if k1 < 0 or l1 < 0:
        raise ConfigError(f"side indices must be non-negative, got ({k1}, {l1})")
    return k1 // factor, l1 // factor


def _level_factor(level: int) -> int:
    if not 2 <= level <= 4:
        raise ConfigError(f"index reuse applies to levels 2..4, got {level}")
    return 1 << (level - 1)


def align_all_levels(field: CorrelationField, lossless: FeaturePyramid) -> FeaturePyramid:
    """Aligned pyramid from one finest-level field.

    Level 1 copies the winning side windows directly. Levels 2..4 reuse
    the level-1 argmax: the level-h source patch index is the floor of the
    level-1 winner divided by 2^(h-1), and the main patch index is
    unchanged across levels.
    """
    b = field.patch
    if b % 8:
        raise ConfigError(f"patch size must be divisible by 8 to cover 4 levels, got {b}")
    if lossless.level(1).shape[:2] != field.map_shape[:2]:
        raise GeometryError(
            f"lossless pyramid level 1 dims {lossless.level(1).shape[:2]} "
            f"do not match field {field.map_shape[:2]}"
        )
    levels = [align_level1(field, lossless.level(1))]
    for h in range(2, 5):
        factor = 1 << (h - 1)
        bh = b // factor
        src = lossless.level(h)
        out = np.empty((field.n_j * bh, field.n_i * bh, src.shape[2]), dtype=src.dtype)
        for j in range(field.n_j):
            for i in range(field.n_i):
                k, l = reuse_index(h, int(field.best_k[j, i]), int(field.best_l[j, i]))
                out[j * bh : (j + 1) * bh, i * bh : (i + 1) * bh] = src[l : l + bh, k : k + bh]
        levels.append(out)
    return FeaturePyramid(levels)
