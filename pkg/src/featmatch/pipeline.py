"""End-to-end decoding pipeline, perturbations, robustness sweep, benchmark.

The driver wires the stages together: encode and decode both images with
the shared autoencoder, extract lossless side features, match patches on
the finest feature level, align the side pyramid, fuse coarse to fine and
reconstruct, then score everything.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import metrics
from .bundles import PipelineWeights, load_weights_bundle, seeded_pipeline_weights
from .errors import ConfigError, GeometryError
from .extractor import decode_multiscale, encode, extract_lossless_features
from .fusion import fuse_pyramid, reconstruct
from .imageio import center_crop_multiple
from .matcher import (
    align_level1,
    align_all_levels,
    correlation_field,
    correlation_field_per_level,
    reuse_index,
)
from .prng import SplitMix64
from .tensor import FeaturePyramid

REPORT_SCHEMA = "featmatch-report-v1"
PAIR_SCHEMA = "featmatch-pair-v1"

_ALLOWED_PATCH_SIZES = (8, 16, 32)


@dataclass
class PipelineConfig:
    """Knobs for the end-to-end run; defaults follow the reference setup."""

    patch_size: int = 16
    channels: int = 128
    sigma: float | None = None  # defaults to 2 * patch_size
    q: float = 1.0
    lam: float = 0.035
    alpha: float = 1.0
    seed: int = 0
    weights_path: str | None = None
    reuse: bool = True
    workers: int = 1
    include_timings: bool = True

    def __post_init__(self):
        if self.patch_size not in _ALLOWED_PATCH_SIZES:
            raise ConfigError(f"patch size must be one of {_ALLOWED_PATCH_SIZES}, got {self.patch_size}")
        if self.channels < 1:
            raise ConfigError(f"channel count must be >= 1, got {self.channels}")
        if self.sigma is None:
            self.sigma = 2.0 * self.patch_size
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.q <= 0:
            raise ConfigError(f"q must be positive, got {self.q}")
        if self.lam <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    @property
    def crop_multiple(self) -> int:
        # the autoencoder needs multiples of 16; level-1 matching needs
        # level-1 dims divisible by the patch size, i.e. multiples of 2B
        return max(16, 2 * self.patch_size)

    def describe(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "channels": self.channels,
            "sigma": self.sigma,
            "q": self.q,
            "lambda": self.lam,
            "alpha": self.alpha,
            "weights": self.weights_path if self.weights_path else f"seed:{self.seed}",
            "reuse": self.reuse,
            "workers": self.workers,
        }


@dataclass(frozen=True)
class PerturbSpec:
    """Side-image perturbation: brightness multiply or spatial rescale."""

    kind: str
    factor: float

    def __post_init__(self):
        if self.kind not in ("brightness", "scale"):
            raise ConfigError(f"perturbation kind must be 'brightness' or 'scale', got {self.kind!r}")
        if not self.factor > 0:
            raise ConfigError(f"perturbation factor must be positive, got {self.factor}")


def resolve_weights(config: PipelineConfig) -> PipelineWeights:
    if config.weights_path:
        return load_weights_bundle(config.weights_path)
    return seeded_pipeline_weights(config.seed, config.channels, config.q)


def _center_window(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    r0 = (image.shape[0] - target_h) // 2
    c0 = (image.shape[1] - target_w) // 2
    return image[r0 : r0 + target_h, c0 : c0 + target_w]


def jsonable(value):
    """Recursively convert report values to JSON-safe types (inf -> null)."""
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        value = float(value)
    if isinstance(value, float):
        return None if math.isinf(value) or math.isnan(value) else value
    return value


def run_pipeline(main_image: np.ndarray, side_image: np.ndarray, config: PipelineConfig,
                 weights: PipelineWeights | None = None):
    """Full decode of ``main_image`` helped by ``side_image``.

    Returns (first-stage image, second-stage image, report dict); both
    images are clamped to [0, 1] on emission. The report carries the rate
    estimate, both stages' quality metrics and, unless disabled, per-phase
    wall times.
    """
    if weights is None:
        weights = resolve_weights(config)
    if weights.codec.channels != config.channels:
        raise ConfigError(
            f"config says {config.channels} channels but weights have {weights.codec.channels}"
        )
    timings: dict = {}

    def timed(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        timings[name] = timings.get(name, 0.0) + (time.perf_counter() - t0)
        return out

    multiple = config.crop_multiple
    original = (main_image.shape[0], main_image.shape[1])
    target_h = min(main_image.shape[0], side_image.shape[0])
    target_w = min(main_image.shape[1], side_image.shape[1])
    main = _center_window(main_image, target_h, target_w)
    side = _center_window(side_image, target_h, target_w)
    main = np.ascontiguousarray(center_crop_multiple(main, multiple), dtype=np.float32)
    side = np.ascontiguousarray(center_crop_multiple(side, multiple), dtype=np.float32)
    h, w = main.shape[:2]

    latent = timed("encode_main_s", encode, main, weights.codec, config.q)
    main_pyramid, x1_raw = timed("decode_main_s", decode_multiscale, latent, weights.codec)
    side_latent = timed("encode_side_s", encode, side, weights.codec, config.q)
    side_pyramid, _ = timed("decode_side_s", decode_multiscale, side_latent, weights.codec)
    lossless = timed("extract_lossless_s", extract_lossless_features, side, weights.codec)

    t0 = time.perf_counter()
    match_timings: dict = {}
    if config.reuse:
        field = correlation_field(
            main_pyramid.level(1), side_pyramid.level(1), config.patch_size, config.sigma,
            workers=config.workers, timings=match_timings,
        )
        aligned = align_all_levels(field, lossless)
    else:
        levels = []
        for h_level in range(1, 5):
            fld = correlation_field_per_level(
                main_pyramid.level(h_level), side_pyramid.level(h_level),
                config.patch_size >> (h_level - 1), config.sigma / (1 << (h_level - 1)),
                workers=config.workers, timings=match_timings,
            )
            levels.append(align_level1(fld, lossless.level(h_level)))
        aligned = FeaturePyramid(levels)
    timings["matching_s"] = time.perf_counter() - t0
    timings["gaussian_mask_s"] = match_timings.get("mask_s", 0.0)

    phi1 = timed("fusion_s", fuse_pyramid, main_pyramid, aligned, weights.fusion)
    x2 = timed("reconstruct_s", reconstruct, phi1, x1_raw, weights.fusion)
    x1 = np.clip(x1_raw, 0.0, 1.0).astype(np.float32)

    t0 = time.perf_counter()
    bpp = metrics.bpp_estimate(latent, h, w)
    psnr1 = metrics.psnr(main, x1, peak=1.0)
    psnr2 = metrics.psnr(main, x2, peak=1.0)
    ssim1, scales = metrics.ms_ssim(main, x1, return_scales=True)
    ssim2 = metrics.ms_ssim(main, x2)
    d1 = float(np.mean((main.astype(np.float64) - x1) ** 2))
    d2 = float(np.mean((main.astype(np.float64) - x2) ** 2))
    loss = metrics.rd_loss(bpp, d1, d2, config.lam, config.alpha)
    timings["metrics_s"] = time.perf_counter() - t0

    report = {
        "schema": REPORT_SCHEMA,
        "config": config.describe(),
        "crop": {"original": list(original), "used": [h, w], "multiple": multiple},
        "bpp_entropy_bound": bpp,
        "rd_loss": loss,
        "ms_ssim_scales": scales,
        "stage1": {"psnr_db": psnr1, "ms_ssim": ssim1, "mse": d1},
        "stage2": {"psnr_db": psnr2, "ms_ssim": ssim2, "mse": d2},
    }
    if config.include_timings:
        report["timings"] = {k: timings[k] for k in sorted(timings)}
    return x1, x2, jsonable(report)


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------

def perturb(image: np.ndarray, spec: PerturbSpec) -> np.ndarray:
    """Apply a brightness or scale perturbation, keeping dims and range."""
    image = np.asarray(image, dtype=np.float32)
    if spec.kind == "brightness":
        return np.clip(image * spec.factor, 0.0, 1.0).astype(np.float32)
    h, w = image.shape[:2]
    nh = max(1, int(round(h * spec.factor)))
    nw = max(1, int(round(w * spec.factor)))
    resized = bilinear_resize(image, nh, nw)
    return _center_fit(resized, h, w)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic bilinear resampling with center-aligned coordinates."""
    h, w = image.shape[:2]
    ry = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    rx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ry), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(rx), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ry - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(rx - x0, 0.0, 1.0)[None, :, None]
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _center_fit(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-crop or zero-pad back to the requested dims."""
    h, w = image.shape[:2]
    out = np.zeros((out_h, out_w) + image.shape[2:], dtype=image.dtype)
    src_r = max(0, (h - out_h) // 2)
    src_c = max(0, (w - out_w) // 2)
    dst_r = max(0, (out_h - h) // 2)
    dst_c = max(0, (out_w - w) // 2)
    rows = min(h, out_h)
    cols = min(w, out_w)
    out[dst_r : dst_r + rows, dst_c : dst_c + cols] = image[src_r : src_r + rows, src_c : src_c + cols]
    return out


# ---------------------------------------------------------------------------
# Robustness sweep
# ---------------------------------------------------------------------------

def robustness_sweep(
    main_image: np.ndarray,
    side_image: np.ndarray,
    config: PipelineConfig,
    factors,
    kind: str = "brightness",
    metric: str = "ms_ssim",
) -> dict:
    """Performance-reduction table over perturbation factors.

    For each factor the side image is perturbed, the pipeline re-run, and
    the side-information improvement metric(stage2) - metric(stage1) is
    compared against the unperturbed (factor 1.0) baseline.
    """
    factors = list(factors)
    if 1.0 not in factors:
        raise ConfigError("factor list must include the 1.0 baseline")
    if metric not in ("ms_ssim", "psnr"):
        raise ConfigError(f"metric must be 'ms_ssim' or 'psnr', got {metric!r}")
    weights = resolve_weights(config)
    rows = {}
    for factor in factors:
        perturbed = perturb(side_image, PerturbSpec(kind=kind, factor=float(factor)))
        _, _, report = run_pipeline(main_image, perturbed, config, weights=weights)
        key = "ms_ssim" if metric == "ms_ssim" else "psnr_db"
        s1, s2 = report["stage1"][key], report["stage2"][key]
        improvement = None if s1 is None or s2 is None else s2 - s1
        rows[float(factor)] = {
            "factor": float(factor),
            "stage1": s1,
            "stage2": s2,
            "improvement": improvement,
        }
    baseline = rows[1.0]["improvement"]
    for row in rows.values():
        if baseline in (None, 0.0) or row["improvement"] is None:
            row["pr_percent"] = None
        else:
            row["pr_percent"] = metrics.performance_reduction(baseline, row["improvement"])
    return jsonable({
        "schema": "featmatch-sweep-v1",
        "kind": kind,
        "metric": metric,
        "baseline_improvement": baseline,
        "rows": [rows[f] for f in sorted(rows)],
    })


# ---------------------------------------------------------------------------
# Reuse-vs-no-reuse benchmark
# ---------------------------------------------------------------------------

def bench_reuse(
    main_image: np.ndarray,
    side_image: np.ndarray,
    config: PipelineConfig,
    repetitions: int = 9,
) -> dict:
    """Compare matching with level-1 correlation reuse against per-level
    matching: median wall times, mask-generation time, and the memory of
    the field structures, plus per-level index agreement."""
    if repetitions < 5:
        raise ConfigError(f"benchmark needs at least 5 repetitions, got {repetitions}")
    weights = resolve_weights(config)
    multiple = config.crop_multiple
    main = center_crop_multiple(np.asarray(main_image, np.float32), multiple)
    side = center_crop_multiple(np.asarray(side_image, np.float32), multiple)

    latent = encode(main, weights.codec, config.q)
    main_pyramid, _ = decode_multiscale(latent, weights.codec)
    side_latent = encode(side, weights.codec, config.q)
    side_pyramid, _ = decode_multiscale(side_latent, weights.codec)
    lossless = extract_lossless_features(side, weights.codec)

    b, sigma = config.patch_size, config.sigma
    reuse_times, reuse_mask_times = [], []
    level_times, level_mask_times = [], []
    reuse_field = None
    per_level_fields = None
    for _ in range(repetitions):
        t = {}
        t0 = time.perf_counter()
        fld = correlation_field(main_pyramid.level(1), side_pyramid.level(1), b, sigma,
                                workers=config.workers, timings=t)
        align_all_levels(fld, lossless)
        reuse_times.append(time.perf_counter() - t0)
        reuse_mask_times.append(t["mask_s"])
        reuse_field = fld

        t = {}
        t0 = time.perf_counter()
        fields = []
        for h_level in range(1, 5):
            fld_h = correlation_field_per_level(
                main_pyramid.level(h_level), side_pyramid.level(h_level),
                b >> (h_level - 1), sigma / (1 << (h_level - 1)),
                workers=config.workers, timings=t,
            )
            align_level1(fld_h, lossless.level(h_level))
            fields.append(fld_h)
        level_times.append(time.perf_counter() - t0)
        level_mask_times.append(t["mask_s"])
        per_level_fields = fields

    reuse_bytes = reuse_field.nbytes + reuse_field.mask_nbytes()
    level_bytes = sum(f.nbytes + f.mask_nbytes() for f in per_level_fields)

    # per-level agreement between reused indices and direct matching
    assert np.array_equal(reuse_field.best_k, per_level_fields[0].best_k)
    assert np.array_equal(reuse_field.best_l, per_level_fields[0].best_l)
    disagreement = {}
    for h_level in range(2, 5):
        fld_h = per_level_fields[h_level - 1]
        mapped = np.empty_like(fld_h.best_k)
        mapped_l = np.empty_like(fld_h.best_l)
        for j in range(reuse_field.n_j):
            for i in range(reuse_field.n_i):
                k, l = reuse_index(h_level, int(reuse_field.best_k[j, i]), int(reuse_field.best_l[j, i]))
                mapped[j, i], mapped_l[j, i] = k, l
        differs = (mapped != fld_h.best_k) | (mapped_l != fld_h.best_l)
        disagreement[str(h_level)] = float(differs.mean())

    return jsonable({
        "schema": "featmatch-bench-v1",
        "input_dims": [int(main.shape[0]), int(main.shape[1])],
        "repetitions": repetitions,
        "reuse": {
            "matching_s": statistics.median(reuse_times),
            "mask_s": statistics.median(reuse_mask_times),
            "field_bytes": int(reuse_bytes),
        },
        "per_level": {
            "matching_s": statistics.median(level_times),
            "mask_s": statistics.median(level_mask_times),
            "field_bytes": int(level_bytes),
        },
        "level1_identical": True,
        "index_disagreement_rate": disagreement,
    })


# ---------------------------------------------------------------------------
# Synthetic inputs
# ---------------------------------------------------------------------------

def make_stereo_pair(height: int, width: int, shift: int = 4, seed: int = 7):
    """Seeded smooth random texture pair: side is the main image shifted
    right by ``shift`` columns (fresh texture enters on the left)."""
    if shift < 0 or shift >= width:
        raise ConfigError(f"shift must be in [0, width), got {shift}")
    stream = SplitMix64(seed)
    tex = stream.uniform(height * (width + shift) * 3).reshape(height, width + shift, 3)
    # box-blur twice for spatial correlation, then stretch back to [0, 1]
    for _ in range(2):
        padded = np.pad(tex, ((2, 2), (2, 2), (0, 0)), mode="edge")
        acc = np.zeros_like(tex)
        for dy in range(5):
            for dx in range(5):
                acc += padded[dy : dy + height, dx : dx + width + shift]
        tex = acc / 25.0
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-9)
    main = np.ascontiguousarray(tex[:, shift:], dtype=np.float32)
    side = np.ascontiguousarray(tex[:, :width], dtype=np.float32)
    return main, side
