"""Quality, rate and robustness metrics.

Covers PSNR, 5-scale MS-SSIM, the entropy-bound bits-per-pixel estimate,
the rate-distortion objective, Bjontegaard delta rate between two curves,
and the performance-reduction percentage used by the robustness sweeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, GeometryError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_WINDOW = 11
MS_SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03
_BT601 = np.array([0.299, 0.587, 0.114])


class NoOverlapError(ValueError):
    """The two rate-distortion curves share no quality range."""


class UndefinedReductionError(ValueError):
    """Performance reduction is undefined for a zero baseline gain."""


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf.

    The infinity sentinel is serialized as null in JSON reports.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise GeometryError(f"image shapes differ: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ConfigError(f"peak must be positive, got {peak}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def _luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ _BT601
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0]
    if img.ndim == 2:
        return img
    raise GeometryError(f"expected a grayscale or RGB image, got shape {img.shape}")


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(plane: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable 'valid'-mode windowed mean of a 2D plane."""
    rows = sliding_window_view(plane, window.size, axis=1) @ window
    return sliding_window_view(rows, window.size, axis=0) @ window


def _ssim_components(a: np.ndarray, b: np.ndarray, window: np.ndarray):
    c1 = _K1 * _K1
    c2 = _K2 * _K2
    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    var_a = _filter_valid(a * a, window) - mu_a * mu_a
    var_b = _filter_valid(b * b, window) - mu_b * mu_b
    cov = _filter_valid(a * b, window) - mu_a * mu_b
    luminance = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    contrast_structure = (2 * cov + c2) / (var_a + var_b + c2)
    return float(luminance.mean()), float(contrast_structure.mean())


def _halve(plane: np.ndarray) -> np.ndarray:
    h, w = (plane.shape[0] // 2) * 2, (plane.shape[1] // 2) * 2
    p = plane[:h, :w]
    return 0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2])


def ms_ssim(a: np.ndarray, b: np.ndarray, return_scales: bool = False):
    """Multi-scale structural similarity of two [0, 1] images.

    Uses the standard 5-scale weights, an 11x11 Gaussian window with
    sigma 1.5, BT.601 luminance, and 2x2 mean pooling between scales.
    Images too small for 5 scales fall back to however many scales fit
    (weights renormalized); ``return_scales=True`` also returns that
    count. Negative means are clamped at 0 so the result stays in [0, 1].
    """
    ya = _luminance(a)
    yb = _luminance(b)
    if ya.shape != yb.shape:
        raise GeometryError(f"image shapes differ: {ya.shape} vs {yb.shape}")
    window = _gaussian_window(MS_SSIM_WINDOW, MS_SSIM_SIGMA)
    max_scales = 0
    h, w = ya.shape
    while min(h, w) >= MS_SSIM_WINDOW and max_scales < len(MS_SSIM_WEIGHTS):
        max_scales += 1
        h, w = h // 2, w // 2
    if max_scales == 0:
        raise GeometryError(
            f"image {ya.shape} smaller than the {MS_SSIM_WINDOW}x{MS_SSIM_WINDOW} window"
        )
    weights = np.array(MS_SSIM_WEIGHTS[:max_scales])
    weights = weights / weights.sum()

    value = 1.0
    for scale in range(max_scales):
        lum, cs = _ssim_components(ya, yb, window)
        if scale < max_scales - 1:
            value *= max(cs, 0.0) ** weights[scale]
            ya, yb = _halve(ya), _halve(yb)
        else:
            value *= max(lum * cs, 0.0) ** weights[scale]
    value = float(value)
    return (value, max_scales) if return_scales else value


def bpp_estimate(latent, image_height: int, image_width: int) -> float:
    """Entropy bound on the rate: histogram entropy of the latent symbols
    times the symbol count, per main-image pixel."""
    values = np.asarray(latent.values if hasattr(latent, "values") else latent)
    if values.size == 0:
        raise ConfigError("latent is empty")
    _, counts = np.unique(values, return_counts=True)
    p = counts / values.size
    bits_per_symbol = abs(float((p * np.log2(p)).sum()))
    return bits_per_symbol * values.size / (image_height * image_width)


def rd_loss(entropy_bits: float, d1: float, d2: float, lam: float, alpha: float) -> float:
    """Rate-distortion objective: rate plus the weighted two-stage distortion.

    ``alpha`` blends the first-stage (alpha=0) and second-stage (alpha=1)
    distortions; distortions are mean squared error by convention.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    if lam <= 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    return entropy_bits + lam * ((1.0 - alpha) * d1 + alpha * d2)


@dataclass(frozen=True)
class RdPoint:
    """One operating point: rate in bits per pixel plus both quality metrics."""

    bpp: float
    psnr: float
    ms_ssim: float

    def __post_init__(self):
        if self.bpp < 0:
            raise ConfigError(f"bpp must be non-negative, got {self.bpp}")
        if not 0.0 <= self.ms_ssim <= 1.0:
            raise ConfigError(f"ms_ssim must be in [0, 1], got {self.ms_ssim}")


class RdCurve:
    """Rate-distortion points ordered by strictly increasing bpp."""

    def __init__(self, points):
        points = list(points)
        if not points:
            raise ConfigError("curve needs at least one point")
        bpps = [p.bpp for p in points]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ConfigError(f"bpp values must be strictly increasing, got {bpps}")
        self.points = points

    def __len__(self):
        return len(self.points)

    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    def qualities(self, field: str) -> np.ndarray:
        if field not in ("psnr", "ms_ssim"):
            raise ConfigError(f"quality field must be 'psnr' or 'ms_ssim', got {field!r}")
        return np.array([getattr(p, field) for p in self.points])


def bd_rate(
    reference: RdCurve,
    test: RdCurve,
    quality: str = "psnr",
    method: str = "cubic",
    samples: int = 1000,
) -> float:
    """Average bitrate difference of ``test`` vs ``reference`` at equal quality.

    Fits log10(bpp) as a function of quality on both curves, averages the
    difference over the overlapping quality interval, and converts back to
    percent; negative values mean the test curve needs fewer bits. The
    default fit is a cubic polynomial integrated by the trapezoid rule at
    ``samples`` points; ``method="pchip"`` uses piecewise-cubic
    interpolation instead.
    """
    if len(reference) < 4 or len(test) < 4:
        raise ConfigError("BD-rate needs at least 4 points per curve")
    ref_q, ref_r = reference.qualities(quality), reference.rates()
    test_q, test_r = test.qualities(quality), test.rates()
    if (ref_r <= 0).any() or (test_r <= 0).any():
        raise ConfigError("BD-rate needs strictly positive bpp values")
    lo = max(ref_q.min(), test_q.min())
    hi = min(ref_q.max(), test_q.max())
    if not hi > lo:
        raise NoOverlapError(f"quality ranges do not overlap: [{lo}, {hi}]")
    grid = np.linspace(lo, hi, samples)
    if method == "cubic":
        ref_fit = np.polyval(np.polyfit(ref_q, np.log10(ref_r), 3), grid)
        test_fit = np.polyval(np.polyfit(test_q, np.log10(test_r), 3), grid)
    elif method == "pchip":
        from scipy.interpolate import PchipInterpolator

        ref_fit = PchipInterpolator(np.sort(ref_q), np.log10(ref_r)[np.argsort(ref_q)])(grid)
        test_fit = PchipInterpolator(np.sort(test_q), np.log10(test_r)[np.argsort(test_q)])(grid)
    else:
        raise ConfigError(f"unknown BD-rate method {method!r}")
    avg_log_diff = (np.trapezoid(test_fit, grid) - np.trapezoid(ref_fit, grid)) / (hi - lo)
    return float((10.0**avg_log_diff - 1.0) * 100.0)


def performance_reduction(gain_before: float, gain_after: float) -> float:
    """Percentage of the side-information gain lost after a perturbation.

    100 * (1 - gain_after / gain_before); may exceed 100 when the gain
    turns negative. Undefined for a zero baseline gain.
    """
    if gain_before == 0:
        raise UndefinedReductionError("baseline gain is zero; reduction undefined")
    return float((1.0 - gain_after / gain_before) * 100.0)
