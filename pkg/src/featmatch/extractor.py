"""Forward-only convolutional autoencoder and side-feature extractor.

One shared weights object drives three paths:

* ``encode``: image -> quantized latent at (H/16, W/16, C);
* ``decode_multiscale``: latent -> four decoded feature maps at
  H/16 .. H/2 (exposed as pyramid levels 4..1) plus the first-stage
  H x W x 3 image from an extra upsampling head;
* ``extract_lossless_features``: image -> four feature maps straight from
  the uncompressed input (no quantization anywhere on this path).

The architecture is a fixed 4-stage strided autoencoder (5x5 kernels,
leaky rectifier, nearest-neighbor upsampling before decoder convs); it is
deliberately minimal, since downstream matching and fusion only need
correctly shaped deterministic features. Trained weights can be loaded
from a bundle instead of using the seeded generator.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, GeometryError, WeightsError
from .prng import SplitMix64
from .tensor import FeaturePyramid, require_feature_map

LEAKY_SLOPE = 0.01
DOWNSAMPLE_FACTOR = 16  # four stride-2 encoder stages

# im2col buffer budget per GEMM chunk, in float64 elements
_CHUNK_ELEMENTS = 8_000_000


def leaky(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


@dataclass(frozen=True)
class ConvStage:
    """One convolution with optional x2 resampling.

    ``resample`` is "down2" (stride-2 conv), "up2" (nearest-neighbor x2
    upsample, then stride-1 conv) or "none" (stride-1 conv). Padding keeps
    output dims exactly input dims scaled by the resampling factor.
    """

    kernel: np.ndarray  # (out_channels, in_channels, k, k)
    bias: np.ndarray  # (out_channels,)
    resample: str = "none"

    def __post_init__(self):
        k = np.asarray(self.kernel)
        b = np.asarray(self.bias)
        if k.ndim != 4 or k.shape[2] != k.shape[3]:
            raise WeightsError(f"kernel must be (out, in, k, k), got {k.shape}")
        if k.shape[2] % 2 != 1:
            raise WeightsError(f"kernel spatial size must be odd, got {k.shape[2]}")
        if b.shape != (k.shape[0],):
            raise WeightsError(f"bias shape {b.shape} does not match {k.shape[0]} output channels")
        if self.resample not in ("down2", "up2", "none"):
            raise WeightsError(f"unknown resample mode {self.resample!r}")
        object.__setattr__(self, "kernel", np.ascontiguousarray(k, dtype=np.float32))
        object.__setattr__(self, "bias", np.ascontiguousarray(b, dtype=np.float32))

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Apply resample + convolution + bias (no activation)."""
        if x.shape[2] != self.in_channels:
            raise GeometryError(f"stage expects {self.in_channels} input channels, got {x.shape[2]}")
        if self.resample == "up2":
            x = upsample2(x)
        stride = 2 if self.resample == "down2" else 1
        if stride == 2 and (x.shape[0] % 2 or x.shape[1] % 2):
            raise GeometryError(f"stride-2 stage needs even input dims, got {x.shape[:2]}")
        out = conv2d_same(x, self.kernel, stride=stride)
        out += self.bias.astype(np.float64)
        return out.astype(np.float32)


def upsample2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor x2 spatial upsampling."""
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def conv2d_same(x: np.ndarray, kernel: np.ndarray, stride: int = 1) -> np.ndarray:
    """'Same'-padded 2D cross-correlation, summed over input channels.

    Accumulates in float64 via row-chunked im2col matmuls so large maps do
    not materialize the full window tensor at once.
    """
    k = kernel.shape[2]
    pad = k // 2
    h, w, cin = x.shape
    out_h, out_w = h // stride if stride == 2 else h, w // stride if stride == 2 else w
    xp = np.pad(x.astype(np.float64), ((pad, pad), (pad, pad), (0, 0)))
    kmat = kernel.astype(np.float64).reshape(kernel.shape[0], -1)  # (out, in*k*k)
    out = np.empty((out_h, out_w, kernel.shape[0]), dtype=np.float64)

    rows_per_chunk = max(1, _CHUNK_ELEMENTS // (out_w * cin * k * k))
    windows = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    # windows: (out_h, out_w, cin, k, k) strided view
    for r0 in range(0, out_h, rows_per_chunk):
        r1 = min(r0 + rows_per_chunk, out_h)
        block = np.ascontiguousarray(windows[r0:r1]).reshape((r1 - r0) * out_w, -1)
        out[r0:r1] = (block @ kmat.T).reshape(r1 - r0, out_w, kernel.shape[0])
    return out


@dataclass(frozen=True)
class CodecWeights:
    """All convolution stages of the shared autoencoder.

    encoder: 3->C, C->C, C->C, C->C, each stride-2 down.
    decoder: four C->C stages whose outputs are pyramid levels 4..1
    (spatial factors 1, 2, 2, 2), then a C->3 x2 head for the first-stage
    image. extractor: same shape as the encoder, separate weights.
    """

    encoder: tuple
    decoder: tuple
    decoder_head: ConvStage
    extractor: tuple
    provenance: str = "unspecified"
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if len(self.encoder) != 4 or len(self.decoder) != 4 or len(self.extractor) != 4:
            raise WeightsError("encoder, decoder and extractor must have 4 stages each")
        c = self.encoder[0].out_channels
        _check_chain("encoder", self.encoder, [(3, c), (c, c), (c, c), (c, c)], ["down2"] * 4)
        _check_chain("decoder", self.decoder, [(c, c)] * 4, ["none", "up2", "up2", "up2"])
        _check_chain("extractor", self.extractor, [(3, c), (c, c), (c, c), (c, c)], ["down2"] * 4)
        if (self.decoder_head.in_channels, self.decoder_head.out_channels) != (c, 3):
            raise WeightsError("decoder head must map C->3 channels")
        if self.decoder_head.resample != "up2":
            raise WeightsError("decoder head must upsample x2")

    @property
    def channels(self) -> int:
        return self.encoder[0].out_channels

    def with_zero_bias(self) -> "CodecWeights":
        """Copy with every bias zeroed (used by degenerate-case tests)."""
        def zero(stage):
            return replace(stage, bias=np.zeros_like(stage.bias))

        return CodecWeights(
            encoder=tuple(zero(s) for s in self.encoder),
            decoder=tuple(zero(s) for s in self.decoder),
            decoder_head=zero(self.decoder_head),
            extractor=tuple(zero(s) for s in self.extractor),
            provenance=self.provenance + "+zero-bias",
            slope=self.slope,
        )


def _check_chain(name, stages, channel_pairs, resamples):
    for idx, (stage, (cin, cout), mode) in enumerate(zip(stages, channel_pairs, resamples), 1):
        if (stage.in_channels, stage.out_channels) != (cin, cout):
            raise WeightsError(
                f"{name} stage {idx}: expected {cin}->{cout} channels, "
                f"got {stage.in_channels}->{stage.out_channels}"
            )
        if stage.resample != mode:
            raise WeightsError(f"{name} stage {idx}: expected resample {mode!r}, got {stage.resample!r}")


@dataclass(frozen=True)
class Latent:
    """Quantized code at (H/16, W/16, C); every value is a multiple of ``step``."""

    values: np.ndarray
    step: float

    def __post_init__(self):
        if self.step <= 0:
            raise ConfigError(f"quantization step must be positive, got {self.step}")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float32))

    @property
    def shape(self):
        return self.values.shape


def quantize(values: np.ndarray, step: float) -> np.ndarray:
    """Round to the nearest multiple of ``step``, ties away from zero."""
    if step <= 0:
        raise ConfigError(f"quantization step must be positive, got {step}")
    v = values.astype(np.float64)
    q = np.copysign(np.floor(np.abs(v) / step + 0.5), v) * step
    return q.astype(np.float32)


def _check_image(image: np.ndarray) -> np.ndarray:
    image = require_feature_map(image, "image")
    if image.shape[2] != 3:
        raise GeometryError(f"expected a 3-channel image, got {image.shape[2]} channels")
    if image.shape[0] % DOWNSAMPLE_FACTOR or image.shape[1] % DOWNSAMPLE_FACTOR:
        raise GeometryError(
            f"image dims {image.shape[:2]} must be divisible by {DOWNSAMPLE_FACTOR}"
        )
    return image


def encode(image: np.ndarray, weights: CodecWeights, step: float = 1.0) -> Latent:
    """Run the encoder and quantize the code with the given step."""
    x = _check_image(image)
    for stage in weights.encoder:
        x = leaky(stage.forward(x), weights.slope).astype(np.float32)
    return Latent(values=quantize(x, step), step=step)


def decode_multiscale(latent: Latent, weights: CodecWeights):
    """Decode a latent into (FeaturePyramid, first-stage H x W x 3 image).

    Decoder stage outputs at H/16, H/8, H/4 and H/2 become pyramid levels
    4, 3, 2, 1; the head lifts level 1 to the image.
    """
    x = np.asarray(latent.values, dtype=np.float32)
    if x.ndim != 3 or x.shape[2] != weights.channels:
        raise WeightsError(
            f"latent shape {x.shape} does not chain with {weights.channels}-channel decoder"
        )
    taps = []
    for stage in weights.decoder:
        x = leaky(stage.forward(x), weights.slope).astype(np.float32)
        taps.append(x)
    image = weights.decoder_head.forward(taps[-1])  # no activation on the head
    pyramid = FeaturePyramid([taps[3], taps[2], taps[1], taps[0]])
    return pyramid, image


def extract_lossless_features(image: np.ndarray, weights: CodecWeights) -> FeaturePyramid:
    """Feature pyramid straight from the uncompressed image (no quantizer)."""
    x = _check_image(image)
    taps = []
    for stage in weights.extractor:
        x = leaky(stage.forward(x), weights.slope).astype(np.float32)
        taps.append(x)
    return FeaturePyramid(taps)


def seeded_codec_weights(seed: int, channels: int, kernel_size: int = 5) -> CodecWeights:
    """Deterministic stand-in weights from the SplitMix64 stream.

    Kernel entries are uniform in [-1, 1) scaled by 1/sqrt(fan_in); biases
    are zero. Draw order: encoder stages 1-4, decoder stages 1-4, decoder
    head, extractor stages 1-4, kernels only.
    """
    if channels < 1:
        raise ConfigError(f"channel count must be >= 1, got {channels}")
    stream = SplitMix64(seed)

    def stage(cin, cout, resample, k=kernel_size):
        fan_in = cin * k * k
        kern = stream.symmetric(cout * fan_in).reshape(cout, cin, k, k) / np.sqrt(fan_in)
        return ConvStage(kernel=kern.astype(np.float32), bias=np.zeros(cout, np.float32), resample=resample)

    c = channels
    encoder = (stage(3, c, "down2"), stage(c, c, "down2"), stage(c, c, "down2"), stage(c, c, "down2"))
    decoder = (stage(c, c, "none"), stage(c, c, "up2"), stage(c, c, "up2"), stage(c, c, "up2"))
    head = stage(c, 3, "up2")
    extractor = (stage(3, c, "down2"), stage(c, c, "down2"), stage(c, c, "down2"), stage(c, c, "down2"))
    return CodecWeights(
        encoder=encoder,
        decoder=decoder,
        decoder_head=head,
        extractor=extractor,
        provenance=f"seed:{seed}",
    )
