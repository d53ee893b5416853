"""Coarse-to-fine fusion of aligned side features with decoded main features.

Starting at the coarsest level, the decoded main features, the aligned
side features and (below the top level) the upsampled previous output are
concatenated and pushed through two residual blocks; the final level-1
output is lifted to image resolution and added to the first-stage image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError, WeightsError
from .extractor import LEAKY_SLOPE, ConvStage, conv2d_same, leaky, upsample2
from .prng import SplitMix64
from .tensor import require_feature_map


@dataclass(frozen=True)
class ResidualBlock:
    """conv -> leaky -> conv plus an additive skip.

    When the block changes the channel count the skip is a learned 1x1
    projection (no bias); otherwise the skip is the identity, so a block
    with all-zero convolution weights passes its input through unchanged.
    No activation follows the addition.
    """

    conv1_kernel: np.ndarray  # (C, C_in, 3, 3)
    conv1_bias: np.ndarray
    conv2_kernel: np.ndarray  # (C, C, 3, 3)
    conv2_bias: np.ndarray
    projection: np.ndarray | None = None  # (C, C_in, 1, 1) when C_in != C

    def __post_init__(self):
        c_out, c_in = self.conv1_kernel.shape[:2]
        if self.conv2_kernel.shape[:2] != (c_out, c_out):
            raise WeightsError(f"second conv must be {c_out}->{c_out}, got {self.conv2_kernel.shape[:2]}")
        if c_in != c_out and self.projection is None:
            raise WeightsError(f"block changing channels {c_in}->{c_out} needs a projection skip")
        if self.projection is not None and self.projection.shape != (c_out, c_in, 1, 1):
            raise WeightsError(f"projection shape {self.projection.shape} != ({c_out}, {c_in}, 1, 1)")
        for name in ("conv1_kernel", "conv1_bias", "conv2_kernel", "conv2_bias"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))
        if self.projection is not None:
            object.__setattr__(self, "projection", np.ascontiguousarray(self.projection, dtype=np.float32))

    @property
    def in_channels(self) -> int:
        return self.conv1_kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv1_kernel.shape[0]

    def forward(self, x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
        if x.shape[2] != self.in_channels:
            raise GeometryError(f"block expects {self.in_channels} channels, got {x.shape[2]}")
        y = conv2d_same(x, self.conv1_kernel) + self.conv1_bias.astype(np.float64)
        y = conv2d_same(leaky(y, slope), self.conv2_kernel) + self.conv2_bias.astype(np.float64)
        if self.projection is not None:
            skip = conv2d_same(x, self.projection)
        else:
            skip = x.astype(np.float64)
        return (y + skip).astype(np.float32)

    def nbytes(self) -> int:
        total = self.conv1_kernel.nbytes + self.conv1_bias.nbytes
        total += self.conv2_kernel.nbytes + self.conv2_bias.nbytes
        if self.projection is not None:
            total += self.projection.nbytes
        return total


@dataclass(frozen=True)
class FusionWeights:
    """Two residual blocks per level (4..1) plus the C->3 image head.

    Level 4 blocks take 2C input channels (main + aligned concatenated);
    levels 3..1 take 3C (main + aligned + upsampled previous output).
    """

    blocks: dict  # level -> (ResidualBlock, ResidualBlock)
    head: ConvStage  # C -> 3, x2 upsample
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if sorted(self.blocks) != [1, 2, 3, 4]:
            raise WeightsError(f"fusion weights must cover levels 1..4, got {sorted(self.blocks)}")
        c = self.blocks[4][0].out_channels
        for level, (res1, res2) in self.blocks.items():
            expected_in = 2 * c if level == 4 else 3 * c
            if res1.in_channels != expected_in or res1.out_channels != c:
                raise WeightsError(
                    f"level {level} first block must be {expected_in}->{c}, "
                    f"got {res1.in_channels}->{res1.out_channels}"
                )
            if res2.in_channels != c or res2.out_channels != c:
                raise WeightsError(f"level {level} second block must be {c}->{c}")
        if (self.head.in_channels, self.head.out_channels) != (c, 3):
            raise WeightsError("fusion head must map C->3 channels")
        if self.head.resample != "up2":
            raise WeightsError("fusion head must upsample x2")

    @property
    def channels(self) -> int:
        return self.blocks[4][0].out_channels


def fuse_level(
    level: int,
    main_features: np.ndarray,
    aligned_features: np.ndarray,
    prev: np.ndarray | None,
    weights: FusionWeights,
) -> np.ndarray:
    """One fusion iteration at the given level (4 = coarsest first).

    For level 4 ``prev`` must be None. For levels 3..1 ``prev`` is the
    previous (coarser) output; it is upsampled x2, concatenated after the
    main and aligned features, and added back around the blocks as an
    outer skip.
    """
    main_features = require_feature_map(main_features, "main features")
    aligned_features = require_feature_map(aligned_features, "aligned features")
    if main_features.shape != aligned_features.shape:
        raise GeometryError(
            f"main {main_features.shape} and aligned {aligned_features.shape} shapes differ"
        )
    if main_features.shape[2] != weights.channels:
        raise GeometryError(
            f"expected {weights.channels} feature channels, got {main_features.shape[2]}"
        )
    if not 1 <= level <= 4:
        raise ConfigError(f"fusion level must be in 1..4, got {level}")
    res1, res2 = weights.blocks[level]
    if level == 4:
        if prev is not None:
            raise ConfigError("level 4 is the first fusion iteration; prev must be None")
        x = np.concatenate([main_features, aligned_features], axis=2)
        return res2.forward(res1.forward(x, weights.slope), weights.slope)
    if prev is None:
        raise ConfigError(f"level {level} fusion needs the level {level + 1} output")
    up = upsample2(prev)
    if up.shape != main_features.shape:
        raise GeometryError(
            f"upsampled previous output {up.shape} does not match level dims {main_features.shape}"
        )
    x = np.concatenate([main_features, aligned_features, up], axis=2)
    inner = res1.forward(x, weights.slope) + up
    return res2.forward(inner.astype(np.float32), weights.slope)


def fuse_pyramid(main_pyramid, aligned_pyramid, weights: FusionWeights) -> np.ndarray:
    """Run all four fusion iterations coarse to fine; returns the level-1 output."""
    out = None
    for level in (4, 3, 2, 1):
        out = fuse_level(level, main_pyramid.level(level), aligned_pyramid.level(level), out, weights)
    return out


def reconstruct(
    phi1: np.ndarray,
    first_stage: np.ndarray,
    weights: FusionWeights,
    clip: bool = True,
) -> np.ndarray:
    """Second-stage image: head(level-1 output) + first-stage image.

    The head upsamples x2 and projects to 3 channels without activation.
    The sum is clamped to [0, 1] exactly once, at this final emission;
    pass ``clip=False`` to get the raw sum.
    """
    phi1 = require_feature_map(phi1, "fused level-1 features")
    first_stage = require_feature_map(first_stage, "first-stage image")
    residual = weights.head.forward(phi1)
    if residual.shape != first_stage.shape:
        raise GeometryError(
            f"head output {residual.shape} does not match first-stage image {first_stage.shape}"
        )
    out = residual.astype(np.float64) + first_stage.astype(np.float64)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def seeded_fusion_weights(seed: int, channels: int) -> FusionWeights:
    """Deterministic fusion weights from the SplitMix64 stream.

    Kernel entries are uniform in [-1, 1) scaled by 1/sqrt(fan_in); biases
    are zero. Draw order: levels 4, 3, 2, 1 (block 1 conv1, conv2,
    projection, then block 2 conv1, conv2), then the head kernel.
    """
    if channels < 1:
        raise ConfigError(f"channel count must be >= 1, got {channels}")
    stream = SplitMix64(seed)
    c = channels

    def kernel(c_out, c_in, k):
        fan_in = c_in * k * k
        vals = stream.symmetric(c_out * fan_in).reshape(c_out, c_in, k, k) / np.sqrt(fan_in)
        return vals.astype(np.float32)

    blocks = {}
    for level in (4, 3, 2, 1):
        c_in = 2 * c if level == 4 else 3 * c
        res1 = ResidualBlock(
            conv1_kernel=kernel(c, c_in, 3),
            conv1_bias=np.zeros(c, np.float32),
            conv2_kernel=kernel(c, c, 3),
            conv2_bias=np.zeros(c, np.float32),
            projection=kernel(c, c_in, 1),
        )
        res2 = ResidualBlock(
            conv1_kernel=kernel(c, c, 3),
            conv1_bias=np.zeros(c, np.float32),
            conv2_kernel=kernel(c, c, 3),
            conv2_bias=np.zeros(c, np.float32),
        )
        blocks[level] = (res1, res2)
    head = ConvStage(kernel=kernel(3, c, 3), bias=np.zeros(3, np.float32), resample="up2")
    return FusionWeights(blocks=blocks, head=head)


def zeroed_fusion_weights(channels: int) -> FusionWeights:
    """All-zero fusion weights: every level passes through its outer skip
    and the reconstruction equals the first-stage image."""
    weights = seeded_fusion_weights(0, channels)
    blocks = {}
    for level, (res1, res2) in weights.blocks.items():
        blocks[level] = (
            ResidualBlock(
                conv1_kernel=np.zeros_like(res1.conv1_kernel),
                conv1_bias=np.zeros_like(res1.conv1_bias),
                conv2_kernel=np.zeros_like(res1.conv2_kernel),
                conv2_bias=np.zeros_like(res1.conv2_bias),
                projection=np.zeros_like(res1.projection),
            ),
            ResidualBlock(
                conv1_kernel=np.zeros_like(res2.conv1_kernel),
                conv1_bias=np.zeros_like(res2.conv1_bias),
                conv2_kernel=np.zeros_like(res2.conv2_kernel),
                conv2_bias=np.zeros_like(res2.conv2_bias),
            ),
        )
    head = ConvStage(
        kernel=np.zeros_like(weights.head.kernel),
        bias=np.zeros_like(weights.head.bias),
        resample="up2",
    )
    return FusionWeights(blocks=blocks, head=head)
