"""Feature-domain patch matching decoder for distributed image compression.

The package decodes a compressed main image with the help of a correlated
side image available only at the decoder: a shared forward-only
autoencoder produces multi-scale features for both images, patches are
matched on the finest feature level with a masked Pearson correlation
(reused on coarser levels), the aligned lossless side features are fused
coarse to fine, and the result is added to the first-stage reconstruction.
An evaluation stack (PSNR, MS-SSIM, entropy-bound bpp, BD-rate,
performance reduction) and a reuse benchmark round out the toolkit.
"""

from .bundles import (
    PipelineWeights,
    load_weights_bundle,
    save_weights_bundle,
    seeded_pipeline_weights,
)
from .errors import ConfigError, FeatmatchError, GeometryError, InputError, WeightsError
from .extractor import (
    CodecWeights,
    ConvStage,
    Latent,
    decode_multiscale,
    encode,
    extract_lossless_features,
    quantize,
    seeded_codec_weights,
)
from .fusion import (
    FusionWeights,
    ResidualBlock,
    fuse_level,
    fuse_pyramid,
    reconstruct,
    seeded_fusion_weights,
    zeroed_fusion_weights,
)
from .imageio import center_crop_multiple, load_image, save_image
from .matcher import (
    CorrelationField,
    align_all_levels,
    align_level1,
    correlation_field,
    correlation_field_per_level,
    gaussian_mask_tables,
    lift_index,
    pearson,
    reuse_index,
)
from .metrics import (
    NoOverlapError,
    RdCurve,
    RdPoint,
    UndefinedReductionError,
    bd_rate,
    bpp_estimate,
    ms_ssim,
    performance_reduction,
    psnr,
    rd_loss,
)
from .pipeline import (
    PerturbSpec,
    PipelineConfig,
    bench_reuse,
    bilinear_resize,
    make_stereo_pair,
    perturb,
    robustness_sweep,
    run_pipeline,
)
from .tensor import (
    FeaturePyramid,
    PatchGrid,
    extract_patch,
    load_pyramid,
    make_patch_grid,
    read_fmap,
    save_pyramid,
    write_fmap,
    write_patch,
)

__version__ = "0.1.0"
