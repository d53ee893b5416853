"""Weights bundles: a directory of FMAP1 tensors plus a JSON manifest.

The manifest records stage order, logical shapes, resampling modes, the
activation slope and the default quantization step. Kernels of shape
(out, in, k, k) are stored as FMAP1 payloads with dims (out, in, k*k);
biases as (1, 1, out).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import WeightsError
from .extractor import CodecWeights, ConvStage, seeded_codec_weights
from .fusion import FusionWeights, ResidualBlock, seeded_fusion_weights
from .tensor import read_fmap, write_fmap

_FORMAT = "featmatch-weights-v1"


@dataclass(frozen=True)
class PipelineWeights:
    """Codec and fusion weights that travel together through the pipeline."""

    codec: CodecWeights
    fusion: FusionWeights
    q: float = 1.0


def seeded_pipeline_weights(seed: int, channels: int, q: float = 1.0) -> PipelineWeights:
    """Codec weights from ``seed`` and fusion weights from ``seed + 1``."""
    return PipelineWeights(
        codec=seeded_codec_weights(seed, channels),
        fusion=seeded_fusion_weights(seed + 1, channels),
        q=q,
    )


def _save_kernel(directory: Path, name: str, kernel: np.ndarray) -> str:
    o, i, k, _ = kernel.shape
    write_fmap(directory / f"{name}.fmap", kernel.reshape(o, i, k * k))
    return f"{name}.fmap"


def _save_bias(directory: Path, name: str, bias: np.ndarray) -> str:
    write_fmap(directory / f"{name}.fmap", bias.reshape(1, 1, -1))
    return f"{name}.fmap"


def _load_kernel(directory: Path, entry: dict) -> np.ndarray:
    arr = read_fmap(directory / entry["kernel"])
    o, i, k = entry["out"], entry["in"], entry["kernel_size"]
    if arr.shape != (o, i, k * k):
        raise WeightsError(f"{entry['kernel']}: payload {arr.shape} != declared ({o}, {i}, {k}*{k})")
    return arr.reshape(o, i, k, k)


def _load_bias(directory: Path, entry: dict) -> np.ndarray:
    arr = read_fmap(directory / entry["bias"])
    if arr.shape != (1, 1, entry["out"]):
        raise WeightsError(f"{entry['bias']}: payload {arr.shape} != declared (1, 1, {entry['out']})")
    return arr.reshape(-1)


def _stage_manifest(directory: Path, name: str, stage: ConvStage) -> dict:
    return {
        "kernel": _save_kernel(directory, f"{name}_kernel", stage.kernel),
        "bias": _save_bias(directory, f"{name}_bias", stage.bias),
        "out": stage.out_channels,
        "in": stage.in_channels,
        "kernel_size": stage.kernel.shape[2],
        "resample": stage.resample,
    }


def _stage_from_manifest(directory: Path, entry: dict) -> ConvStage:
    return ConvStage(
        kernel=_load_kernel(directory, entry),
        bias=_load_bias(directory, entry),
        resample=entry["resample"],
    )


def _block_manifest(directory: Path, name: str, block: ResidualBlock) -> dict:
    entry = {
        "conv1": {
            "kernel": _save_kernel(directory, f"{name}_conv1_kernel", block.conv1_kernel),
            "bias": _save_bias(directory, f"{name}_conv1_bias", block.conv1_bias),
            "out": block.out_channels,
            "in": block.in_channels,
            "kernel_size": 3,
        },
        "conv2": {
            "kernel": _save_kernel(directory, f"{name}_conv2_kernel", block.conv2_kernel),
            "bias": _save_bias(directory, f"{name}_conv2_bias", block.conv2_bias),
            "out": block.out_channels,
            "in": block.out_channels,
            "kernel_size": 3,
        },
        "projection": None,
    }
    if block.projection is not None:
        entry["projection"] = {
            "kernel": _save_kernel(directory, f"{name}_projection", block.projection),
            "out": block.out_channels,
            "in": block.in_channels,
            "kernel_size": 1,
        }
    return entry


def _block_from_manifest(directory: Path, entry: dict) -> ResidualBlock:
    projection = None
    if entry.get("projection"):
        projection = _load_kernel(directory, entry["projection"])
    return ResidualBlock(
        conv1_kernel=_load_kernel(directory, entry["conv1"]),
        conv1_bias=_load_bias(directory, entry["conv1"]),
        conv2_kernel=_load_kernel(directory, entry["conv2"]),
        conv2_bias=_load_bias(directory, entry["conv2"]),
        projection=projection,
    )


def save_weights_bundle(directory, weights: PipelineWeights) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    codec = weights.codec
    manifest = {
        "format": _FORMAT,
        "channels": codec.channels,
        "activation_slope": codec.slope,
        "q": weights.q,
        "provenance": codec.provenance,
        "codec": {
            "encoder": [_stage_manifest(directory, f"enc{i+1}", s) for i, s in enumerate(codec.encoder)],
            "decoder": [_stage_manifest(directory, f"dec{i+1}", s) for i, s in enumerate(codec.decoder)],
            "decoder_head": _stage_manifest(directory, "dec_head", codec.decoder_head),
            "extractor": [_stage_manifest(directory, f"ext{i+1}", s) for i, s in enumerate(codec.extractor)],
        },
        "fusion": {
            "levels": {
                str(level): {
                    "res1": _block_manifest(directory, f"fuse{level}_res1", blocks[0]),
                    "res2": _block_manifest(directory, f"fuse{level}_res2", blocks[1]),
                }
                for level, blocks in weights.fusion.blocks.items()
            },
            "head": _stage_manifest(directory, "fuse_head", weights.fusion.head),
        },
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_weights_bundle(directory) -> PipelineWeights:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise WeightsError(f"{directory}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != _FORMAT:
        raise WeightsError(f"{directory}: not a weights bundle (format={manifest.get('format')!r})")
    codec_entry = manifest["codec"]
    codec = CodecWeights(
        encoder=tuple(_stage_from_manifest(directory, e) for e in codec_entry["encoder"]),
        decoder=tuple(_stage_from_manifest(directory, e) for e in codec_entry["decoder"]),
        decoder_head=_stage_from_manifest(directory, codec_entry["decoder_head"]),
        extractor=tuple(_stage_from_manifest(directory, e) for e in codec_entry["extractor"]),
        provenance=manifest.get("provenance", f"file:{directory}"),
        slope=manifest.get("activation_slope", 0.01),
    )
    fusion_entry = manifest["fusion"]
    blocks = {
        int(level): (
            _block_from_manifest(directory, entry["res1"]),
            _block_from_manifest(directory, entry["res2"]),
        )
        for level, entry in fusion_entry["levels"].items()
    }
    fusion = FusionWeights(
        blocks=blocks,
        head=_stage_from_manifest(directory, fusion_entry["head"]),
        slope=manifest.get("activation_slope", 0.01),
    )
    if codec.channels != manifest["channels"]:
        raise WeightsError(
            f"{directory}: manifest declares {manifest['channels']} channels, "
            f"stages have {codec.channels}"
        )
    return PipelineWeights(codec=codec, fusion=fusion, q=float(manifest.get("q", 1.0)))
