"""Command-line front end.

Subcommands: gen-weights, encode, decode, match, fuse, run, eval, sweep,
bench. Reports are JSON on stdout or at ``--out``. Exit codes: 0 ok,
2 invalid input, 3 geometry error, 4 config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .bundles import load_weights_bundle, save_weights_bundle, seeded_pipeline_weights
from .errors import ConfigError, GeometryError, InputError
from .extractor import Latent, decode_multiscale, encode, extract_lossless_features
from .fusion import fuse_pyramid, reconstruct
from .imageio import center_crop_multiple, load_image, save_image
from .matcher import align_level1, align_all_levels, correlation_field, correlation_field_per_level
from .pipeline import (
    PipelineConfig,
    bench_reuse,
    jsonable,
    resolve_weights,
    robustness_sweep,
    run_pipeline,
)
from .tensor import FeaturePyramid, load_pyramid, read_fmap, save_pyramid, write_fmap


def _add_config_flags(parser: argparse.ArgumentParser, with_matching: bool = True) -> None:
    parser.add_argument("--patch-size", type=int, default=16, help="matching patch size B")
    parser.add_argument("--channels", type=int, default=128, help="feature channel count C")
    parser.add_argument("--q", type=float, default=None, help="quantization step (default: bundle value or 1.0)")
    parser.add_argument("--seed", type=int, default=0, help="seed for generated weights")
    parser.add_argument("--weights", type=str, default=None, help="weights bundle directory")
    if with_matching:
        parser.add_argument("--sigma", type=float, default=None, help="Gaussian mask sigma (default 2B)")
        parser.add_argument("--no-reuse", action="store_true", help="match at every level instead of reusing level 1")
        parser.add_argument("--workers", type=int, default=1, help="worker threads for matching")
    parser.add_argument("--lambda", dest="lam", type=float, default=0.035, help="rate-distortion weight")
    parser.add_argument("--alpha", type=float, default=1.0, help="stage-2 distortion weight in [0, 1]")
    parser.add_argument("--no-timings", action="store_true", help="omit wall times from reports")


def _config_from_args(args) -> PipelineConfig:
    q = args.q
    if q is None and args.weights:
        q = load_weights_bundle(args.weights).q
    return PipelineConfig(
        patch_size=args.patch_size,
        channels=args.channels,
        sigma=getattr(args, "sigma", None),
        q=1.0 if q is None else q,
        lam=args.lam,
        alpha=args.alpha,
        seed=args.seed,
        weights_path=args.weights,
        reuse=not getattr(args, "no_reuse", False),
        workers=getattr(args, "workers", 1),
        include_timings=not args.no_timings,
    )


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(jsonable(report), indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _load_weights(args):
    if args.weights:
        return load_weights_bundle(args.weights)
    return seeded_pipeline_weights(args.seed, args.channels, 1.0 if args.q is None else args.q)


def _save_latent(prefix: str, latent: Latent) -> None:
    write_fmap(f"{prefix}.fmap", latent.values)
    Path(f"{prefix}.json").write_text(json.dumps({"q": latent.step}) + "\n")


def _load_latent(path: str) -> Latent:
    path = str(path)
    prefix = path[: -len(".fmap")] if path.endswith(".fmap") else path
    values = read_fmap(prefix + ".fmap")
    meta = Path(prefix + ".json")
    q = json.loads(meta.read_text())["q"] if meta.is_file() else 1.0
    return Latent(values=values, step=q)


def _cmd_gen_weights(args) -> int:
    weights = seeded_pipeline_weights(args.seed, args.channels, 1.0 if args.q is None else args.q)
    save_weights_bundle(args.out, weights)
    _emit({"written": str(args.out), "channels": args.channels, "seed": args.seed, "q": weights.q}, None)
    return 0


def _cmd_encode(args) -> int:
    config = _config_from_args(args)
    weights = _load_weights(args)
    image = center_crop_multiple(load_image(args.image), config.crop_multiple)
    latent = encode(image, weights.codec, config.q)
    _save_latent(args.out, latent)
    h, w = image.shape[:2]
    _emit({
        "written": f"{args.out}.fmap",
        "latent_dims": list(latent.shape),
        "q": latent.step,
        "bpp_entropy_bound": metrics.bpp_estimate(latent, h, w),
    }, None)
    return 0


def _cmd_decode(args) -> int:
    weights = _load_weights(args)
    latent = _load_latent(args.latent)
    pyramid, image = decode_multiscale(latent, weights.codec)
    save_image(args.out_image, np.clip(image, 0.0, 1.0))
    written = {"image": args.out_image}
    if args.out_pyramid:
        save_pyramid(args.out_pyramid, pyramid)
        written["pyramid"] = args.out_pyramid
    _emit({"written": written}, None)
    return 0


def _load_level1_or_pyramid(path: str):
    """A level-1 .fmap file, or a pyramid bundle directory."""
    p = Path(path)
    if p.is_dir():
        return load_pyramid(p)
    return read_fmap(p)


def _cmd_match(args) -> int:
    main_in = _load_level1_or_pyramid(args.main)
    side_in = _load_level1_or_pyramid(args.side)
    lossless = load_pyramid(args.lossless)
    sigma = args.sigma if args.sigma is not None else 2.0 * args.patch_size
    if args.no_reuse:
        if not isinstance(main_in, FeaturePyramid) or not isinstance(side_in, FeaturePyramid):
            raise InputError("--no-reuse needs pyramid bundles for --main and --side")
        levels, indices = [], {}
        for h in range(1, 5):
            fld = correlation_field_per_level(
                main_in.level(h), side_in.level(h),
                args.patch_size >> (h - 1), sigma / (1 << (h - 1)), workers=args.workers,
            )
            levels.append(align_level1(fld, lossless.level(h)))
            indices[str(h)] = {"k": fld.best_k.tolist(), "l": fld.best_l.tolist()}
        aligned = FeaturePyramid(levels)
    else:
        main1 = main_in.level(1) if isinstance(main_in, FeaturePyramid) else main_in
        side1 = side_in.level(1) if isinstance(side_in, FeaturePyramid) else side_in
        fld = correlation_field(main1, side1, args.patch_size, sigma, workers=args.workers)
        aligned = align_all_levels(fld, lossless)
        indices = {"1": {"k": fld.best_k.tolist(), "l": fld.best_l.tolist()}}
    save_pyramid(args.out_aligned, aligned)
    report = {"written": args.out_aligned, "patch_size": args.patch_size, "sigma": sigma,
              "reuse": not args.no_reuse, "best_indices": indices}
    if args.out_indices:
        Path(args.out_indices).write_text(json.dumps(jsonable(report), indent=2) + "\n")
        _emit({"written": {"aligned": args.out_aligned, "indices": args.out_indices}}, None)
    else:
        _emit(report, None)
    return 0


def _cmd_fuse(args) -> int:
    weights = _load_weights(args)
    main_pyramid = load_pyramid(args.main_pyramid)
    aligned = load_pyramid(args.aligned)
    x1 = read_fmap(args.x1)
    phi1 = fuse_pyramid(main_pyramid, aligned, weights.fusion)
    x2 = reconstruct(phi1, x1, weights.fusion)
    save_image(args.out_image, x2)
    written = {"image": args.out_image}
    if args.out_fmap:
        write_fmap(args.out_fmap, x2)
        written["fmap"] = args.out_fmap
    _emit({"written": written}, None)
    return 0


def _cmd_run(args) -> int:
    config = _config_from_args(args)
    main_image = load_image(args.main)
    side_image = load_image(args.side)
    x1, x2, report = run_pipeline(main_image, side_image, config)
    if args.out_x1:
        save_image(args.out_x1, x1)
    if args.out_x2:
        save_image(args.out_x2, x2)
    _emit(report, args.out)
    return 0


def _cmd_eval(args) -> int:
    a = load_image(args.image_a)
    b = load_image(args.image_b)
    report = {
        "schema": "featmatch-pair-v1",
        "bpp": None,
        "psnr_db": metrics.psnr(a, b, peak=args.peak),
        "ms_ssim": metrics.ms_ssim(a, b),
        "bd_rate_p": None,
        "bd_rate_m": None,
        "pr": None,
    }
    _emit(report, args.out)
    return 0


def _cmd_sweep(args) -> int:
    config = _config_from_args(args)
    factors = [float(f) for f in args.factors.split(",")]
    report = robustness_sweep(
        load_image(args.main), load_image(args.side), config, factors,
        kind=args.kind, metric=args.metric,
    )
    _emit(report, args.out)
    return 0


def _cmd_bench(args) -> int:
    config = _config_from_args(args)
    report = bench_reuse(load_image(args.main), load_image(args.side), config, repetitions=args.reps)
    _emit(report, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-weights", help="write a seeded weights bundle")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--channels", type=int, default=128)
    p.add_argument("--q", type=float, default=None)
    p.add_argument("--out", required=True, help="bundle directory to create")
    p.set_defaults(func=_cmd_gen_weights)

    p = sub.add_parser("encode", help="encode an image to a quantized latent")
    p.add_argument("image")
    p.add_argument("--out", required=True, help="output path prefix (.fmap/.json)")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="decode a latent to the first-stage image")
    p.add_argument("latent", help="latent path or prefix written by encode")
    p.add_argument("--out-image", required=True)
    p.add_argument("--out-pyramid", default=None, help="also write the decoded feature pyramid")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("match", help="align lossless side features to the main features")
    p.add_argument("--main", required=True, help="level-1 .fmap or pyramid bundle dir")
    p.add_argument("--side", required=True, help="level-1 .fmap or pyramid bundle dir")
    p.add_argument("--lossless", required=True, help="lossless side pyramid bundle dir")
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--no-reuse", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-aligned", required=True, help="aligned pyramid bundle dir")
    p.add_argument("--out-indices", default=None, help="JSON file for the best indices")
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("fuse", help="fuse aligned features and reconstruct the image")
    p.add_argument("--main-pyramid", required=True)
    p.add_argument("--aligned", required=True)
    p.add_argument("--x1", required=True, help="first-stage image as .fmap")
    p.add_argument("--out-image", required=True)
    p.add_argument("--out-fmap", default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("run", help="end-to-end decode with side information")
    p.add_argument("main")
    p.add_argument("side")
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")
    p.add_argument("--out-x1", default=None)
    p.add_argument("--out-x2", default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="PSNR / MS-SSIM between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--peak", type=float, default=1.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="robustness sweep over side-image perturbations")
    p.add_argument("main")
    p.add_argument("side")
    p.add_argument("--kind", choices=("brightness", "scale"), default="brightness")
    p.add_argument("--factors", default="1.0,0.8,0.6", help="comma-separated factors incl. 1.0")
    p.add_argument("--metric", choices=("ms_ssim", "psnr"), default="ms_ssim")
    p.add_argument("--out", default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("bench", help="reuse vs per-level matching benchmark")
    p.add_argument("main")
    p.add_argument("side")
    p.add_argument("--reps", type=int, default=9)
    p.add_argument("--out", default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:  # includes WeightsError
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GeometryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
