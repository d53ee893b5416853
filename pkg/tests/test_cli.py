"""CLI subcommands: files produced, JSON reports, exit codes."""

import json

import numpy as np
import pytest

from featmatch.cli import main
from featmatch.imageio import save_image
from featmatch.pipeline import make_stereo_pair
from featmatch.tensor import load_pyramid

CONFIG_FLAGS = ["--patch-size", "8", "--channels", "4", "--q", "0.02", "--seed", "11"]


@pytest.fixture(scope="module")
def images(tmp_path_factory):
    root = tmp_path_factory.mktemp("imgs")
    main, side = make_stereo_pair(64, 96, shift=5, seed=3)
    save_image(root / "main.png", main)
    save_image(root / "side.png", side)
    return root / "main.png", root / "side.png"


def run_cli(args, capsys):
    code = main([str(a) for a in args])
    out = capsys.readouterr().out
    return code, out


class TestGenWeights:
    def test_writes_bundle(self, tmp_path, capsys):
        code, out = run_cli(["gen-weights", "--seed", "5", "--channels", "4",
                             "--out", tmp_path / "w"], capsys)
        assert code == 0
        assert (tmp_path / "w" / "manifest.json").is_file()
        assert json.loads(out)["channels"] == 4


class TestEncodeDecode:
    def test_encode_then_decode(self, tmp_path, capsys, images):
        main_png, _ = images
        code, out = run_cli(["encode", main_png, "--out", tmp_path / "latent", *CONFIG_FLAGS], capsys)
        assert code == 0
        report = json.loads(out)
        assert (tmp_path / "latent.fmap").is_file()
        assert report["bpp_entropy_bound"] >= 0.0

        code, _ = run_cli(["decode", tmp_path / "latent", "--out-image", tmp_path / "x1.png",
                           "--out-pyramid", tmp_path / "pyr", *CONFIG_FLAGS], capsys)
        assert code == 0
        assert (tmp_path / "x1.png").is_file()
        pyramid = load_pyramid(tmp_path / "pyr")
        assert pyramid.level(1).shape == (32, 48, 4)


class TestRun:
    def test_end_to_end_report(self, tmp_path, capsys, images):
        main_png, side_png = images
        code, _ = run_cli(["run", main_png, side_png, "--out", tmp_path / "report.json",
                           "--out-x2", tmp_path / "x2.png", *CONFIG_FLAGS, "--no-timings"], capsys)
        assert code == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["schema"] == "featmatch-report-v1"
        assert report["stage1"]["ms_ssim"] is not None
        assert (tmp_path / "x2.png").is_file()

    def test_geometry_exit_code(self, tmp_path, capsys):
        tiny, tiny2 = make_stereo_pair(16, 16, shift=1, seed=2)
        save_image(tmp_path / "a.png", tiny)
        save_image(tmp_path / "b.png", tiny2)
        # patch 16 requires 32-multiples; a 16x16 input cannot be cropped to one
        code = main(["run", str(tmp_path / "a.png"), str(tmp_path / "b.png"),
                     "--patch-size", "16", "--channels", "2"])
        assert code == 3

    def test_missing_input_exit_code(self, tmp_path):
        code = main(["run", str(tmp_path / "missing.png"), str(tmp_path / "missing2.png")])
        assert code == 2

    def test_config_exit_code(self, images):
        main_png, side_png = images
        code = main(["run", str(main_png), str(side_png), "--alpha", "7", "--channels", "2"])
        assert code == 4


class TestMatchFuse:
    def test_match_then_fuse(self, tmp_path, capsys, images):
        main_png, side_png = images
        # produce pyramids via decode and an extractor run through `run`-side files
        code, _ = run_cli(["encode", main_png, "--out", tmp_path / "lm", *CONFIG_FLAGS], capsys)
        assert code == 0
        code, _ = run_cli(["decode", tmp_path / "lm", "--out-image", tmp_path / "x1.png",
                           "--out-pyramid", tmp_path / "main_pyr", *CONFIG_FLAGS], capsys)
        assert code == 0
        code, _ = run_cli(["encode", side_png, "--out", tmp_path / "ls", *CONFIG_FLAGS], capsys)
        assert code == 0
        code, _ = run_cli(["decode", tmp_path / "ls", "--out-image", tmp_path / "y1.png",
                           "--out-pyramid", tmp_path / "side_pyr", *CONFIG_FLAGS], capsys)
        assert code == 0

        # lossless side pyramid comes from the library (no CLI subcommand for
        # the extractor alone); write it as a bundle for the match input
        from featmatch.extractor import extract_lossless_features, seeded_codec_weights
        from featmatch.imageio import center_crop_multiple, load_image
        from featmatch.tensor import save_pyramid

        side_img = center_crop_multiple(load_image(side_png), 16)
        lossless = extract_lossless_features(side_img, seeded_codec_weights(11, 4))
        save_pyramid(tmp_path / "lossless_pyr", lossless)

        main1 = tmp_path / "main_pyr" / "level1.fmap"
        side1 = tmp_path / "side_pyr" / "level1.fmap"
        code, out = run_cli(["match", "--main", main1, "--side", side1,
                             "--lossless", tmp_path / "lossless_pyr",
                             "--patch-size", "8", "--out-aligned", tmp_path / "aligned"], capsys)
        assert code == 0
        aligned = load_pyramid(tmp_path / "aligned")
        assert aligned.level(1).shape == (32, 48, 4)

        # no-reuse mode needs pyramid bundles
        code, out = run_cli(["match", "--main", tmp_path / "main_pyr", "--side", tmp_path / "side_pyr",
                             "--lossless", tmp_path / "lossless_pyr", "--patch-size", "8",
                             "--no-reuse", "--out-aligned", tmp_path / "aligned_nr",
                             "--out-indices", tmp_path / "indices.json"], capsys)
        assert code == 0
        indices = json.loads((tmp_path / "indices.json").read_text())
        assert set(indices["best_indices"].keys()) == {"1", "2", "3", "4"}

        # fuse the aligned pyramid back into an image; the first-stage
        # image goes in as an fmap
        from featmatch.extractor import decode_multiscale, encode
        from featmatch.tensor import write_fmap

        weights = seeded_codec_weights(11, 4)
        latent = encode(center_crop_multiple(load_image(main_png), 16), weights, 0.02)
        _, x1_img = decode_multiscale(latent, weights)
        write_fmap(tmp_path / "x1.fmap", np.clip(x1_img, 0, 1))
        code, _ = run_cli(["fuse", "--main-pyramid", tmp_path / "main_pyr",
                           "--aligned", tmp_path / "aligned",
                           "--x1", tmp_path / "x1.fmap",
                           "--out-image", tmp_path / "x2.png", *CONFIG_FLAGS], capsys)
        assert code == 0
        assert (tmp_path / "x2.png").is_file()

    def test_no_reuse_requires_pyramids(self, tmp_path, capsys, images):
        main_png, _ = images
        code, _ = run_cli(["encode", main_png, "--out", tmp_path / "l", *CONFIG_FLAGS], capsys)
        assert code == 0
        code, _ = run_cli(["decode", tmp_path / "l", "--out-image", tmp_path / "i.png",
                           "--out-pyramid", tmp_path / "pyr", *CONFIG_FLAGS], capsys)
        assert code == 0
        level1 = tmp_path / "pyr" / "level1.fmap"
        code = main(["match", "--main", str(level1), "--side", str(level1),
                     "--lossless", str(tmp_path / "pyr"), "--patch-size", "8",
                     "--no-reuse", "--out-aligned", str(tmp_path / "out")])
        assert code == 2


class TestEval:
    def test_pair_report(self, tmp_path, capsys, images):
        main_png, side_png = images
        code, out = run_cli(["eval", main_png, side_png], capsys)
        assert code == 0
        report = json.loads(out)
        assert report["schema"] == "featmatch-pair-v1"
        assert 0.0 <= report["ms_ssim"] <= 1.0
        assert report["bpp"] is None

    def test_identical_images_psnr_serialized_null(self, tmp_path, capsys, images):
        main_png, _ = images
        code, out = run_cli(["eval", main_png, main_png], capsys)
        assert code == 0
        report = json.loads(out)
        assert report["psnr_db"] is None  # +inf sentinel
        assert report["ms_ssim"] == 1.0


class TestSweepBench:
    def test_sweep_report(self, tmp_path, capsys, images):
        main_png, side_png = images
        code, out = run_cli(["sweep", main_png, side_png, "--factors", "1.0,0.8",
                             "--kind", "brightness", *CONFIG_FLAGS, "--no-timings"], capsys)
        assert code == 0
        report = json.loads(out)
        assert len(report["rows"]) == 2

    def test_bench_report(self, tmp_path, capsys, images):
        main_png, side_png = images
        code, out = run_cli(["bench", main_png, side_png, "--reps", "5",
                             *CONFIG_FLAGS, "--no-timings"], capsys)
        assert code == 0
        report = json.loads(out)
        assert report["level1_identical"] is True
        assert report["repetitions"] == 5
