"""Pipeline driver, perturbations, sweep, benchmark, bundles, image IO."""

import json

import numpy as np
import pytest

from featmatch.bundles import load_weights_bundle, save_weights_bundle, seeded_pipeline_weights
from featmatch.errors import ConfigError, WeightsError
from featmatch.imageio import center_crop_multiple, load_image, save_image
from featmatch.pipeline import (
    PerturbSpec,
    PipelineConfig,
    bench_reuse,
    bilinear_resize,
    make_stereo_pair,
    perturb,
    robustness_sweep,
    run_pipeline,
)

SMALL = dict(patch_size=8, channels=4, q=0.02, seed=11, include_timings=False)


@pytest.fixture(scope="module")
def stereo():
    return make_stereo_pair(64, 96, shift=5, seed=3)


class TestConfig:
    def test_patch_size_whitelist(self):
        for b in (8, 16, 32):
            assert PipelineConfig(patch_size=b, channels=2).patch_size == b
        with pytest.raises(ConfigError):
            PipelineConfig(patch_size=12)

    def test_sigma_defaults_to_twice_patch(self):
        assert PipelineConfig(patch_size=16, channels=2).sigma == 32.0

    def test_crop_multiple_covers_matching(self):
        assert PipelineConfig(patch_size=8, channels=2).crop_multiple == 16
        assert PipelineConfig(patch_size=16, channels=2).crop_multiple == 32
        assert PipelineConfig(patch_size=32, channels=2).crop_multiple == 64

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            PipelineConfig(q=0.0, channels=2)
        with pytest.raises(ConfigError):
            PipelineConfig(alpha=2.0, channels=2)
        with pytest.raises(ConfigError):
            PipelineConfig(workers=0, channels=2)


class TestRunPipeline:
    def test_report_schema_and_shapes(self, stereo):
        main, side = stereo
        config = PipelineConfig(**SMALL)
        x1, x2, report = run_pipeline(main, side, config)
        assert x1.shape == main.shape and x2.shape == main.shape
        assert x1.min() >= 0 and x1.max() <= 1 and x2.min() >= 0 and x2.max() <= 1
        for key in ("schema", "config", "crop", "bpp_entropy_bound", "rd_loss",
                    "ms_ssim_scales", "stage1", "stage2"):
            assert key in report
        for stage in ("stage1", "stage2"):
            for metric in ("psnr_db", "ms_ssim", "mse"):
                assert metric in report[stage]
        assert "timings" not in report  # include_timings=False

    def test_timings_listed_when_enabled(self, stereo):
        main, side = stereo
        config = PipelineConfig(**{**SMALL, "include_timings": True})
        _, _, report = run_pipeline(main, side, config)
        for phase in ("encode_main_s", "decode_main_s", "encode_side_s", "decode_side_s",
                      "extract_lossless_s", "matching_s", "gaussian_mask_s",
                      "fusion_s", "reconstruct_s", "metrics_s"):
            assert phase in report["timings"]

    def test_deterministic_rerun_bit_identical(self, stereo):
        main, side = stereo
        config = PipelineConfig(**SMALL)
        x1a, x2a, ra = run_pipeline(main, side, config)
        x1b, x2b, rb = run_pipeline(main, side, config)
        assert np.array_equal(x2a, x2b) and np.array_equal(x1a, x1b)
        assert json.dumps(ra) == json.dumps(rb)

    def test_worker_count_does_not_change_outputs(self, stereo):
        main, side = stereo
        one = PipelineConfig(**SMALL)
        many = PipelineConfig(**{**SMALL, "workers": 4})
        _, x2_one, r_one = run_pipeline(main, side, one)
        _, x2_many, r_many = run_pipeline(main, side, many)
        assert np.array_equal(x2_one, x2_many)
        r_one["config"].pop("workers")
        r_many["config"].pop("workers")
        assert json.dumps(r_one) == json.dumps(r_many)

    def test_zero_fusion_weights_never_hurt_stage1(self, stereo):
        """With a zeroed fusion net the second stage equals the first."""
        from featmatch.bundles import PipelineWeights
        from featmatch.extractor import seeded_codec_weights
        from featmatch.fusion import zeroed_fusion_weights

        main, side = stereo
        config = PipelineConfig(**SMALL)
        weights = PipelineWeights(
            codec=seeded_codec_weights(config.seed, config.channels),
            fusion=zeroed_fusion_weights(config.channels),
            q=config.q,
        )
        _, _, report = run_pipeline(main, side, config, weights=weights)
        assert report["stage2"]["psnr_db"] >= report["stage1"]["psnr_db"] - 1e-6
        assert report["stage2"]["ms_ssim"] >= report["stage1"]["ms_ssim"] - 1e-6

    def test_crop_to_common_multiple(self):
        main, side = make_stereo_pair(70, 100, shift=3, seed=4)
        config = PipelineConfig(**SMALL)
        x1, _, report = run_pipeline(main, side, config)
        assert report["crop"]["used"] == [64, 96]
        assert x1.shape == (64, 96, 3)

    def test_no_reuse_variant_runs(self, stereo):
        main, side = stereo
        config = PipelineConfig(**{**SMALL, "reuse": False})
        _, _, report = run_pipeline(main, side, config)
        assert report["config"]["reuse"] is False


class TestPerturb:
    def test_brightness_identity(self):
        img = np.random.default_rng(5).uniform(size=(16, 16, 3)).astype(np.float32)
        assert np.array_equal(perturb(img, PerturbSpec("brightness", 1.0)), img)

    def test_scale_identity(self):
        img = np.random.default_rng(6).uniform(size=(16, 16, 3)).astype(np.float32)
        out = perturb(img, PerturbSpec("scale", 1.0))
        np.testing.assert_allclose(out, img, atol=1e-6)

    def test_brightness_half_on_ones(self):
        img = np.ones((8, 8, 3), np.float32)
        assert (perturb(img, PerturbSpec("brightness", 0.5)) == 0.5).all()

    def test_brightness_clamps(self):
        img = np.full((8, 8, 3), 0.9, np.float32)
        assert (perturb(img, PerturbSpec("brightness", 2.0)) == 1.0).all()

    def test_scale_preserves_dims(self):
        img = np.random.default_rng(7).uniform(size=(32, 48, 3)).astype(np.float32)
        for factor in (0.75, 0.5, 1.25, 2.0):
            assert perturb(img, PerturbSpec("scale", factor)).shape == img.shape

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            PerturbSpec("rotate", 1.0)
        with pytest.raises(ConfigError):
            PerturbSpec("scale", 0.0)

    def test_bilinear_resize_constant_preserved(self):
        img = np.full((10, 10, 3), 0.7, np.float32)
        out = bilinear_resize(img, 7, 13)
        np.testing.assert_allclose(out, 0.7, atol=1e-6)


class TestRobustnessSweep:
    def test_single_factor_table(self, stereo):
        main, side = stereo
        config = PipelineConfig(**SMALL)
        report = robustness_sweep(main, side, config, [1.0])
        assert len(report["rows"]) == 1
        row = report["rows"][0]
        assert row["factor"] == 1.0
        assert row["pr_percent"] in (0.0, None)

    def test_requires_baseline_factor(self, stereo):
        main, side = stereo
        with pytest.raises(ConfigError):
            robustness_sweep(*stereo, PipelineConfig(**SMALL), [0.8, 0.6])

    def test_brightness_sweep_rows(self, stereo):
        main, side = stereo
        config = PipelineConfig(**SMALL)
        report = robustness_sweep(main, side, config, [1.0, 0.8], kind="brightness")
        assert [row["factor"] for row in report["rows"]] == [0.8, 1.0]
        baseline = report["baseline_improvement"]
        for row in report["rows"]:
            if baseline not in (None, 0.0):
                if row["factor"] == 1.0:
                    assert row["pr_percent"] == pytest.approx(0.0, abs=1e-9)
                else:
                    assert row["pr_percent"] is not None


class TestBenchReuse:
    def test_requires_five_repetitions(self, stereo):
        main, side = stereo
        with pytest.raises(ConfigError):
            bench_reuse(main, side, PipelineConfig(**SMALL), repetitions=1)

    def test_report_structure_and_directions(self, stereo):
        main, side = stereo
        config = PipelineConfig(**SMALL)
        report = bench_reuse(main, side, config, repetitions=5)
        assert report["level1_identical"] is True
        assert report["reuse"]["field_bytes"] < report["per_level"]["field_bytes"]
        for level in ("2", "3", "4"):
            assert 0.0 <= report["index_disagreement_rate"][level] <= 1.0
        assert report["reuse"]["matching_s"] > 0
        assert report["per_level"]["matching_s"] > 0


class TestWeightsBundle:
    def test_round_trip(self, tmp_path):
        weights = seeded_pipeline_weights(13, 4, q=0.5)
        save_weights_bundle(tmp_path / "w", weights)
        loaded = load_weights_bundle(tmp_path / "w")
        assert loaded.q == 0.5
        assert loaded.codec.channels == 4
        for sa, sb in zip(weights.codec.encoder, loaded.codec.encoder):
            assert np.array_equal(sa.kernel, sb.kernel)
            assert np.array_equal(sa.bias, sb.bias)
        for level in (1, 2, 3, 4):
            wa, wb = weights.fusion.blocks[level], loaded.fusion.blocks[level]
            assert np.array_equal(wa[0].conv1_kernel, wb[0].conv1_kernel)
            assert np.array_equal(wa[0].projection, wb[0].projection)
        assert np.array_equal(weights.fusion.head.kernel, loaded.fusion.head.kernel)

    def test_loaded_weights_reproduce_pipeline(self, tmp_path, stereo):
        main, side = stereo
        config = PipelineConfig(**SMALL)
        _, x2_seed, _ = run_pipeline(main, side, config)
        save_weights_bundle(tmp_path / "w", seeded_pipeline_weights(SMALL["seed"], SMALL["channels"], SMALL["q"]))
        file_config = PipelineConfig(**{**SMALL, "weights_path": str(tmp_path / "w")})
        _, x2_file, _ = run_pipeline(main, side, file_config)
        assert np.array_equal(x2_seed, x2_file)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(WeightsError):
            load_weights_bundle(tmp_path)

    def test_corrupt_shape_rejected(self, tmp_path):
        weights = seeded_pipeline_weights(1, 2)
        save_weights_bundle(tmp_path / "w", weights)
        manifest = json.loads((tmp_path / "w" / "manifest.json").read_text())
        manifest["codec"]["encoder"][0]["out"] = 99
        (tmp_path / "w" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(WeightsError):
            load_weights_bundle(tmp_path / "w")


class TestImageIo:
    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        img = (rng.integers(0, 256, size=(20, 30, 3)) / 255.0).astype(np.float32)
        save_image(tmp_path / "x.png", img)
        np.testing.assert_allclose(load_image(tmp_path / "x.png"), img, atol=1e-6)

    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        img = (rng.integers(0, 256, size=(12, 10, 3)) / 255.0).astype(np.float32)
        save_image(tmp_path / "x.ppm", img)
        np.testing.assert_allclose(load_image(tmp_path / "x.ppm"), img, atol=1e-6)

    def test_center_crop(self):
        img = np.arange(7 * 9 * 3, dtype=np.float32).reshape(7, 9, 3)
        out = center_crop_multiple(img, 4)
        assert out.shape == (4, 8, 3)
        assert np.array_equal(out, img[1:5, 0:8])

    def test_missing_file(self, tmp_path):
        from featmatch.errors import InputError

        with pytest.raises(InputError):
            load_image(tmp_path / "nope.png")


class TestStereoPair:
    def test_shift_relation(self):
        main, side = make_stereo_pair(32, 64, shift=6, seed=1)
        assert np.array_equal(side[:, 6:], main[:, : 64 - 6])

    def test_deterministic(self):
        a = make_stereo_pair(16, 32, shift=2, seed=5)
        b = make_stereo_pair(16, 32, shift=2, seed=5)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_range(self):
        main, side = make_stereo_pair(16, 32, shift=2, seed=6)
        for img in (main, side):
            assert img.min() >= 0.0 and img.max() <= 1.0
