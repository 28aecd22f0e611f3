"""
Tests for region losses, method comparison, parameter errors and profiles
"""

import json

import numpy as np
import pandas as pd
import pytest

from thz_processing.data import (
    NoiseSpec,
    ParamMap,
    RegionMask,
    THzVolume,
    material_layout,
    raw_intensity,
    sample_truth,
    synthesize_volume,
)
from thz_processing.encoder import EncoderArchitecture, infer_volume, init_weights
from thz_processing.errors import DimensionMismatchError
from thz_processing.evaluate import (
    MethodResult,
    compare_methods,
    homogeneity,
    line_profile,
    line_profile_frame,
    mask_partition_mean,
    param_errors,
    per_pixel_losses,
    region_average_loss,
    save_profile_csv,
)
from thz_processing.model import forward, pixel_loss
from thz_processing.tra import default_fit_options, fit_volume


def constant_map(n_x, n_y, params=(1.0, 0.5, 45.0, 0.0)):
    return ParamMap(np.broadcast_to(params, (n_x, n_y, 4)))


class TestPerPixelLosses:
    def test_zero_at_truth(self, noiseless_volume):
        truth, volume = noiseless_volume
        assert not per_pixel_losses(truth, volume).any()

    def test_matches_pixel_loss(self, noisy_volume, ranges):
        _, volume = noisy_volume
        guess = sample_truth(99, ranges, 8, 8)
        losses = per_pixel_losses(guess, volume)
        assert losses.shape == (8, 8)
        for x, y in [(0, 0), (3, 5), (7, 7)]:
            assert losses[x, y] == pytest.approx(pixel_loss(guess.params[x, y], volume.pixel(x, y), volume.cfg),
                                                 rel=1e-12)

    def test_single_pixel_volume(self, cfg):
        params = np.array([[[2.0, 0.5, 40.0, 0.0]]])
        volume = THzVolume(np.zeros((1, 1, 91, 2)), cfg)
        losses = per_pixel_losses(ParamMap(params), volume)
        assert losses[0, 0] == pytest.approx(np.sum(forward(params[0, 0], cfg) ** 2), rel=1e-14)

    def test_rejects_mismatched_map(self, noiseless_volume):
        _, volume = noiseless_volume
        with pytest.raises(DimensionMismatchError):
            per_pixel_losses(constant_map(2, 2), volume)


class TestRegionAverage:
    def test_all_pixels(self, rng):
        losses = rng.uniform(size=(6, 5))
        mask = RegionMask("all", np.ones((6, 5), dtype=bool))
        assert region_average_loss(losses, mask) == pytest.approx(losses.mean(), rel=1e-14)

    def test_single_pixel(self, rng):
        losses = rng.uniform(size=(6, 5))
        grid = np.zeros((6, 5), dtype=bool)
        grid[2, 3] = True
        assert region_average_loss(losses, RegionMask("one", grid)) == losses[2, 3]

    def test_partition_recovers_global_mean(self, cfg, rng):
        _, masks = material_layout(20, 20, cfg)
        losses = rng.uniform(size=(20, 20))
        combined = mask_partition_mean(losses, [masks["metal"], masks["pcb"]])
        assert combined == pytest.approx(losses.mean(), abs=1e-12)

    def test_rejects_mismatched_mask(self, rng):
        with pytest.raises(DimensionMismatchError):
            region_average_loss(rng.uniform(size=(4, 4)), RegionMask("r", np.ones((3, 4), dtype=bool)))


class TestCompareMethods:
    def test_single_pixel_table(self):
        pm = constant_map(1, 1)
        results = [
            MethodResult("tra", pm, 2.0, np.array([[0.5]]), mean_iterations=12.0),
            MethodResult("ae", pm, 0.1, np.array([[0.9]])),
            MethodResult("ae+tra", pm, 0.5, np.array([[0.4]]), mean_iterations=3.0),
        ]
        report = compare_methods(results, [RegionMask("all", np.ones((1, 1), dtype=bool))])
        assert list(report.losses.columns) == ["tra", "ae", "ae+tra"]
        assert report.losses.loc["all", "ae"] == 0.9
        assert report.timing.loc["ae", "speedup_vs_tra"] == pytest.approx(20.0)
        assert report.timing.loc["tra", "speedup_vs_tra"] == 1.0
        assert np.isnan(report.timing.loc["ae", "mean_iterations"])

    def test_regions_are_rows(self, cfg, rng):
        _, masks = material_layout(10, 10, cfg)
        pm = constant_map(10, 10)
        result = MethodResult("tra", pm, 1.0, rng.uniform(size=(10, 10)))
        report = compare_methods([result], list(masks.values()))
        assert list(report.losses.index) == ["all", "metal", "pcb"]

    def test_save_writes_all_views(self, tmp_path):
        pm = constant_map(2, 2)
        results = [MethodResult("tra", pm, 1.0, np.full((2, 2), 0.25)),
                   MethodResult("ae", pm, 0.5, np.full((2, 2), 0.5))]
        report = compare_methods(results, [RegionMask("all", np.ones((2, 2), dtype=bool))])
        written = report.save(tmp_path)
        assert set(written) == {"report.txt", "losses.csv", "timing.csv", "report.json"}
        assert "Average Loss" in (tmp_path / "report.txt").read_text()
        losses = pd.read_csv(tmp_path / "losses.csv", index_col="region")
        assert losses.loc["all", "ae"] == 0.5
        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["losses"]["all"]["tra"] == 0.25

    def test_rejects_negative_losses(self):
        with pytest.raises(ValueError):
            MethodResult("tra", constant_map(1, 1), 1.0, np.array([[-1.0]]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            MethodResult("tra", constant_map(2, 2), 1.0, np.zeros((3, 3)))


class TestParamErrors:
    def test_zero_for_identical_maps(self, ranges):
        truth = sample_truth(0, ranges, 4, 4)
        errors = param_errors(truth, truth)
        assert not errors.to_numpy().any()
        assert list(errors.index) == ["amplitude", "sigma", "mu", "phi"]

    def test_phase_difference_is_wrapped(self):
        truth = constant_map(3, 3, (1.0, 0.5, 45.0, 3.1))
        estimate = constant_map(3, 3, (1.0, 0.5, 45.0, -3.1))
        errors = param_errors(estimate, truth)
        assert errors.loc["phi", "mae"] == pytest.approx(2 * np.pi - 6.2, abs=1e-12)

    def test_depth_offset(self):
        truth = constant_map(4, 4, (1.0, 0.5, 40.0, 0.0))
        estimate = constant_map(4, 4, (1.0, 0.5, 40.5, 0.0))
        errors = param_errors(estimate, truth)
        assert errors.loc["mu", "mae"] == 0.5
        assert errors.loc["mu", "rmse"] == 0.5
        assert errors.loc["amplitude", "mae"] == 0.0


class TestLineProfile:
    def test_length_and_values(self, rng):
        grid = rng.uniform(size=(10, 6))
        profile = line_profile(grid, row=2, cols=range(3, 8))
        assert len(profile) == 5
        np.testing.assert_array_equal(profile["position"], [3, 4, 5, 6, 7])
        np.testing.assert_array_equal(profile["value"], grid[3:8, 2])

    def test_constant_grid(self):
        profile = line_profile(np.full((5, 5), 2.5), row=0)
        assert len(profile) == 5
        assert (profile["value"] == 2.5).all()
        assert homogeneity(profile["value"]) == 0.0

    @pytest.mark.parametrize("row,cols", [(6, None), (-1, None), (0, range(8, 12))])
    def test_out_of_range(self, row, cols):
        with pytest.raises(IndexError):
            line_profile(np.zeros((10, 6)), row=row, cols=cols)

    def test_frame_and_csv(self, tmp_path, rng):
        grids = {"raw": rng.uniform(size=(6, 4)), "tra": rng.uniform(size=(6, 4))}
        frame = line_profile_frame(grids, row=1)
        assert list(frame.columns) == ["position", "raw", "tra"]
        path = save_profile_csv(frame, tmp_path / "profile.csv")
        np.testing.assert_allclose(pd.read_csv(path)["tra"], grids["tra"][:, 1], rtol=1e-15)

    def test_fitted_intensity_is_more_homogeneous_than_raw(self, cfg):
        n_x = 16
        params = np.empty((n_x, 1, 4))
        params[:, 0] = [1.5, 0.4, 0.0, 0.3]
        params[:, 0, 2] = 40.0 + np.linspace(0.0, 3.0, n_x)
        volume = synthesize_volume(ParamMap(params), cfg, NoiseSpec(0.0))
        fitted, _ = fit_volume(volume, default_fit_options(cfg))
        raw_var = homogeneity(line_profile(raw_intensity(volume), row=0)["value"])
        fit_var = homogeneity(line_profile(fitted.intensity(), row=0)["value"])
        assert fit_var < raw_var


@pytest.mark.slow
def test_encoder_inference_outpaces_trust_region(cfg, ranges):
    truth = sample_truth(40, ranges, 16, 16)
    volume = synthesize_volume(truth, cfg, NoiseSpec(0.05, seed=40))
    _, reports = fit_volume(volume, default_fit_options(cfg))
    _, inference_time = infer_volume(init_weights(EncoderArchitecture(), seed=0), volume)
    assert inference_time <= reports.total_wall_time / 10
