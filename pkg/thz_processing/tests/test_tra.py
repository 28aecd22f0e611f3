"""
Tests for the trust-region fitter, its initialisation and volume driver
"""

import numpy as np
import pytest

from thz_processing.data import (
    NoiseSpec,
    ParamMap,
    ParamRanges,
    THzVolume,
    sample_truth,
    step_layout,
    synthesize_volume,
)
from thz_processing.errors import DimensionMismatchError, SolverError
from thz_processing.model import PixelParams, forward, pixel_loss
from thz_processing.tra import (
    STATUS_GRADIENT,
    STATUS_MAX_ITERS,
    STATUSES,
    FitOptions,
    default_fit_options,
    dogleg_step,
    fit_pixel,
    fit_volume,
    init_heuristic,
)

from conftest import random_params


class TestInitHeuristic:
    def test_exact_on_grid_pulse(self, cfg):
        g = forward(PixelParams(2.0, 0.3, 45.0, 1.0), cfg)
        p0 = init_heuristic(g, cfg)
        assert p0.mu == 45.0
        assert p0.amplitude == pytest.approx(2.0, rel=1e-12)
        assert p0.phi == pytest.approx(1.0, abs=1e-6)

    def test_width_estimate_near_truth(self, cfg):
        g = forward(PixelParams(1.0, 0.2, 40.0, 0.0), cfg)
        assert init_heuristic(g, cfg).sigma == pytest.approx(0.2, rel=0.2)

    def test_zero_signal(self, cfg):
        p0 = init_heuristic(np.zeros((91, 2)), cfg)
        assert (p0.amplitude, p0.sigma, p0.mu, p0.phi) == (0.0, 0.5, 45.0, 0.0)

    def test_rejects_wrong_shape(self, cfg):
        with pytest.raises(DimensionMismatchError):
            init_heuristic(np.zeros((80, 2)), cfg)

    def test_beats_random_start(self, cfg, ranges):
        rng = np.random.default_rng(7)
        truths = random_params(rng, ranges, 1000)
        starts = random_params(rng, ranges, 1000)
        wins = 0
        for truth, start in zip(truths, starts):
            g = forward(truth, cfg) + 0.05 * rng.normal(size=(91, 2))
            heuristic = init_heuristic(g, cfg)
            wins += pixel_loss(heuristic, g, cfg) < pixel_loss(start, g, cfg)
        assert wins / 1000 > 0.9


class TestDogleg:
    def test_step_within_radius(self, rng):
        for _ in range(50):
            jac = rng.normal(size=(20, 4))
            res = rng.normal(size=20)
            radius = rng.uniform(0.01, 2.0)
            assert np.linalg.norm(dogleg_step(jac, res, radius)) <= radius * (1 + 1e-9)

    def test_full_gauss_newton_step_inside_radius(self, rng):
        jac = rng.normal(size=(20, 4))
        res = rng.normal(size=20)
        expected = np.linalg.lstsq(jac, -res, rcond=None)[0]
        np.testing.assert_allclose(dogleg_step(jac, res, 1e6), expected, rtol=1e-10)

    def test_zero_gradient(self, rng):
        assert not dogleg_step(rng.normal(size=(20, 4)), np.zeros(20), 1.0).any()

    def test_singular_jacobian_falls_back(self, rng):
        jac = rng.normal(size=(20, 4))
        jac[:, 3] = 0.0
        res = rng.normal(size=20)
        step = dogleg_step(jac, res, 0.5)
        assert np.isfinite(step).all()
        assert np.linalg.norm(step) <= 0.5 * (1 + 1e-9)
        assert np.sum((res + jac @ step) ** 2) < np.sum(res ** 2)


class TestFitOptions:
    def test_rejects_zero_iterations(self, cfg):
        with pytest.raises(ValueError):
            default_fit_options(cfg, max_iters=0)

    def test_default_bounds(self, cfg):
        opts = default_fit_options(cfg)
        assert opts.periodic_phase
        assert opts.lower[0] == 0.0 and opts.lower[1] == 1e-3
        assert (opts.lower[2], opts.upper[2]) == (0.0, 90.0)
        assert opts.lower[3] == -np.inf and opts.upper[3] == np.inf

    def test_narrow_phase_is_not_periodic(self):
        opts = FitOptions(bounds=ParamRanges(phi=(-1.0, 1.0)))
        assert not opts.periodic_phase
        assert opts.lower[3] == -1.0


class TestFitPixel:
    def test_truth_start_converges_immediately(self, cfg):
        p = PixelParams(2.0, 0.4, 44.6, 0.8)
        fitted, report = fit_pixel(forward(p, cfg), p, default_fit_options(cfg), cfg)
        assert report.status == STATUS_GRADIENT
        assert report.iterations == 0
        assert report.final_loss == 0.0
        np.testing.assert_allclose(fitted.as_array(), p.as_array(), atol=1e-12)

    def test_noiseless_recovery_from_heuristic(self, cfg, ranges):
        rng = np.random.default_rng(11)
        opts = default_fit_options(cfg)
        recovered = 0
        for truth in random_params(rng, ranges, 500):
            g = forward(truth, cfg)
            fitted, report = fit_pixel(g, init_heuristic(g, cfg), opts, cfg)
            recovered += (
                report.final_loss < 1e-10
                and abs(fitted.mu - truth[2]) < 0.01
                and abs(fitted.amplitude - truth[0]) < 1e-4 * truth[0]
                and abs(fitted.sigma - truth[1]) < 1e-4 * truth[1]
            )
        assert recovered / 500 > 0.95

    def test_loss_never_increases(self, cfg, ranges):
        rng = np.random.default_rng(12)
        opts = default_fit_options(cfg)
        for truth, start in zip(random_params(rng, ranges, 30), random_params(rng, ranges, 30)):
            g = forward(truth, cfg) + 0.05 * rng.normal(size=(91, 2))
            _, report = fit_pixel(g, start, opts, cfg)
            assert report.final_loss <= report.initial_loss
            assert report.status in STATUSES

    def test_single_iteration(self, cfg):
        g = forward(PixelParams(2.0, 0.4, 44.6, 0.8), cfg)
        start = np.array([1.0, 0.5, 46.0, 0.0])
        _, report = fit_pixel(g, start, default_fit_options(cfg, max_iters=1), cfg)
        assert report.iterations <= 1
        assert report.final_loss <= report.initial_loss

    def test_iteration_cap_reported(self, cfg):
        g = forward(PixelParams(2.0, 0.4, 44.6, 0.8), cfg)
        _, report = fit_pixel(g, np.array([0.5, 0.9, 30.0, 2.0]), default_fit_options(cfg, max_iters=2), cfg)
        assert report.iterations <= 2
        if report.iterations == 2:
            assert report.status in (STATUS_MAX_ITERS, STATUS_GRADIENT)

    def test_respects_bounds(self, cfg):
        rng = np.random.default_rng(13)
        g = forward(PixelParams(4.0, 0.6, 60.0, 0.3), cfg) + 0.05 * rng.normal(size=(91, 2))
        bounds = ParamRanges(amplitude=(0.5, 2.0), sigma=(0.1, 0.5), mu=(40.0, 50.0), phi=(-0.5, 0.5))
        fitted, _ = fit_pixel(g, np.array([1.0, 0.3, 45.0, 0.0]), FitOptions(bounds=bounds), cfg)
        values = fitted.as_array()
        assert (values >= bounds.lower - 1e-12).all() and (values <= bounds.upper + 1e-12).all()

    def test_out_of_bounds_start_is_projected(self, cfg):
        g = forward(PixelParams(2.0, 0.4, 44.6, 0.8), cfg)
        fitted, report = fit_pixel(g, np.array([2.0, 0.4, 150.0, 0.8]), default_fit_options(cfg), cfg)
        assert 0.0 <= fitted.mu <= 90.0
        assert np.isfinite(report.initial_loss)

    def test_invalid_start(self, cfg):
        with pytest.raises(SolverError, match="invalid start"):
            fit_pixel(np.zeros((91, 2)), np.array([np.nan, 0.5, 45.0, 0.0]), default_fit_options(cfg), cfg)

    def test_deterministic(self, cfg):
        rng = np.random.default_rng(14)
        g = forward(PixelParams(1.2, 0.7, 33.3, -2.5), cfg) + 0.05 * rng.normal(size=(91, 2))
        opts = default_fit_options(cfg)
        a, ra = fit_pixel(g, init_heuristic(g, cfg), opts, cfg)
        b, rb = fit_pixel(g, init_heuristic(g, cfg), opts, cfg)
        assert a == b
        assert (ra.final_loss, ra.iterations, ra.status) == (rb.final_loss, rb.iterations, rb.status)

    def test_phase_output_wrapped(self, cfg):
        p = PixelParams(2.0, 0.4, 44.6, 3.1)
        g = forward(p, cfg)
        fitted, _ = fit_pixel(g, np.array([2.0, 0.4, 44.6, 2.6]), default_fit_options(cfg), cfg)
        assert -np.pi <= fitted.phi < np.pi


class TestFitVolume:
    def test_noiseless_volume(self, noiseless_volume, cfg):
        truth, volume = noiseless_volume
        pm, reports = fit_volume(volume, default_fit_options(cfg))
        assert pm.shape == truth.shape
        assert np.mean(reports.final_loss < 1e-10) >= 0.95
        assert (reports.final_loss <= reports.initial_loss).all()

    def test_truth_initialisation_needs_no_iterations(self, noiseless_volume, cfg):
        truth, volume = noiseless_volume
        pm, reports = fit_volume(volume, default_fit_options(cfg), init_source=truth)
        assert not reports.iterations.any()
        np.testing.assert_allclose(pm.params, truth.params, atol=1e-12)

    def test_recovers_sharp_depth_steps(self, cfg):
        truth, masks = step_layout(10, 2, cfg, n_steps=5, seed=4)
        volume = synthesize_volume(truth, cfg, NoiseSpec(sigma_noise=0.0))
        pm, _ = fit_volume(volume, default_fit_options(cfg))
        for k in range(5):
            region = masks[f"step{k}"].mask
            np.testing.assert_allclose(pm.mu[region], truth.mu[region], atol=0.01)
        edges = masks["edges"].mask
        np.testing.assert_allclose(pm.mu[edges], truth.mu[edges], atol=0.01)

    def test_refinement_never_worsens_initial_map(self, noisy_volume, cfg):
        truth, volume = noisy_volume
        rng = np.random.default_rng(15)
        perturbed = truth.params + rng.normal(scale=[0.1, 0.02, 0.3, 0.2], size=truth.params.shape)
        perturbed[..., 0] = np.abs(perturbed[..., 0])
        perturbed[..., 1] = np.abs(perturbed[..., 1])
        start = ParamMap(perturbed)
        _, reports = fit_volume(volume, default_fit_options(cfg), init_source=start)
        start_losses = pixel_loss(start.params, volume.data, cfg)
        np.testing.assert_allclose(reports.initial_loss, start_losses, rtol=1e-12)
        assert (reports.final_loss <= start_losses).all()

    def test_parallel_matches_sequential(self, cfg, ranges):
        truth = sample_truth(21, ranges, 4, 3)
        volume = synthesize_volume(truth, cfg, NoiseSpec(0.05, seed=21))
        opts = default_fit_options(cfg)
        seq, seq_reports = fit_volume(volume, opts, workers=1)
        par, par_reports = fit_volume(volume, opts, workers=2, chunk_rows=1)
        np.testing.assert_array_equal(seq.params, par.params)
        np.testing.assert_array_equal(seq_reports.iterations, par_reports.iterations)
        assert par_reports.workers == 2

    def test_pixels_are_independent(self, cfg, ranges):
        truth = sample_truth(22, ranges, 3, 4)
        volume = synthesize_volume(truth, cfg, NoiseSpec(0.05, seed=22))
        flipped = THzVolume(volume.data[::-1, ::-1], cfg)
        opts = default_fit_options(cfg)
        a, _ = fit_volume(volume, opts)
        b, _ = fit_volume(flipped, opts)
        np.testing.assert_array_equal(a.params, b.params[::-1, ::-1])

    def test_rejects_mismatched_initial_map(self, noiseless_volume, cfg):
        _, volume = noiseless_volume
        start = ParamMap(np.broadcast_to([1.0, 0.5, 45.0, 0.0], (2, 2, 4)))
        with pytest.raises(DimensionMismatchError):
            fit_volume(volume, default_fit_options(cfg), init_source=start)

    def test_rejects_unknown_init_source(self, noiseless_volume, cfg):
        _, volume = noiseless_volume
        with pytest.raises(ValueError):
            fit_volume(volume, default_fit_options(cfg), init_source="random")

    def test_summary(self, noisy_volume, cfg):
        _, volume = noisy_volume
        _, reports = fit_volume(volume, default_fit_options(cfg))
        summary = reports.summary()
        assert summary.loc[0, "pixels"] == 64
        assert sum(int(summary.loc[0, s]) for s in STATUSES) == 64
        assert summary.loc[0, "mean_final_loss"] <= summary.loc[0, "mean_initial_loss"]


@pytest.mark.slow
def test_desk_scale_noiseless_recovery(cfg, ranges):
    truth = sample_truth(31, ranges, 32, 32)
    volume = synthesize_volume(truth, cfg, NoiseSpec(0.0, seed=31))
    pm, reports = fit_volume(volume, default_fit_options(cfg))
    recovered = (reports.final_loss < 1e-10) & (np.abs(pm.mu - truth.mu) < 0.01)
    assert recovered.mean() >= 0.95
