# test_analysis.py - Histograms, Poisson fits, start-time scans, templates and error combination
import math

import numpy as np
import pytest

from analysis import (BackgroundEstimate, FitResult, FitWindow, LifetimeResult, ScanConfig, ScanPoint,
                      StartTimeScan, TimeHistogram, background_estimate, binned_decay_kernel,
                      build_template, combine_measurements, dark_background, decay_curve_table,
                      extract_lifetime, fit_decay, fold_and_invert, histogram_events, is_folded,
                      poisson_nll, poisson_score, predict_statistical_precision, scan_start_time,
                      scan_table, shift_response, wrapped_exponential)
from errors import ConfigurationError, DomainError, ExtractionError
from physics_sim import EventRecord
from studies import synthetic_decay_histogram

TAU_P12 = 3.148
TAU_P32 = 2.647


def exponential_histogram(tau_ns, amplitude=1e5, n_bins=124, background=0.0, wrapped=False):
    k = np.arange(n_bins)
    counts = amplitude * np.exp(-k * 0.1 / tau_ns)
    if wrapped:
        counts = counts / -math.expm1(-n_bins * 0.1 / tau_ns)
    return TimeHistogram(100.0, 0.0, counts + background)


def scan_of(taus, errors, converged=None, step=0.2):
    """Start-time scan assembled from given lifetimes and errors."""
    converged = [True] * len(taus) if converged is None else converged
    points = []
    for i, (tau, error, ok) in enumerate(zip(taus, errors, converged)):
        fit = FitResult(tau_ns=tau, tau_stat_ns=error, amplitude=1.0, amplitude_err=0.0, background_level=0.0,
                        background_err=0.0, covariance=np.eye(2), param_names=('amplitude', 'tau'), gof=1.0,
                        deviance=0.0, ndf=1, n_bins_used=10, converged=ok, model='wrapped',
                        window=FitWindow(i * step, 9.9), anchor_bin=0, start_bin=2 * i, bin_width_ns=0.1,
                        period_ns=12.4)
        points.append(ScanPoint(i * step, fit))
    return StartTimeScan(tuple(points))


class TestTimeHistogram:
    def test_negative_counts_rejected(self):
        with pytest.raises(DomainError):
            TimeHistogram(100.0, 0.0, np.array([1, -1, 2]))

    def test_counts_are_read_only(self):
        hist = TimeHistogram(100.0, 0.0, np.array([1, 2, 3]))
        with pytest.raises(ValueError):
            hist.counts[0] = 5

    def test_equality_includes_count_type(self):
        ints = TimeHistogram(100.0, 0.0, np.array([1, 2, 3]))
        assert ints == TimeHistogram(100.0, 0.0, np.array([1, 2, 3]))
        assert ints != TimeHistogram(100.0, 0.0, np.array([1.0, 2.0, 3.0]))

    def test_zero_bin_width_rejected(self):
        with pytest.raises(ConfigurationError):
            TimeHistogram(0.0, 0.0, np.array([1]))

    def test_normalized_sums_to_one(self):
        hist = TimeHistogram(100.0, 0.0, np.array([3, 0, 1, 6]))
        assert hist.normalized().counts.sum() == pytest.approx(1.0, abs=1e-12)
        with pytest.raises(DomainError):
            TimeHistogram(100.0, 0.0, np.zeros(3)).normalized()

    def test_peak_ignores_a_single_bin_spike(self, monkeypatch):
        k = np.arange(124)
        counts = 1000.0 * np.exp(-0.5 * ((k - 30) / 3.0) ** 2)
        counts[80] = 1100.0
        hist = TimeHistogram(100.0, 0.0, counts)
        assert hist.peak_bin == 30
        monkeypatch.setenv('ANCHOR_SMOOTHING_BINS', '0')
        assert hist.peak_bin == 80

    def test_empty_histogram_peaks_at_zero(self):
        assert TimeHistogram(100.0, 0.0, np.zeros(124)).peak_bin == 0


class TestHistogramEvents:
    def test_uniform_readings_fill_bins_evenly(self):
        raw = np.random.default_rng(6).uniform(0.0, 1e6, 10 ** 6)
        records = type('Stream', (), {'raw_time_ps': raw})()
        hist = histogram_events(records, 100.0, 1e6)
        expected = raw.size / hist.n_bins
        chi2_ndf = float(np.sum((hist.counts - expected) ** 2) / expected) / (hist.n_bins - 1)
        assert hist.n_bins == 10000
        assert 0.9 <= chi2_ndf <= 1.1

    def test_out_of_span_readings_are_counted_in_metadata(self):
        records = [EventRecord(0, 0, -1.0, None), EventRecord(0, 0, 50.0, None),
                   EventRecord(0, 0, 1000.0, None)]
        hist = histogram_events(records, 100.0, 1000.0)
        assert hist.total == 1
        assert hist.metadata['underflow'] == '1'
        assert hist.metadata['overflow'] == '1'

    def test_non_positive_bin_width(self):
        with pytest.raises(ConfigurationError):
            histogram_events([], 0.0, 1000.0)


class TestFold:
    def test_fold_conserves_counts(self):
        counts = np.random.default_rng(7).integers(0, 1000, 1860)
        folded = fold_and_invert(TimeHistogram(100.0, 0.0, counts), 12400.0)
        assert folded.n_bins == 124
        assert folded.total == int(counts.sum())
        assert is_folded(folded)

    def test_single_period_is_pure_reversal(self):
        counts = np.arange(124)
        folded = fold_and_invert(TimeHistogram(100.0, 0.0, counts), 12400.0)
        np.testing.assert_array_equal(folded.counts, counts[::-1])

    def test_two_identical_periods_fold_to_twice_the_reversal(self):
        period = np.random.default_rng(13).integers(0, 500, 124)
        folded = fold_and_invert(TimeHistogram(100.0, 0.0, np.concatenate([period, period])), 12400.0)
        np.testing.assert_array_equal(folded.counts, 2 * period[::-1])

    def test_period_must_be_whole_number_of_bins(self):
        with pytest.raises(ConfigurationError) as info:
            fold_and_invert(TimeHistogram(100.0, 0.0, np.ones(100)), 1250.0)
        assert info.value.key == 'period_ps'


class TestFitDecay:
    def test_noiseless_bare_exponential(self):
        hist = exponential_histogram(TAU_P12)
        fit = fit_decay(hist, FitWindow(0.0, 12.4), model='bare', fit_background=False, anchor_bin=0)
        assert fit.converged
        assert fit.tau_ns == pytest.approx(TAU_P12, rel=1e-6)

    def test_noiseless_wrapped_exponential_with_background(self):
        hist = exponential_histogram(TAU_P32, background=20.0, wrapped=True)
        fit = fit_decay(hist, FitWindow(0.0, 12.4))
        assert fit.converged
        assert fit.tau_ns == pytest.approx(TAU_P32, rel=1e-6)
        assert fit.background_level == pytest.approx(20.0, rel=1e-4)
        assert fit.param_names == ('amplitude', 'tau', 'background')

    def test_score_matches_finite_differences(self):
        t = np.arange(124) * 0.1
        truth = np.array([4000.0, TAU_P32, 2.0])
        g = np.exp(-t / TAU_P32) / -math.expm1(-12.4 / TAU_P32)
        y = np.random.default_rng(8).poisson(truth[0] * g + truth[2]).astype(float)
        theta = np.array([5000.0, 2.5, 3.0])
        score = poisson_score(theta, y, t, 'wrapped', 12.4)
        numeric = np.empty(3)
        for i in range(3):
            h = 1e-6 * theta[i]
            up, down = theta.copy(), theta.copy()
            up[i] += h
            down[i] -= h
            numeric[i] = -(poisson_nll(up, y, t, 'wrapped', 12.4) - poisson_nll(down, y, t, 'wrapped', 12.4)) / (2 * h)
        np.testing.assert_allclose(score, numeric, rtol=1e-6, atol=1e-4)

    def test_minimizer_reaches_the_tolerance(self):
        hist = exponential_histogram(TAU_P12, background=5.0, wrapped=True)
        fit = fit_decay(hist, FitWindow(0.0, 12.4), fit_background=False, background_level=5.0, anchor_bin=0)
        assert fit.converged
        assert fit.tau_ns == pytest.approx(TAU_P12, rel=1e-7)
        assert fit.amplitude == pytest.approx(1e5, rel=1e-6)

    def test_distant_start_converges_to_the_same_optimum(self):
        hist = synthetic_decay_histogram(TAU_P32, 2e5, np.random.default_rng(14), background_per_bin=3.0)
        default = fit_decay(hist, FitWindow(0.0, 12.4), anchor_bin=0)
        distant = fit_decay(hist, FitWindow(0.0, 12.4), anchor_bin=0, initial_tau_ns=40.0)
        assert default.converged and distant.converged
        assert distant.tau_ns == pytest.approx(default.tau_ns, rel=1e-6)
        assert distant.background_level == pytest.approx(default.background_level, rel=1e-4)

    def test_background_slope_matches_refits(self):
        hist = synthetic_decay_histogram(TAU_P12, 5e5, np.random.default_rng(15), background_per_bin=20.0)
        window = FitWindow(2.0, 9.9)
        low = fit_decay(hist, window, fit_background=False, background_level=19.9, anchor_bin=0)
        high = fit_decay(hist, window, fit_background=False, background_level=20.1, anchor_bin=0)
        central = fit_decay(hist, window, fit_background=False, background_level=20.0, anchor_bin=0)
        assert central.tau_background_slope < 0
        assert central.tau_background_slope == pytest.approx((high.tau_ns - low.tau_ns) / 0.2, rel=0.02)
        floated = fit_decay(hist, window, anchor_bin=0)
        assert floated.tau_background_slope == 0.0

    def test_all_zero_window_does_not_raise(self):
        fit = fit_decay(TimeHistogram(100.0, 0.0, np.zeros(124, dtype=np.int64)), FitWindow(0.0, 12.4))
        assert not fit.converged
        assert 'all-zero' in fit.diagnostic
        assert math.isnan(fit.tau_ns)

    def test_too_few_occupied_bins(self):
        counts = np.zeros(124, dtype=np.int64)
        counts[[3, 40]] = 5
        fit = fit_decay(TimeHistogram(100.0, 0.0, counts), FitWindow(0.0, 12.4), anchor_bin=0)
        assert not fit.converged
        assert 'fewer than 3' in fit.diagnostic

    def test_flat_data_does_not_raise(self):
        hist = TimeHistogram(100.0, 0.0, np.full(124, 1000.0))
        fit = fit_decay(hist, FitWindow(0.0, 12.4), anchor_bin=0)
        if fit.converged:
            assert np.nanmean(fit.model_counts(124)) == pytest.approx(1000.0, rel=0.01)
        else:
            assert fit.diagnostic

    def test_window_beyond_period_rejected(self):
        with pytest.raises(ConfigurationError):
            fit_decay(exponential_histogram(TAU_P12), FitWindow(0.0, 20.0))

    def test_inverted_window_rejected(self):
        with pytest.raises(ConfigurationError):
            FitWindow(2.0, 1.0)

    def test_unknown_model_rejected(self):
        with pytest.raises(ConfigurationError):
            fit_decay(exponential_histogram(TAU_P12), FitWindow(0.0, 12.4), model='double')

    def test_decay_curve_table_marks_window(self):
        hist = synthetic_decay_histogram(TAU_P32, 2e5, np.random.default_rng(9))
        fit = fit_decay(hist, FitWindow(2.0, 9.9), anchor_bin=0)
        table = decay_curve_table(hist, fit)
        assert list(table.columns) == ['bin', 't_ns', 'counts', 'model', 'pearson_residual', 'in_window']
        assert int(table['in_window'].sum()) == fit.n_bins_used == 79
        assert not table.loc[:19, 'in_window'].any()

    @pytest.mark.slow
    def test_estimator_is_consistent(self):
        rng = np.random.default_rng(2026)
        scaled_spreads = []
        for total in (1e4, 1e5, 1e6):
            taus = []
            for _ in range(400):
                hist = synthetic_decay_histogram(TAU_P32, total, rng)
                fit = fit_decay(hist, FitWindow(0.0, 12.4), fit_background=False, anchor_bin=0)
                assert fit.converged
                taus.append(fit.tau_ns)
            taus = np.array(taus)
            spread = taus.std(ddof=1)
            assert abs(taus.mean() - TAU_P32) < 3 * spread / math.sqrt(taus.size) + 5 * TAU_P32 / total
            scaled_spreads.append(spread * math.sqrt(total))
        assert max(scaled_spreads) / min(scaled_spreads) < 1.15

    @pytest.mark.slow
    def test_pull_calibration_on_wrapped_exponential(self):
        rng = np.random.default_rng(2024)
        pulls = []
        for _ in range(400):
            hist = synthetic_decay_histogram(TAU_P32, 1.8e5, rng)
            fit = fit_decay(hist, FitWindow(0.0, 12.4), fit_background=False, anchor_bin=0)
            assert fit.converged
            pulls.append((fit.tau_ns - TAU_P32) / fit.tau_stat_ns)
        pulls = np.array(pulls)
        assert abs(pulls.mean()) < 0.15
        assert 0.85 <= pulls.std(ddof=1) <= 1.15


class TestStartTimeScan:
    def test_pure_exponential_scan_is_flat(self):
        hist = synthetic_decay_histogram(TAU_P12, 2e5, np.random.default_rng(10))
        scan = scan_start_time(hist, ScanConfig())
        assert len(scan) == 21
        assert scan.converged.all()
        assert scan.is_flat()
        assert scan.plateau(2.0).start_offset_ns == pytest.approx(2.0)

    def test_measured_background_is_held_fixed(self):
        hist = synthetic_decay_histogram(TAU_P12, 2e5, np.random.default_rng(16), background_per_bin=5.0)
        fixed = scan_start_time(hist, ScanConfig(), background_level=5.0)
        floated = scan_start_time(hist, ScanConfig(background='floated'), background_level=5.0)
        assert all(p.fit.param_names == ('amplitude', 'tau') for p in fixed)
        assert all(p.fit.background_level == 5.0 for p in fixed)
        assert all(p.fit.param_names[-1] == 'background' for p in floated)
        assert fixed.plateau(2.0).fit.tau_stat_ns < floated.plateau(2.0).fit.tau_stat_ns

    def test_without_a_measurement_the_background_floats(self):
        hist = synthetic_decay_histogram(TAU_P12, 2e5, np.random.default_rng(16), background_per_bin=5.0)
        scan = scan_start_time(hist, ScanConfig(max_offset_ns=0.4))
        assert all(p.fit.param_names[-1] == 'background' for p in scan)
        zero = scan_start_time(hist, ScanConfig(max_offset_ns=0.4, background='zero'), background_level=5.0)
        assert all(p.fit.background_level == 0.0 for p in zero)

    def test_difference_errors_use_nested_windows(self):
        scan = scan_of([3.0, 3.01, 3.0], [0.01, 0.02, 0.03])
        np.testing.assert_allclose(scan.difference_errors(0.4), [math.sqrt(8e-4), math.sqrt(5e-4), 0.0])

    def test_variation_within_errors_is_zero(self):
        assert scan_of([3.0, 3.01, 3.0], [0.01, 0.02, 0.03]).variation(0.4) == 0.0

    def test_variation_removes_the_statistical_part(self):
        scan = scan_of([3.20, 3.05, 3.0], [0.01, 0.02, 0.03])
        assert scan.variation(0.4) == pytest.approx((0.2 - math.sqrt(0.03 ** 2 - 0.01 ** 2)) / 3.0)
        assert scan.variation(0.4, n_sigma=0.0) == pytest.approx(0.2 / 3.0)

    def test_variation_skips_failed_points(self):
        scan = scan_of([9.0, 3.0, 3.0], [0.01, 0.02, 0.03], converged=[False, True, True])
        assert scan.variation(0.4) == 0.0
        assert math.isnan(scan_of([3.0, 3.0], [0.1, 0.1], converged=[False, False]).variation(0.2))

    def test_background_modes(self):
        with pytest.raises(ConfigurationError) as info:
            ScanConfig(background='fixed')
        assert info.value.key == 'background'
        assert ScanConfig().resolve_background(None) is None
        assert ScanConfig().resolve_background(3.0) == 3.0
        assert ScanConfig(background='floated').resolve_background(3.0) is None
        assert ScanConfig(background='zero').resolve_background(3.0) == 0.0

    def test_step_finer_than_bin_rejected(self):
        hist = synthetic_decay_histogram(TAU_P12, 2e5, np.random.default_rng(10))
        with pytest.raises(ConfigurationError):
            scan_start_time(hist, ScanConfig(step_ns=0.05))

    def test_scan_table_columns(self):
        hist = synthetic_decay_histogram(TAU_P12, 2e5, np.random.default_rng(11))
        scan = scan_start_time(hist, ScanConfig(max_offset_ns=1.0))
        table = scan.to_frame()
        assert len(table) == 6
        assert {'start_offset_ns', 'tau_ns', 'tau_stat_ns', 'converged'} <= set(table.columns)
        assert len(scan_table(scan)) == 6


class TestTemplate:
    def test_wrapped_exponential_is_normalized(self):
        assert wrapped_exponential(124, 100.0, TAU_P12).sum() == pytest.approx(1.0, abs=1e-12)

    def test_decay_kernel_is_normalized(self):
        assert binned_decay_kernel(124, 100.0, TAU_P12).sum() == pytest.approx(1.0, abs=1e-12)

    def test_decay_kernel_follows_the_wrapped_decay_after_bin_zero(self):
        kernel = binned_decay_kernel(124, 100.0, TAU_P32)
        np.testing.assert_allclose(kernel[2:] / kernel[1:-1], math.exp(-0.1 / TAU_P32), rtol=1e-12)
        reference = wrapped_exponential(124, 100.0, TAU_P32)
        np.testing.assert_allclose(kernel[1:] / reference[1:], kernel[1] / reference[1], rtol=1e-12)
        assert kernel[0] < kernel[1]

    def test_delta_response_reproduces_the_kernel(self):
        delta = TimeHistogram(100.0, 0.0, np.eye(1, 124)[0])
        template = build_template(delta, TAU_P12, 0.0, 12400.0)
        np.testing.assert_allclose(template.counts, binned_decay_kernel(124, 100.0, TAU_P12), rtol=0, atol=1e-12)

    def test_shift_response_moves_weight_between_neighbours(self, irf_histogram):
        later = shift_response(irf_histogram, 0.5)
        assert later.total == pytest.approx(1.0, abs=1e-12)
        assert later.metadata['shift_bins'] == '0.5'
        np.testing.assert_allclose(shift_response(irf_histogram, 1.0).counts, np.roll(irf_histogram.counts, 1))
        np.testing.assert_allclose(shift_response(irf_histogram, -1.0).counts, np.roll(irf_histogram.counts, -1))
        np.testing.assert_allclose(shift_response(irf_histogram, 0.0).counts, irf_histogram.counts)
        with pytest.raises(DomainError):
            shift_response(irf_histogram, 1.5)

    def test_full_prompt_fraction_is_the_response(self, irf_histogram):
        template = build_template(irf_histogram, TAU_P12, 1.0, 12400.0, total_counts=1000.0)
        np.testing.assert_allclose(template.counts, 1000.0 * irf_histogram.counts, atol=1e-9)

    def test_template_total_includes_background(self, irf_histogram):
        template = build_template(irf_histogram, TAU_P32, 0.05, 12400.0, background_level=3.0, total_counts=1e5)
        assert template.total == pytest.approx(1e5, rel=1e-9)

    def test_unnormalized_response_rejected(self):
        with pytest.raises(DomainError):
            build_template(TimeHistogram(100.0, 0.0, np.ones(124)), TAU_P12, 0.0, 12400.0)

    def test_response_longer_than_period_rejected(self):
        long = TimeHistogram(100.0, 0.0, np.full(200, 1.0 / 200))
        with pytest.raises(ConfigurationError):
            build_template(long, TAU_P12, 0.0, 12400.0)


class TestExtraction:
    def test_recovers_lifetime_from_template_data(self, template_data, irf_histogram):
        data = template_data(total=1e7)
        result = extract_lifetime(data, irf_histogram, label='P1/2 quadrupole')
        lifetime, (data_scan, template_scan) = result
        assert lifetime.trap_label == 'P1/2 quadrupole'
        assert abs(lifetime.tau_ns - TAU_P12) < 0.004 * TAU_P12
        assert lifetime.final_error_ns == pytest.approx(math.hypot(lifetime.stat_error_ns, lifetime.sys_error_ns))
        assert result.prompt_fraction == pytest.approx(0.02, abs=0.01)
        assert result.match_chi2_ndf < 10.0
        assert result.anchor_bin == data.peak_bin
        assert len(data_scan) == len(template_scan)

    def test_delta_response_without_prompt_reduces_to_a_decay_fit(self):
        delta = TimeHistogram(100.0, 0.0, np.eye(1, 124)[0])
        data = TimeHistogram(100.0, 0.0, 2e6 * wrapped_exponential(124, 100.0, TAU_P12))
        config = ScanConfig(background='zero')
        result = extract_lifetime(data, delta, config)
        fit = fit_decay(data, FitWindow(2.0, 9.9), fit_background=False, anchor_bin=data.peak_bin)
        assert result.lifetime.tau_ns == pytest.approx(fit.tau_ns, rel=1e-6)
        assert result.lifetime.tau_ns == pytest.approx(TAU_P12, rel=1e-6)
        assert result.match_chi2_ndf < 1e-6

    def test_flat_scan_agrees_with_the_plateau_fit(self):
        delta = TimeHistogram(100.0, 0.0, np.eye(1, 124)[0])
        data = synthetic_decay_histogram(TAU_P12, 2e6, np.random.default_rng(17))
        result = extract_lifetime(data, delta, ScanConfig(background='zero'))
        assert result.data_scan.is_flat()
        plateau = result.plateau_fit
        assert abs(result.lifetime.tau_ns - plateau.tau_ns) < math.hypot(plateau.tau_stat_ns,
                                                                         result.lifetime.stat_error_ns)
        assert abs(result.lifetime.tau_ns - TAU_P12) < 3 * result.lifetime.stat_error_ns

    def test_measured_and_floated_background_agree(self, irf_histogram):
        data = build_template(irf_histogram, TAU_P12, 0.02, 12400.0, background_level=5.0, total_counts=1e6)
        measured = extract_lifetime(data, irf_histogram, ScanConfig(),
                                    background=BackgroundEstimate(level=5.0, error=0.2, n_bins=124))
        floated = extract_lifetime(data, irf_histogram, ScanConfig(background='floated'))
        assert abs(measured.lifetime.tau_ns - floated.lifetime.tau_ns) < measured.lifetime.stat_error_ns
        assert measured.lifetime.stat_error_ns < floated.lifetime.stat_error_ns
        assert measured.background.level == 5.0

    def test_errors_are_split_into_their_parts(self, template_data, irf_histogram):
        result = extract_lifetime(template_data(total=1e6), irf_histogram)
        assert result.alignment_error_ns > 0
        assert result.lifetime.sys_error_ns == pytest.approx(math.hypot(result.residual_rms_ns,
                                                                        result.alignment_error_ns))
        assert result.lifetime.stat_error_ns > 0

    def test_unmatchable_scan_raises_with_diagnostics(self, template_data, irf_histogram):
        data = template_data(total=1e6)
        counts = data.counts.copy()
        start = data.peak_bin + 20
        counts[start:start + 11] += 3000
        with pytest.raises(ExtractionError) as info:
            extract_lifetime(data.with_counts(counts), irf_histogram)
        assert 'data_scan' in info.value.diagnostics
        assert info.value.exit_code == 3

    def test_bin_width_mismatch(self, template_data, irf_histogram):
        coarse = TimeHistogram(200.0, 0.0, irf_histogram.counts[:62] / irf_histogram.counts[:62].sum())
        with pytest.raises(ConfigurationError):
            extract_lifetime(template_data(), coarse)


class TestBackground:
    @staticmethod
    def picked_histogram(level=50.0, seed=12):
        signal = 5e5 * wrapped_exponential(496, 100.0, TAU_P32)
        counts = np.random.default_rng(seed).poisson(signal + level)
        return TimeHistogram(100.0, 0.0, counts.astype(np.int64))

    def test_recovers_injected_level(self):
        estimate = background_estimate(self.picked_histogram())
        assert estimate.n_bins == 10
        assert abs(estimate.level - 50.0) < 4.0 * estimate.error
        assert estimate.warnings == ()

    def test_region_touching_peak_warns(self):
        estimate = background_estimate(self.picked_histogram(), region=FitWindow(0.0, 1.0))
        assert estimate.warnings

    def test_default_region_stays_clear_of_the_rising_edge(self):
        hist = self.picked_histogram()
        counts = hist.counts.copy()
        counts[486:] += 400
        edge = background_estimate(hist.with_counts(counts), anchor_bin=0)
        assert edge.level == background_estimate(hist, anchor_bin=0).level

    def test_dark_run_scales_with_exposure(self):
        dark = TimeHistogram(100.0, 0.0, np.full(124, 4, dtype=np.int64), 30.0)
        background = dark_background(dark, 60.0)
        assert background.level == pytest.approx(8.0)
        assert background.error == pytest.approx(2.0 * math.sqrt(496.0) / 124)
        assert background.n_bins == 124

    def test_dark_run_needs_exposure(self):
        with pytest.raises(ConfigurationError):
            dark_background(TimeHistogram(100.0, 0.0, np.ones(124)), 60.0)

    def test_region_needs_five_bins(self):
        with pytest.raises(ConfigurationError):
            background_estimate(self.picked_histogram(), region=FitWindow(0.0, 0.3))


class TestPrecision:
    def test_unbounded_window_is_inverse_root_n(self):
        assert predict_statistical_precision(3000.0, 60.0, TAU_P12) == pytest.approx(1.0 / math.sqrt(180000.0))

    def test_truncated_window_loses_information(self):
        bound = predict_statistical_precision(3000.0, 60.0, TAU_P12, 12.4)
        assert 1.0 / math.sqrt(180000.0) < bound
        assert 0.0027 < bound < 0.0030

    def test_non_positive_rate_rejected(self):
        with pytest.raises(DomainError):
            predict_statistical_precision(0.0, 60.0, TAU_P12)


class TestCombine:
    def test_two_trap_average(self):
        combined = combine_measurements([
            LifetimeResult.build('P3/2 quadrupole', 2.646, 0.002, 0.010),
            LifetimeResult.build('P3/2 linear', 2.649, 0.003, 0.010),
        ], label='P3/2')
        assert round(combined.tau_ns, 3) == 2.647
        assert round(combined.final_error_ns, 3) == 0.010
        assert combined.sys_error_ns == pytest.approx(0.010)
        assert combined.combine_rule == 'quadrature'
        assert combined.n_inputs == 2

    def test_single_measurement_passes_through(self):
        single = LifetimeResult.build('P1/2 quadrupole', 3.148, 0.005, 0.010)
        combined = combine_measurements([single])
        assert combined.tau_ns == pytest.approx(3.148)
        assert round(combined.final_error_ns, 3) == 0.011
        assert combined.trap_label == 'P1/2 quadrupole'

    def test_independent_systematics_average_down(self):
        results = [LifetimeResult.build('a', 2.646, 0.002, 0.010), LifetimeResult.build('b', 2.649, 0.002, 0.010)]
        assert combine_measurements(results, common_sys=False).sys_error_ns < 0.010
        assert combine_measurements(results).trap_label == 'a+b'

    def test_identical_inputs_halve_the_statistical_variance(self):
        single = LifetimeResult.build('P1/2 quadrupole', 3.148, 0.004, 0.010)
        combined = combine_measurements([single, single])
        assert combined.tau_ns == pytest.approx(3.148)
        assert combined.stat_error_ns == pytest.approx(0.004 / math.sqrt(2.0))
        assert combined.sys_error_ns == pytest.approx(0.010)

    def test_nothing_to_combine(self):
        with pytest.raises(DomainError):
            combine_measurements([])

    def test_zero_statistical_error_rejected(self):
        with pytest.raises(DomainError):
            combine_measurements([LifetimeResult.build('a', 2.6, 0.0, 0.01)])

    def test_result_dict_round_trip(self):
        result = LifetimeResult.build('P1/2 linear', 3.132, 0.002, 0.030)
        assert LifetimeResult.from_dict(result.to_dict()) == result
