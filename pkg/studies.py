# studies.py - Monte Carlo validation studies built on the simulator and the analysis chain
"""
Repeated simulate-and-analyse runs: pull studies for error calibration, the
start-time systematic, prompt-peak degradation and the quantum-beat bias.
"""

import logging
import math
from dataclasses import dataclass, replace
from multiprocessing import Pool
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from analysis import (BackgroundEstimate, ExtractionResult, FitWindow, ScanConfig, StartTimeScan,
                      TimeHistogram, dark_background, extract_lifetime, fit_decay, fold_and_invert,
                      histogram_events, scan_start_time, wrapped_exponential)
from errors import ConfigurationError, LifetimeTwinError
from physics_sim import (AtomicTransition, BeatModulation, ExperimentConfig, emission_cdf,
                         run_experiment, simulate_dark_measurement, simulate_irf_measurement)

logger = logging.getLogger(__name__)

METHODS = ('fit', 'extract')


def simulate_folded(config: ExperimentConfig, workers: Optional[int] = None) -> TimeHistogram:
    """Run the experiment and return the folded, inverted histogram."""
    events = run_experiment(config, workers=workers)
    raw = histogram_events(events, config.tdc.bin_width_ps, config.frame_ps)
    return fold_and_invert(raw, config.period_ps)


def measured_background(config: ExperimentConfig, scan_config: ScanConfig,
                        workers: Optional[int] = None) -> Optional[BackgroundEstimate]:
    """Dark-run background for a data run of ``config``; None unless the scan mode uses it."""
    if scan_config.background != 'measured':
        return None
    dark = simulate_dark_measurement(config, workers=workers)
    return dark_background(dark, config.n_cycles / config.train.cycle_rate_hz)


def synthetic_decay_histogram(tau_ns: float, total_counts: float, rng: np.random.Generator,
                              n_bins: int = 124, bin_width_ps: float = 100.0,
                              background_per_bin: float = 0.0) -> TimeHistogram:
    """Poisson-fluctuated wrapped exponential: data generated by the fit model itself."""
    expected = total_counts * wrapped_exponential(n_bins, bin_width_ps, tau_ns) + background_per_bin
    return TimeHistogram(bin_width_ps, 0.0, rng.poisson(expected).astype(np.int64),
                         metadata={'kind': 'synthetic', 'tau_ns': repr(tau_ns)})


# =============================================================================
# Pull study
# =============================================================================

@dataclass(frozen=True, eq=False)
class PullStudyResult:
    tau_true_ns: float
    taus: np.ndarray
    errors: np.ndarray
    converged: np.ndarray
    seeds: np.ndarray
    method: str
    master_seed: int
    sys_errors: Optional[np.ndarray] = None

    @property
    def n_repeats(self) -> int:
        return int(self.taus.size)

    @property
    def pulls(self) -> np.ndarray:
        return (self.taus - self.tau_true_ns) / self.errors

    def _good(self) -> np.ndarray:
        return self.converged & np.isfinite(self.taus) & (self.errors > 0)

    @property
    def pull_mean(self) -> float:
        return float(np.mean(self.pulls[self._good()]))

    @property
    def pull_width(self) -> float:
        return float(np.std(self.pulls[self._good()], ddof=1))

    @property
    def relative_spread(self) -> float:
        return float(np.std(self.taus[self._good()], ddof=1) / self.tau_true_ns)

    @property
    def relative_bias(self) -> float:
        return float(np.mean(self.taus[self._good()]) / self.tau_true_ns - 1.0)

    @property
    def mean_relative_error(self) -> float:
        return float(np.mean(self.errors[self._good()]) / self.tau_true_ns)

    @property
    def mean_relative_sys_error(self) -> float:
        if self.sys_errors is None:
            return 0.0
        return float(np.mean(self.sys_errors[self._good()]) / self.tau_true_ns)

    def summary(self) -> Dict[str, Any]:
        return {
            'method': self.method,
            'master_seed': self.master_seed,
            'n_repeats': self.n_repeats,
            'n_converged': int(self._good().sum()),
            'tau_true_ns': self.tau_true_ns,
            'pull_mean': self.pull_mean,
            'pull_width': self.pull_width,
            'relative_spread': self.relative_spread,
            'relative_bias': self.relative_bias,
            'mean_relative_error': self.mean_relative_error,
            'mean_relative_sys_error': self.mean_relative_sys_error,
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'repeat': np.arange(self.n_repeats),
            'seed': self.seeds,
            'tau_ns': self.taus,
            'tau_error_ns': self.errors,
            'sys_error_ns': self.sys_errors if self.sys_errors is not None else np.zeros(self.n_repeats),
            'pull': self.pulls,
            'converged': self.converged,
        })


def derive_seeds(master_seed: int, n: int) -> np.ndarray:
    """Per-repeat seeds, a pure function of the master seed."""
    return np.random.SeedSequence(int(master_seed)).generate_state(n, dtype=np.uint32).astype(np.int64)


def default_window(config: ExperimentConfig, scan_config: ScanConfig) -> FitWindow:
    return FitWindow(scan_config.plateau_offset_ns, config.train.period_ns - scan_config.end_margin_ns)


def _pull_repeat(task) -> Tuple[float, float, float, bool]:
    config, seed, method, scan_config, window, irf, background, anchor_bin = task
    hist = simulate_folded(replace(config, seed=int(seed)), workers=1)
    if method == 'extract':
        try:
            result = extract_lifetime(hist, irf, scan_config, background=background)
        except LifetimeTwinError as error:
            logger.warning(f"Repeat with seed {seed} failed: {error}")
            return math.nan, math.nan, math.nan, False
        return result.lifetime.tau_ns, result.lifetime.stat_error_ns, result.lifetime.sys_error_ns, True
    level = scan_config.resolve_background(None if background is None else background.level)
    fit = fit_decay(hist, window, model=scan_config.model, fit_background=level is None,
                    background_level=level, anchor_bin=anchor_bin)
    return fit.tau_ns, fit.tau_stat_ns, 0.0, fit.converged


def pull_study(config: ExperimentConfig, n_repeats: int, master_seed: Optional[int] = None,
               method: str = 'fit', scan_config: Optional[ScanConfig] = None,
               window: Optional[FitWindow] = None, irf: Optional[TimeHistogram] = None,
               workers: int = 1, anchor_bin: Optional[int] = None) -> PullStudyResult:
    """Repeat simulate-and-fit with derived seeds and collect pulls against the true lifetime.

    ``method='fit'`` uses one decay fit over ``window`` (default: plateau
    offset to the period end margin); ``method='extract'`` runs the full
    template extraction against ``irf`` (simulated once when not given).
    One dark run, shared by all repeats, supplies the measured background.
    ``anchor_bin`` pins the fit origin; by default each repeat uses its own peak bin.
    """
    if int(n_repeats) != n_repeats or n_repeats < 2:
        raise ConfigurationError(f"a pull study needs at least 2 repeats, got {n_repeats}",
                                 key='n_repeats', invariant='n_repeats >= 2')
    if method not in METHODS:
        raise ConfigurationError(f"unknown pull-study method '{method}'", key='method')
    scan_config = scan_config or ScanConfig.from_settings()
    window = window or default_window(config, scan_config)
    master = config.seed if master_seed is None else int(master_seed)
    if method == 'extract' and irf is None:
        irf = simulate_irf_measurement(config, workers=workers)
    background = measured_background(config, scan_config, workers)

    seeds = derive_seeds(master, int(n_repeats))
    tasks = [(config, seed, method, scan_config, window, irf, background, anchor_bin) for seed in seeds]
    logger.info(f"Pull study: {n_repeats} repeats ({method}), master seed {master}, {workers} worker(s)")
    if workers > 1:
        with Pool(processes=workers) as pool:
            outcomes = pool.map(_pull_repeat, tasks)
    else:
        outcomes = [_pull_repeat(task) for task in tasks]

    taus, errors, sys_errors, converged = (np.array(column) for column in zip(*outcomes))
    result = PullStudyResult(config.transition.lifetime_ns, taus.astype(float), errors.astype(float),
                             converged.astype(bool), seeds, method, master, sys_errors.astype(float))
    summary = result.summary()
    logger.info(f"Pull study done: mean={summary['pull_mean']:.3f}, width={summary['pull_width']:.3f}, "
                f"spread={100 * summary['relative_spread']:.3f}%")
    return result


# =============================================================================
# Systematics
# =============================================================================

@dataclass(frozen=True)
class StartTimeSystematic:
    scan: StartTimeScan
    variation: float
    max_deviation_sigma: float
    flat: bool


def start_time_systematic(config: ExperimentConfig, scan_config: Optional[ScanConfig] = None,
                          workers: Optional[int] = None) -> StartTimeSystematic:
    """Start-time scan of one simulated dataset and its non-statistical variation."""
    scan_config = scan_config or ScanConfig.from_settings()
    background = measured_background(config, scan_config, workers)
    scan = scan_start_time(simulate_folded(config, workers), scan_config,
                           background_level=None if background is None else background.level)
    variation = scan.variation(scan_config.plateau_offset_ns)
    deviation = scan.max_deviation_sigma()
    logger.info(f"Start-time scan variation {100 * variation:.2f}%, max deviation {deviation:.2f} sigma")
    return StartTimeSystematic(scan, variation, deviation, deviation < 3.0)


@dataclass(frozen=True, eq=False)
class PromptDegradation:
    baseline: ExtractionResult
    degraded: ExtractionResult
    factor: float

    @property
    def sys_ratio(self) -> float:
        return self.degraded.lifetime.sys_error_ns / self.baseline.lifetime.sys_error_ns


def prompt_degradation_study(config: ExperimentConfig, factor: float = 10.0,
                             scan_config: Optional[ScanConfig] = None,
                             workers: Optional[int] = None,
                             irf_duration_s: Optional[float] = None) -> PromptDegradation:
    """Extract the lifetime with the nominal and with a scaled prompt scatter probability.

    Both datasets share the seed, the dark-run background and the measured
    instrument response (IRF_MEASUREMENT_S long unless ``irf_duration_s`` is
    given).
    """
    degraded_prompt = config.prompt_scatter_prob * factor
    if not 0.0 <= degraded_prompt <= 1.0:
        raise ConfigurationError(f"scaled prompt probability {degraded_prompt} is not a probability",
                                 key='prompt_scatter_prob')
    irf = simulate_irf_measurement(config, duration_s=irf_duration_s, workers=workers)
    scan_config = scan_config or ScanConfig.from_settings()
    background = measured_background(config, scan_config, workers)
    baseline = extract_lifetime(simulate_folded(config, workers), irf, scan_config, background=background)
    degraded_config = replace(config, prompt_scatter_prob=degraded_prompt)
    degraded = extract_lifetime(simulate_folded(degraded_config, workers), irf, scan_config,
                                background=background)
    study = PromptDegradation(baseline, degraded, factor)
    logger.info(f"Prompt x{factor:g}: sys {baseline.lifetime.sys_error_ns:.5f} -> "
                f"{degraded.lifetime.sys_error_ns:.5f} ns")
    return study


# =============================================================================
# Quantum-beat bias
# =============================================================================

def expected_decay_histogram(transition: AtomicTransition, beats: Optional[BeatModulation],
                             bin_width_ps: float = 100.0, period_ps: float = 12400.0,
                             total_counts: float = 1e8) -> TimeHistogram:
    """Noise-free folded decay histogram from the exact emission CDF, tails wrapped."""
    n_bins = int(round(period_ps / bin_width_ps))
    period_ns = period_ps / 1000.0
    edges = np.arange(n_bins + 1) * bin_width_ps / 1000.0
    n_wraps = int(math.ceil(40.0 * transition.lifetime_ns / period_ns)) + 1
    counts = np.zeros(n_bins)
    for j in range(n_wraps):
        cdf = emission_cdf(edges + j * period_ns, transition, beats)
        counts += np.diff(cdf)
    return TimeHistogram(bin_width_ps, 0.0, total_counts * counts, 0.0,
                         {'kind': 'expected', 'period_ps': repr(float(period_ps))})


@dataclass(frozen=True)
class BeatBias:
    tau_with_beats_ns: float
    tau_without_beats_ns: float

    @property
    def relative_shift(self) -> float:
        return self.tau_with_beats_ns / self.tau_without_beats_ns - 1.0


def beat_bias_study(transition: AtomicTransition, beats: BeatModulation,
                    bin_width_ps: float = 100.0, period_ps: float = 12400.0,
                    window: Optional[FitWindow] = None) -> BeatBias:
    """Fitted-lifetime shift caused by beat modulation, from expected histograms."""
    window = window or FitWindow(0.0, period_ps / 1000.0)
    taus = []
    for modulation in (beats, BeatModulation()):
        hist = expected_decay_histogram(transition, modulation, bin_width_ps, period_ps)
        fit = fit_decay(hist, window, model='wrapped', fit_background=False, anchor_bin=0)
        taus.append(fit.tau_ns)
    bias = BeatBias(taus[0], taus[1])
    logger.info(f"Beat bias: {100 * bias.relative_shift:.4f}% "
                f"(A={beats.amplitude}, omega={beats.angular_frequency_rad_s:.4g} rad/s)")
    return bias
