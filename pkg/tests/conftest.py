# conftest.py - Shared fixtures for the Ion Lifetime Twin test suite
from dataclasses import replace

import numpy as np
import pytest

from analysis import TimeHistogram, build_template
from physics_sim import (AtomicTransition, ExperimentConfig, ParametricResponse, TdcSpec,
                         efficiency_for_detection_probability)
from presets import PRESET_PULSE, PRESET_TRAIN, TRANSITIONS

# Ideal detector: a fixed 0.1 ns delay keeps every decay photon off the clock edge,
# so folded bin m >= 1 holds emission delays in ((m - 1) * w, m * w].
DELTA_IRF = ParametricResponse(delay_ns=0.1)
IDEAL_TDC = TdcSpec(bin_width_ps=100.0)


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Route the registry, logs and data directory into the test's tmp_path."""
    monkeypatch.setenv('DATABASE_PATH', str(tmp_path / 'db' / 'runs.db'))
    monkeypatch.setenv('LOG_DIR', str(tmp_path / 'logs'))
    monkeypatch.setenv('DATA_DIR', str(tmp_path / 'data'))
    monkeypatch.setenv('CYCLES_PER_BLOCK', '100000')
    monkeypatch.setenv('DEFAULT_WORKERS', '1')
    yield


def make_delta_config(tau_ns: float = 3.148, duration_s: float = 1.0, seed: int = 11,
                      per_pulse_prob: float = 2e-4, **overrides) -> ExperimentConfig:
    """Exponential-purity configuration: delta IRF, ideal TDC, no prompt, no background."""
    label = 'P1/2' if tau_ns > 2.9 else 'P3/2'
    transition = AtomicTransition(label, tau_ns, TRANSITIONS[label].wavelength_nm)
    efficiency = efficiency_for_detection_probability(per_pulse_prob, 0.0, PRESET_PULSE, transition)
    config = ExperimentConfig(transition=transition, pulse=PRESET_PULSE, train=PRESET_TRAIN,
                              irf=DELTA_IRF, tdc=IDEAL_TDC, detection_efficiency=efficiency,
                              prompt_scatter_prob=0.0, background_rate_hz=0.0,
                              duration_s=duration_s, seed=seed)
    return replace(config, **overrides) if overrides else config


@pytest.fixture
def delta_config():
    return make_delta_config()


def gaussian_irf(n_bins: int = 124, peak_bin: float = 10.0, sigma_bins: float = 1.5,
                 tail_bins: float = 5.0, bin_width_ps: float = 100.0) -> TimeHistogram:
    """Normalized response: Gaussian rise followed by an exponential tail."""
    k = np.arange(n_bins, dtype=float)
    rise = np.exp(-0.5 * ((k - peak_bin) / sigma_bins) ** 2)
    tail = np.exp(-k / tail_bins)
    shape = np.convolve(rise, tail)[:n_bins] + 1e-12
    return TimeHistogram(bin_width_ps, 0.0, shape / shape.sum(), metadata={'kind': 'irf'})


@pytest.fixture
def irf_histogram():
    return gaussian_irf()


@pytest.fixture
def template_data(irf_histogram):
    """Poisson data drawn from a template with a known lifetime and prompt share."""
    def build(tau_ns=3.148, prompt_fraction=0.02, total=1e6, background=2.0, seed=5):
        expected = build_template(irf_histogram, tau_ns, prompt_fraction, 12400.0, background, total)
        counts = np.random.default_rng(seed).poisson(expected.counts)
        return TimeHistogram(100.0, 0.0, counts.astype(np.int64),
                             metadata={'folded': 'true', 'period_ps': '12400.0', 'transition': 'P1/2'})
    return build
