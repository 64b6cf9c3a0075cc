# physics_sim.py - Monte Carlo simulator of the pulsed excitation / photon detection chain
"""
Synthetic photon-detection streams for a single trapped ion excited by a
train of ultrafast pulses.

Each experiment cycle cools the ion, then fires ``pulses_per_cycle`` pulses.
Every pulse can yield at most one detected event: a prompt event from
scattered laser light, or a spontaneously emitted photon. Uncorrelated
background counts are added on top. Detected times pass through the
instrument response and the time-to-digital converter (TDC), which runs in
time-reversed mode: it is started by the photon and stopped by the laser
reference clock edge that closes the cycle's pulse frame.

Randomness is counter based: cycles are grouped into fixed-size blocks and
each block draws from ``Philox(key=(seed, block_index))``, so the event stream
is the same for any number of worker processes.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy import constants

from analysis import TimeHistogram, fold_and_invert, histogram_events
from config import config as app_config
from errors import ConfigurationError, DomainError

logger = logging.getLogger(__name__)

BOHR_MAGNETON_HZ_PER_GAUSS = constants.physical_constants['Bohr magneton in Hz/T'][0] * 1e-4

KIND_DECAY = 0
KIND_PROMPT = 1
KIND_BACKGROUND = 2
KIND_NAMES = ('decay', 'prompt', 'background')

TRANSITION_LABELS = ('P1/2', 'P3/2')
LANDE_G = {'P1/2': 2.0 / 3.0, 'P3/2': 4.0 / 3.0}

# bisection tolerance for beat-modulated sampling, in units of the lifetime
SAMPLING_TOLERANCE = 1e-4


def _require(condition: bool, message: str, key: str, invariant: str):
    if not condition:
        raise ConfigurationError(message, key=key, invariant=invariant)


def _finite(value: float) -> bool:
    try:
        return math.isfinite(float(value))
    except (TypeError, ValueError):
        return False


# =============================================================================
# Domain types
# =============================================================================

@dataclass(frozen=True)
class AtomicTransition:
    """Excited level being measured. ``lifetime_ns`` is the simulation truth."""

    label: str
    lifetime_ns: float
    wavelength_nm: float

    def __post_init__(self):
        _require(_finite(self.lifetime_ns) and self.lifetime_ns > 0,
                 f"lifetime must be positive, got {self.lifetime_ns}",
                 'lifetime_ns', 'AtomicTransition: lifetime_true > 0')
        _require(_finite(self.wavelength_nm) and self.wavelength_nm > 0,
                 f"wavelength must be positive, got {self.wavelength_nm}",
                 'wavelength_nm', 'AtomicTransition: wavelength > 0')
        _require(self.label in TRANSITION_LABELS,
                 f"unknown transition label '{self.label}'",
                 'transition', f"AtomicTransition: label in {TRANSITION_LABELS}")

    @property
    def linewidth(self) -> float:
        """Natural linewidth gamma = 1/tau in rad/s."""
        return 1.0 / (self.lifetime_ns * 1e-9)

    @property
    def saturation_intensity(self) -> float:
        """Two-level saturation intensity pi*h*c*gamma / (3*lambda^3) in W/m^2."""
        wavelength_m = self.wavelength_nm * 1e-9
        return math.pi * constants.h * constants.c * self.linewidth / (3.0 * wavelength_m ** 3)

    @property
    def lande_g(self) -> float:
        return LANDE_G[self.label]


@dataclass(frozen=True)
class PulseParams:
    energy_pj: float
    duration_ps: float
    waist_um: float

    def __post_init__(self):
        for name in ('energy_pj', 'duration_ps', 'waist_um'):
            value = getattr(self, name)
            _require(_finite(value) and value >= 0, f"{name} must be >= 0, got {value}",
                     name, 'PulseParams: all fields >= 0')
        _require(not (self.energy_pj > 0 and self.waist_um <= 0),
                 "beam waist must be positive when the pulse carries energy",
                 'waist_um', 'PulseParams: waist > 0 when energy > 0')


@dataclass(frozen=True)
class PulseTrain:
    """Pulses fired per experiment cycle.

    ``pulse_spacing_ns`` is the laser repetition period; with ``pick_every`` > 1
    only every n-th laser pulse reaches the ion, which lengthens the decay
    range recorded per pulse.
    """

    pulses_per_cycle: int = 15
    pulse_spacing_ns: float = 12.4
    cooling_window_ns: float = 500.0
    cycle_rate_hz: float = 1e6
    pick_every: int = 1

    def __post_init__(self):
        _require(int(self.pulses_per_cycle) == self.pulses_per_cycle and self.pulses_per_cycle >= 1,
                 f"pulses_per_cycle must be a positive integer, got {self.pulses_per_cycle}",
                 'pulses_per_cycle', 'PulseTrain: pulses_per_cycle >= 1')
        _require(_finite(self.pulse_spacing_ns) and self.pulse_spacing_ns > 0,
                 f"pulse spacing must be positive, got {self.pulse_spacing_ns}",
                 'pulse_spacing_ns', 'PulseTrain: pulse_spacing > 0')
        _require(_finite(self.cooling_window_ns) and self.cooling_window_ns >= 0,
                 f"cooling window must be >= 0, got {self.cooling_window_ns}",
                 'cooling_window_ns', 'PulseTrain: cooling_window >= 0')
        _require(_finite(self.cycle_rate_hz) and self.cycle_rate_hz > 0,
                 f"cycle rate must be positive, got {self.cycle_rate_hz}",
                 'cycle_rate_hz', 'PulseTrain: cycle_rate > 0')
        _require(int(self.pick_every) == self.pick_every and self.pick_every >= 1,
                 f"pick_every must be a positive integer, got {self.pick_every}",
                 'pick_every', 'PulseTrain: pick_every >= 1')
        cycle_limit_ns = 1e9 / self.cycle_rate_hz
        _require(self.cycle_duration_ns <= cycle_limit_ns * (1 + 1e-12),
                 f"cycle takes {self.cycle_duration_ns:.1f} ns but the cycle rate allows {cycle_limit_ns:.1f} ns",
                 'cycle_rate_hz', 'PulseTrain: cooling + pulses*spacing <= 1/cycle_rate')

    @property
    def period_ns(self) -> float:
        """Time between pulses that reach the ion (the fold period)."""
        return self.pulse_spacing_ns * self.pick_every

    @property
    def frame_ns(self) -> float:
        return self.pulses_per_cycle * self.period_ns

    @property
    def cycle_duration_ns(self) -> float:
        return self.cooling_window_ns + self.frame_ns


@dataclass(frozen=True)
class BeatModulation:
    """Single quantum beat: density factor 1 + A*cos(w*t + phi)."""

    enabled: bool = False
    amplitude: float = 0.0
    angular_frequency_rad_s: float = 0.0
    phase_rad: float = 0.0

    def __post_init__(self):
        _require(_finite(self.amplitude) and 0.0 <= self.amplitude <= 1.0,
                 f"beat amplitude must lie in [0, 1], got {self.amplitude}",
                 'beat_amplitude', 'BeatModulation: amplitude in [0, 1]')
        _require(_finite(self.angular_frequency_rad_s), "beat frequency must be finite",
                 'beat_angular_frequency_rad_s', 'BeatModulation: finite frequency')
        _require(_finite(self.phase_rad), "beat phase must be finite",
                 'beat_phase_rad', 'BeatModulation: finite phase')

    @property
    def active(self) -> bool:
        return bool(self.enabled)


def zeeman_beat(transition: AtomicTransition, field_gauss: float, amplitude: float,
                phase_rad: float = 0.0) -> BeatModulation:
    """Beat at the Larmor angular frequency g_J * mu_B * B / hbar of the excited level."""
    if not _finite(field_gauss) or field_gauss < 0:
        raise DomainError(f"magnetic field must be a non-negative number, got {field_gauss}")
    omega = 2.0 * math.pi * transition.lande_g * BOHR_MAGNETON_HZ_PER_GAUSS * field_gauss
    return BeatModulation(enabled=True, amplitude=amplitude,
                          angular_frequency_rad_s=omega, phase_rad=phase_rad)


@dataclass(frozen=True)
class TdcSpec:
    bin_width_ps: float = 100.0
    jitter_sigma_ps: float = 0.0
    scale_error_ppm: float = 0.0
    inl_rms_ps: float = 0.0
    inl_seed: int = 0

    def __post_init__(self):
        _require(_finite(self.bin_width_ps) and self.bin_width_ps > 0,
                 f"bin width must be positive, got {self.bin_width_ps}",
                 'bin_width_ps', 'TdcSpec: bin_width > 0')
        _require(_finite(self.jitter_sigma_ps) and self.jitter_sigma_ps >= 0,
                 f"jitter must be >= 0, got {self.jitter_sigma_ps}",
                 'jitter_sigma_ps', 'TdcSpec: jitter_sigma >= 0')
        _require(_finite(self.scale_error_ppm), "scale error must be finite",
                 'scale_error_ppm', 'TdcSpec: finite scale error')
        _require(_finite(self.inl_rms_ps) and self.inl_rms_ps >= 0,
                 f"INL rms must be >= 0, got {self.inl_rms_ps}",
                 'inl_rms_ps', 'TdcSpec: inl_rms >= 0')
        _require(int(self.inl_seed) == self.inl_seed and self.inl_seed >= 0,
                 f"INL seed must be a non-negative integer, got {self.inl_seed}",
                 'inl_seed', 'TdcSpec: inl_seed >= 0')


@dataclass(frozen=True)
class ParametricResponse:
    """Detector response: exponentially modified Gaussian plus ringing echoes.

    ``echoes`` holds (delay_ns, relative_amplitude) pairs. Each echo is a copy
    of the main peak shifted by its delay and weighted by its amplitude.
    """

    rise_sigma_ps: float = 0.0
    tail_ns: float = 0.0
    delay_ns: float = 0.0
    echoes: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        _require(_finite(self.rise_sigma_ps) and self.rise_sigma_ps >= 0,
                 f"rise sigma must be >= 0, got {self.rise_sigma_ps}",
                 'irf_rise_sigma_ps', 'InstrumentResponse: rise sigma >= 0')
        _require(_finite(self.tail_ns) and self.tail_ns >= 0,
                 f"tail constant must be >= 0, got {self.tail_ns}",
                 'irf_tail_ns', 'InstrumentResponse: tail >= 0')
        _require(_finite(self.delay_ns), "delay must be finite",
                 'irf_delay_ns', 'InstrumentResponse: finite delay')
        echoes = tuple((float(d), float(a)) for d, a in self.echoes)
        object.__setattr__(self, 'echoes', echoes)
        for delay, amplitude in echoes:
            _require(_finite(delay) and delay >= 0, f"echo delay must be >= 0, got {delay}",
                     'irf_echo_delays_ns', 'InstrumentResponse: echo delay >= 0')
            _require(_finite(amplitude) and 0.0 <= amplitude < 1.0,
                     f"echo amplitude must lie in [0, 1), got {amplitude}",
                     'irf_echo_amplitudes', 'InstrumentResponse: 0 <= echo amplitude < 1')

    @property
    def component_weights(self) -> np.ndarray:
        """Mixture weights: main peak first, then one per echo."""
        amplitudes = np.array([1.0] + [a for _, a in self.echoes])
        return amplitudes / amplitudes.sum()

    @property
    def echo_fraction(self) -> float:
        total = sum(a for _, a in self.echoes)
        return total / (1.0 + total)


@dataclass(frozen=True)
class EmpiricalResponse:
    """Measured or simulated response given as a normalized histogram of delays."""

    histogram: TimeHistogram

    @classmethod
    def from_histogram(cls, hist: TimeHistogram) -> 'EmpiricalResponse':
        total = float(hist.total)
        if total <= 0:
            raise DomainError("cannot build a response from an empty histogram")
        normalized = hist.with_counts(np.asarray(hist.counts, dtype=float) / total)
        return cls(normalized)


InstrumentResponse = Union[ParametricResponse, EmpiricalResponse]


@dataclass(frozen=True)
class ExperimentConfig:
    transition: AtomicTransition
    pulse: PulseParams
    train: PulseTrain
    irf: InstrumentResponse
    tdc: TdcSpec
    beats: BeatModulation = field(default_factory=BeatModulation)
    detection_efficiency: float = 0.0
    prompt_scatter_prob: float = 0.0
    background_rate_hz: float = 0.0
    duration_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ('detection_efficiency', 'prompt_scatter_prob'):
            value = getattr(self, name)
            _require(_finite(value) and 0.0 <= value <= 1.0,
                     f"{name} must be a probability, got {value}",
                     name, 'ExperimentConfig: probabilities in [0, 1]')
        _require(_finite(self.background_rate_hz) and self.background_rate_hz >= 0,
                 f"background rate must be >= 0, got {self.background_rate_hz}",
                 'background_rate_hz', 'ExperimentConfig: background_rate >= 0')
        _require(_finite(self.duration_s) and self.duration_s > 0,
                 f"duration must be positive, got {self.duration_s}",
                 'duration_s', 'ExperimentConfig: duration > 0')
        _require(int(self.seed) == self.seed and 0 <= self.seed < 2 ** 63,
                 f"seed must be a non-negative integer, got {self.seed}",
                 'seed', 'ExperimentConfig: 0 <= seed < 2^63')
        period_bins = self.period_ps / self.tdc.bin_width_ps
        _require(abs(period_bins - round(period_bins)) <= 1e-9 * max(period_bins, 1.0),
                 f"pulse period {self.period_ps} ps is not a multiple of the TDC bin {self.tdc.bin_width_ps} ps",
                 'pulse_spacing_ns', 'ExperimentConfig: period is an integer number of TDC bins')

    @property
    def period_ps(self) -> float:
        return self.train.period_ns * 1000.0

    @property
    def frame_ps(self) -> float:
        return self.train.frame_ns * 1000.0

    @property
    def n_cycles(self) -> int:
        return int(round(self.duration_s * self.train.cycle_rate_hz))

    @property
    def n_pulses(self) -> int:
        return self.n_cycles * self.train.pulses_per_cycle

    @property
    def per_pulse_detection_prob(self) -> float:
        """Probability that one pulse yields a detected fluorescence photon."""
        return excitation_probability(self.pulse, self.transition) * self.detection_efficiency

    @property
    def per_pulse_event_prob(self) -> float:
        """Probability that one pulse yields any correlated event (prompt or decay)."""
        q = self.prompt_scatter_prob
        return q + (1.0 - q) * self.per_pulse_detection_prob

    def expected_event_counts(self) -> Dict[str, float]:
        q = self.prompt_scatter_prob
        n = self.n_pulses
        return {
            'decay': n * (1.0 - q) * self.per_pulse_detection_prob,
            'prompt': n * q,
            'background': self.background_rate_hz * self.n_cycles / self.train.cycle_rate_hz,
        }

    def expected_rate_hz(self) -> float:
        """Rate law: cycle_rate * pulses * per-pulse event probability + background."""
        train = self.train
        return train.cycle_rate_hz * train.pulses_per_cycle * self.per_pulse_event_prob + self.background_rate_hz


def efficiency_for_detection_probability(per_pulse_prob: float, prompt_prob: float,
                                         pulse: PulseParams, transition: AtomicTransition) -> float:
    """Detection efficiency giving ``per_pulse_prob`` correlated events per pulse.

    The target counts prompt and decay events together; the decay share is
    what remains after the prompt probability.
    """
    if not (0.0 <= prompt_prob <= per_pulse_prob <= 1.0):
        raise ConfigurationError(
            f"per-pulse detection probability {per_pulse_prob} must lie in [prompt_scatter_prob, 1]",
            key='per_pulse_detection_prob', invariant='prompt_scatter_prob <= per_pulse_detection_prob <= 1')
    p_exc = excitation_probability(pulse, transition)
    if p_exc <= 0:
        raise ConfigurationError("excitation probability is zero; cannot derive an efficiency",
                                 key='per_pulse_detection_prob')
    efficiency = (per_pulse_prob - prompt_prob) / ((1.0 - prompt_prob) * p_exc)
    if efficiency > 1.0:
        raise ConfigurationError(
            f"per-pulse detection probability {per_pulse_prob} needs efficiency {efficiency:.3g} > 1",
            key='per_pulse_detection_prob', invariant='ExperimentConfig: probabilities in [0, 1]')
    return efficiency


class EventRecord(NamedTuple):
    cycle_index: int
    pulse_index: int
    raw_time_ps: float
    kind: Optional[str]


@dataclass(frozen=True, eq=False)
class EventTable:
    """Columnar event stream, ordered by (cycle, pulse, raw time).

    ``kind`` is the simulator truth tag (see KIND_NAMES); it is None for
    blinded data read back from disk.
    """

    cycle_index: np.ndarray
    pulse_index: np.ndarray
    raw_time_ps: np.ndarray
    kind: Optional[np.ndarray]
    frame_ps: float
    period_ps: float
    exposure_s: float = 0.0
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.cycle_index)
        columns = [self.pulse_index, self.raw_time_ps] + ([self.kind] if self.kind is not None else [])
        if any(len(c) != n for c in columns):
            raise ValueError("event columns must have equal length")
        if n and not np.all(np.isfinite(self.raw_time_ps)):
            raise ValueError("raw times must be finite")

    @classmethod
    def empty(cls, frame_ps: float, period_ps: float, exposure_s: float = 0.0) -> 'EventTable':
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                   np.zeros(0, dtype=float), np.zeros(0, dtype=np.int8),
                   frame_ps, period_ps, exposure_s)

    def __len__(self) -> int:
        return len(self.cycle_index)

    def __iter__(self) -> Iterator[EventRecord]:
        kinds = self.kind if self.kind is not None else [None] * len(self)
        for cycle, pulse, raw, kind in zip(self.cycle_index.tolist(), self.pulse_index.tolist(),
                                           self.raw_time_ps.tolist(), list(kinds)):
            yield EventRecord(cycle, pulse, raw, KIND_NAMES[int(kind)] if kind is not None else None)

    @property
    def blinded(self) -> bool:
        return self.kind is None

    def counts_by_kind(self) -> Dict[str, int]:
        if self.kind is None:
            raise ValueError("blinded event stream carries no truth tags")
        counts = np.bincount(self.kind.astype(np.int64), minlength=len(KIND_NAMES))
        return {name: int(counts[i]) for i, name in enumerate(KIND_NAMES)}

    def select(self, kind: str) -> 'EventTable':
        if self.kind is None:
            raise ValueError("blinded event stream carries no truth tags")
        mask = self.kind == KIND_NAMES.index(kind)
        return replace(self, cycle_index=self.cycle_index[mask], pulse_index=self.pulse_index[mask],
                       raw_time_ps=self.raw_time_ps[mask], kind=self.kind[mask])

    def blind(self) -> 'EventTable':
        return replace(self, kind=None)

    def equals(self, other: 'EventTable') -> bool:
        same_kind = (self.kind is None and other.kind is None) or (
            self.kind is not None and other.kind is not None and np.array_equal(self.kind, other.kind))
        return (same_kind
                and np.array_equal(self.cycle_index, other.cycle_index)
                and np.array_equal(self.pulse_index, other.pulse_index)
                and np.array_equal(self.raw_time_ps, other.raw_time_ps)
                and self.frame_ps == other.frame_ps and self.period_ps == other.period_ps)


# =============================================================================
# Operations
# =============================================================================

def excitation_probability(pulse: PulseParams, transition: AtomicTransition) -> float:
    """Probability that one pulse promotes the ion to the excited level.

    P = sin^2 sqrt((gamma^2 / 4 pi I_s) (E t / w^2)). The result is monotone
    in energy only up to the first Rabi maximum; the argument is not clamped.
    """
    values = (pulse.energy_pj, pulse.duration_ps, pulse.waist_um)
    if not all(_finite(v) and v >= 0 for v in values):
        raise DomainError(f"pulse parameters must be finite and non-negative, got {values}")
    if pulse.energy_pj == 0:
        return 0.0
    if pulse.waist_um <= 0:
        raise DomainError("beam waist must be positive")
    saturation = transition.saturation_intensity
    if not (_finite(saturation) and saturation > 0):
        raise DomainError(f"saturation intensity must be positive, got {saturation}")

    gamma = transition.linewidth
    energy_j = pulse.energy_pj * 1e-12
    duration_s = pulse.duration_ps * 1e-12
    waist_m = pulse.waist_um * 1e-6
    argument = (gamma ** 2 / (4.0 * math.pi * saturation)) * (energy_j * duration_s / waist_m ** 2)
    return math.sin(math.sqrt(argument)) ** 2


def _beat_terms(transition: AtomicTransition, beats: BeatModulation):
    tau = transition.lifetime_ns
    omega = beats.angular_frequency_rad_s * 1e-9  # rad/ns
    z = np.exp(1j * beats.phase_rad) / (1.0 - 1j * omega * tau)
    norm = 1.0 + beats.amplitude * z.real
    return tau, omega, z, norm


def emission_density(t_ns, transition: AtomicTransition, beats: Optional[BeatModulation] = None):
    """Probability density of the emission delay (per ns)."""
    t = np.asarray(t_ns, dtype=float)
    tau = transition.lifetime_ns
    base = np.where(t >= 0, np.exp(-np.clip(t, 0, None) / tau) / tau, 0.0)
    if beats is None or not beats.active or beats.amplitude == 0:
        return base
    _, omega, _, norm = _beat_terms(transition, beats)
    return base * (1.0 + beats.amplitude * np.cos(omega * t + beats.phase_rad)) / norm


def emission_cdf(t_ns, transition: AtomicTransition, beats: Optional[BeatModulation] = None):
    """Closed-form cumulative distribution of the emission delay."""
    t = np.clip(np.asarray(t_ns, dtype=float), 0.0, None)
    tau = transition.lifetime_ns
    plain = -np.expm1(-t / tau)
    if beats is None or not beats.active or beats.amplitude == 0:
        return plain
    tau, omega, z, norm = _beat_terms(transition, beats)
    oscillating = (z * (1.0 - np.exp(-(1.0 / tau - 1j * omega) * t))).real
    return (plain + beats.amplitude * oscillating) / norm


def sample_emission_delay(transition: AtomicTransition, beats: BeatModulation,
                          rng: np.random.Generator, size: Optional[int] = None):
    """Draw spontaneous-emission delays in ns.

    Without beats the delay is exponential. With beats enabled the closed-form
    CDF is inverted by bisection to a tolerance of 1e-4 lifetimes.
    """
    if not beats.active:
        return rng.exponential(transition.lifetime_ns, size)
    amplitude = beats.amplitude
    if amplitude >= 1.0:
        raise DomainError(f"beat amplitude must be < 1 to keep the density positive, got {amplitude}")

    tau = transition.lifetime_ns
    u = rng.random(size)
    lo = np.zeros_like(u, dtype=float)
    hi = tau * (-np.log1p(-u) + math.log((1.0 + amplitude) / (1.0 - amplitude)) + 1.0)
    width = float(np.max(hi)) if np.size(hi) else 0.0
    n_steps = max(1, int(math.ceil(math.log2(max(width, tau) / (SAMPLING_TOLERANCE * tau)))) + 1)
    for _ in range(n_steps):
        mid = 0.5 * (lo + hi)
        below = emission_cdf(mid, transition, beats) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    result = 0.5 * (lo + hi)
    if size is None:
        return float(result)
    return result


def generate_inl_pattern(tdc: TdcSpec, n_bins: int) -> np.ndarray:
    """Smooth zero-mean integral non-linearity offsets (ps), one per TDC bin.

    A handful of low harmonics with random amplitudes and phases, rescaled to
    the requested rms. Pure function of (inl_seed, n_bins).
    """
    if int(n_bins) != n_bins or n_bins < 1:
        raise ConfigurationError(f"n_bins must be a positive integer, got {n_bins}", key='n_bins')
    n_bins = int(n_bins)
    if tdc.inl_rms_ps == 0 or n_bins < 2:
        return np.zeros(n_bins)

    rng = np.random.default_rng([int(tdc.inl_seed), n_bins])
    n_harmonics = max(1, min(6, n_bins // 2))
    harmonics = np.arange(1, n_harmonics + 1)
    amplitudes = rng.normal(size=n_harmonics) / harmonics
    phases = rng.uniform(0.0, 2.0 * math.pi, size=n_harmonics)
    index = np.arange(n_bins)
    pattern = (amplitudes[:, None] * np.cos(2.0 * math.pi * harmonics[:, None] * index / n_bins
                                            + phases[:, None])).sum(axis=0)
    pattern -= pattern.mean()
    rms = math.sqrt(float(np.mean(pattern ** 2)))
    if rms == 0:
        return np.zeros(n_bins)
    return pattern * (tdc.inl_rms_ps / rms)


def digitize(true_time_ps, tdc: TdcSpec, inl: Optional[np.ndarray] = None,
             rng: Optional[np.random.Generator] = None):
    """TDC reading for a true start-stop interval (ps): jitter, scale, INL, floor.

    Returns the left edge of the bin the reading falls in.
    """
    scalar = np.ndim(true_time_ps) == 0
    t = np.array(true_time_ps, dtype=float, ndmin=1)
    if tdc.jitter_sigma_ps > 0:
        if rng is None:
            raise ValueError("a random generator is required when the TDC has jitter")
        t = t + rng.normal(0.0, tdc.jitter_sigma_ps, size=t.shape)
    if tdc.scale_error_ppm:
        t = t * (1.0 + tdc.scale_error_ppm * 1e-6)
    width = tdc.bin_width_ps
    if inl is not None and len(inl) and np.any(inl):
        index = np.floor(t / width).astype(np.int64) % len(inl)
        t = t + inl[index]
    edges = np.floor(t / width) * width
    return float(edges[0]) if scalar else edges


def sample_response_delays(irf: InstrumentResponse, rng: np.random.Generator, size: int,
                           return_component: bool = False):
    """Detector delays (ps) drawn from the instrument response.

    With ``return_component`` the mixture component of each draw is returned
    too (0 = main peak, i = i-th echo; always 0 for empirical responses).
    """
    if isinstance(irf, EmpiricalResponse):
        hist = irf.histogram
        weights = np.asarray(hist.counts, dtype=float)
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise DomainError(f"empirical response must be normalized, sums to {weights.sum():.12g}")
        index = rng.choice(len(weights), size=size, p=weights / weights.sum())
        delays = hist.origin_ps + index * hist.bin_width_ps
        component = np.zeros(size, dtype=np.int64)
    elif isinstance(irf, ParametricResponse):
        delays = np.full(size, irf.delay_ns * 1000.0)
        if irf.echoes:
            component = rng.choice(len(irf.echoes) + 1, size=size, p=irf.component_weights)
            echo_delays = np.array([0.0] + [d * 1000.0 for d, _ in irf.echoes])
            delays = delays + echo_delays[component]
        else:
            component = np.zeros(size, dtype=np.int64)
        if irf.rise_sigma_ps > 0:
            delays = delays + rng.normal(0.0, irf.rise_sigma_ps, size)
        if irf.tail_ns > 0:
            delays = delays + rng.exponential(irf.tail_ns * 1000.0, size)
    else:
        raise DomainError(f"unsupported instrument response {type(irf).__name__}")
    if return_component:
        return delays, component
    return delays


def apply_instrument_response(emission_time_ps, irf: InstrumentResponse, rng: np.random.Generator):
    """Detected analog time (ps): emission time plus a delay drawn from the IRF."""
    scalar = np.ndim(emission_time_ps) == 0
    t = np.array(emission_time_ps, dtype=float, ndmin=1)
    detected = t + sample_response_delays(irf, rng, t.size)
    return float(detected[0]) if scalar else detected


def block_generator(seed: int, block_index: int) -> np.random.Generator:
    """Counter-based stream for one block of cycles."""
    key = np.array([int(seed), int(block_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _bernoulli_positions(rng: np.random.Generator, n_trials: int, p: float) -> np.ndarray:
    """Indices of successes among ``n_trials`` Bernoulli(p) trials, via geometric gaps."""
    if n_trials <= 0 or p <= 0:
        return np.zeros(0, dtype=np.int64)
    if p >= 1:
        return np.arange(n_trials, dtype=np.int64)
    chunks: List[np.ndarray] = []
    last = -1
    expected = n_trials * p
    while last < n_trials - 1:
        draws = int(expected + 6.0 * math.sqrt(expected) + 16)
        positions = last + np.cumsum(rng.geometric(p, size=draws))
        chunks.append(positions)
        last = int(positions[-1])
    positions = np.concatenate(chunks)
    return positions[positions < n_trials]


def _simulate_block(task: Tuple[ExperimentConfig, int, int, int, np.ndarray]):
    cfg, block_index, first_cycle, n_cycles, inl = task
    rng = block_generator(cfg.seed, block_index)
    train = cfg.train
    ppc = train.pulses_per_cycle
    period_ps = cfg.period_ps
    frame_ps = cfg.frame_ps

    p_event = cfg.per_pulse_event_prob
    positions = _bernoulli_positions(rng, n_cycles * ppc, p_event)
    n_events = positions.size
    prompt_share = cfg.prompt_scatter_prob / p_event if p_event > 0 else 0.0
    is_prompt = rng.random(n_events) < prompt_share

    emission_ps = np.zeros(n_events)
    decay = ~is_prompt
    emission_ps[decay] = sample_emission_delay(cfg.transition, cfg.beats, rng,
                                               size=int(decay.sum())) * 1000.0
    detected_ps = apply_instrument_response(emission_ps, cfg.irf, rng)
    pulses = positions % ppc
    readings = digitize(frame_ps - (pulses * period_ps + detected_ps), cfg.tdc, inl, rng)

    n_background = rng.poisson(cfg.background_rate_hz * n_cycles / train.cycle_rate_hz)
    bg_cycles = rng.integers(0, n_cycles, size=n_background)
    bg_true = rng.random(n_background) * frame_ps
    bg_readings = digitize(bg_true, cfg.tdc, inl, rng)
    bg_pulses = np.clip(ppc - 1 - np.floor(bg_true / period_ps).astype(np.int64), 0, ppc - 1)

    cycles = np.concatenate([positions // ppc, bg_cycles]).astype(np.int64) + first_cycle
    pulse_index = np.concatenate([pulses, bg_pulses]).astype(np.int64)
    raw = np.concatenate([readings, bg_readings])
    kind = np.concatenate([np.where(is_prompt, KIND_PROMPT, KIND_DECAY),
                           np.full(n_background, KIND_BACKGROUND)]).astype(np.int8)
    order = np.lexsort((raw, pulse_index, cycles))
    return cycles[order], pulse_index[order], raw[order], kind[order]


def run_experiment(config: ExperimentConfig, workers: Optional[int] = None,
                   cycles_per_block: Optional[int] = None) -> EventTable:
    """Simulate every cycle of the run and return the detected event stream."""
    workers = workers or app_config.DEFAULT_WORKERS
    block = cycles_per_block or app_config.CYCLES_PER_BLOCK
    n_cycles = config.n_cycles
    frame_bins = int(math.ceil(config.frame_ps / config.tdc.bin_width_ps - 1e-9))
    inl = generate_inl_pattern(config.tdc, max(frame_bins, 1))

    tasks = []
    for block_index, first in enumerate(range(0, n_cycles, block)):
        tasks.append((config, block_index, first, min(block, n_cycles - first), inl))

    logger.info(f"Simulating {n_cycles} cycles in {len(tasks)} blocks with {workers} worker(s)")
    if workers > 1 and len(tasks) > 1:
        with Pool(processes=workers) as pool:
            parts = pool.map(_simulate_block, tasks)
    else:
        parts = [_simulate_block(task) for task in tasks]

    exposure = n_cycles / config.train.cycle_rate_hz
    if not parts:
        return EventTable.empty(config.frame_ps, config.period_ps, exposure)

    columns = [np.concatenate([p[i] for p in parts]) for i in range(4)]
    events = EventTable(columns[0], columns[1], columns[2], columns[3],
                        frame_ps=config.frame_ps, period_ps=config.period_ps, exposure_s=exposure,
                        metadata={'seed': str(config.seed), 'transition': config.transition.label})
    if len(events):
        counts = events.counts_by_kind()
        logger.info(f"Generated {len(events)} events ({counts['decay']} decay, "
                    f"{counts['prompt']} prompt, {counts['background']} background)")
    else:
        logger.info("Generated an empty event stream")
    return events


def simulate_irf_measurement(config: ExperimentConfig, duration_s: Optional[float] = None,
                             prompt_prob: Optional[float] = None,
                             workers: Optional[int] = None) -> TimeHistogram:
    """Self-measured instrument response: a prompt-only run, folded and inverted.

    Mirrors viewing laser light scattered off an electrode: the decay channel
    and background are off, every event is prompt.
    """
    settings = app_config.SIMULATION_CONFIG
    measurement = replace(
        config,
        detection_efficiency=0.0,
        background_rate_hz=0.0,
        prompt_scatter_prob=settings['irf_measurement_prompt_prob'] if prompt_prob is None else prompt_prob,
        duration_s=settings['irf_measurement_s'] if duration_s is None else duration_s,
        beats=BeatModulation(),
    )
    events = run_experiment(measurement, workers=workers)
    raw = histogram_events(events, config.tdc.bin_width_ps, config.frame_ps)
    folded = fold_and_invert(raw, config.period_ps)
    metadata = dict(folded.metadata)
    metadata.update({'kind': 'irf', 'emitted_prompt': str(len(events))})
    logger.info(f"IRF measurement: {len(events)} prompt events, {int(folded.total)} histogrammed")
    return folded.with_metadata(metadata)


def simulate_dark_measurement(config: ExperimentConfig, duration_s: Optional[float] = None,
                              workers: Optional[int] = None) -> TimeHistogram:
    """Dark-count run with the ion fluorescence and scatter blocked, folded and inverted.

    Only uncorrelated background events are recorded, so the folded counts
    are flat and their mean per bin measures the background of a data run.
    """
    settings = app_config.SIMULATION_CONFIG
    measurement = replace(
        config,
        detection_efficiency=0.0,
        prompt_scatter_prob=0.0,
        duration_s=settings['dark_measurement_s'] if duration_s is None else duration_s,
        seed=int(np.random.SeedSequence([int(config.seed), 1]).generate_state(1)[0]),
        beats=BeatModulation(),
    )
    events = run_experiment(measurement, workers=workers)
    raw = histogram_events(events, config.tdc.bin_width_ps, config.frame_ps)
    folded = fold_and_invert(raw, config.period_ps)
    metadata = dict(folded.metadata)
    metadata.update({'kind': 'dark'})
    logger.info(f"Dark measurement: {int(folded.total)} background counts in {measurement.duration_s:g} s")
    return folded.with_metadata(metadata)


def describe_config(config: ExperimentConfig) -> Dict[str, Any]:
    """Flat summary used for logging and report settings echoes."""
    return {
        'transition': config.transition.label,
        'lifetime_ns': config.transition.lifetime_ns,
        'excitation_probability': excitation_probability(config.pulse, config.transition),
        'per_pulse_detection_prob': config.per_pulse_detection_prob,
        'per_pulse_event_prob': config.per_pulse_event_prob,
        'prompt_scatter_prob': config.prompt_scatter_prob,
        'background_rate_hz': config.background_rate_hz,
        'pulses_per_cycle': config.train.pulses_per_cycle,
        'period_ns': config.train.period_ns,
        'cycle_rate_hz': config.train.cycle_rate_hz,
        'duration_s': config.duration_s,
        'expected_rate_hz': config.expected_rate_hz(),
        'seed': config.seed,
    }
