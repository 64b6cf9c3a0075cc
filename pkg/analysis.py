# analysis.py - Lifetime analysis: folding, Poisson fits, start-time scans, template matching
"""
Turns raw TDC readings into a lifetime with statistical and systematic errors.

Pipeline: histogram the raw readings, fold the pulse train onto one pulse
period and invert the time axis, fit a single exponential by Poisson maximum
likelihood while stepping the fit start away from the peak, then match that
start-time scan with the scan of a simulated template (measured instrument
response convolved with the decay, plus a prompt peak).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, ndimage, optimize

from config import config
from errors import ConfigurationError, DomainError, ExtractionError

logger = logging.getLogger(__name__)

MODELS = ('wrapped', 'bare')
BACKGROUND_MODES = ('measured', 'floated', 'zero')
COMBINE_RULE = 'quadrature'

CONVERGENCE_TOLERANCE = 1e-9
MAX_ITERATIONS = 200


# =============================================================================
# Histograms
# =============================================================================

@dataclass(frozen=True, eq=False)
class TimeHistogram:
    """Counts per time bin.

    Integer counts for data; float counts for model spectra. For folded and
    inverted histograms bin m covers delays (m*w, (m+1)*w] after the pulse.
    """

    bin_width_ps: float
    origin_ps: float
    counts: np.ndarray
    exposure_s: float = 0.0
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.bin_width_ps) and self.bin_width_ps > 0):
            raise ConfigurationError(f"bin width must be positive, got {self.bin_width_ps}",
                                     key='bin_width_ps', invariant='TimeHistogram: bin_width > 0')
        counts = np.array(self.counts)
        if counts.ndim != 1:
            raise ValueError("histogram counts must be one-dimensional")
        if counts.dtype.kind == 'u' or counts.dtype.kind == 'b':
            counts = counts.astype(np.int64)
        elif counts.dtype.kind not in 'if':
            counts = counts.astype(float)
        if counts.size and (not np.all(np.isfinite(counts)) or np.any(counts < 0)):
            raise DomainError("histogram counts must be finite and non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, 'counts', counts)
        object.__setattr__(self, 'metadata', {str(k): str(v) for k, v in dict(self.metadata).items()})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TimeHistogram):
            return NotImplemented
        return (self.bin_width_ps == other.bin_width_ps
                and self.origin_ps == other.origin_ps
                and self.exposure_s == other.exposure_s
                and self.metadata == other.metadata
                and self.counts.dtype.kind == other.counts.dtype.kind
                and np.array_equal(self.counts, other.counts))

    __hash__ = None

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    @property
    def is_integral(self) -> bool:
        return self.counts.dtype.kind == 'i'

    @property
    def total(self):
        total = self.counts.sum()
        return int(total) if self.is_integral else float(total)

    @property
    def span_ps(self) -> float:
        return self.n_bins * self.bin_width_ps

    @property
    def bin_width_ns(self) -> float:
        return self.bin_width_ps / 1000.0

    @property
    def bin_starts_ps(self) -> np.ndarray:
        return self.origin_ps + np.arange(self.n_bins) * self.bin_width_ps

    @property
    def peak_bin(self) -> int:
        """Argmax of the counts after Gaussian smoothing along the periodic time axis.

        The width comes from ANCHOR_SMOOTHING_BINS; 0 gives the raw argmax.
        """
        if not self.n_bins:
            return 0
        sigma = config.ANALYSIS_CONFIG['anchor_smoothing_bins']
        counts = self.counts.astype(float)
        if sigma > 0:
            counts = ndimage.gaussian_filter1d(counts, sigma, mode='wrap')
        return int(np.argmax(counts))

    def with_counts(self, counts, **metadata) -> 'TimeHistogram':
        merged = dict(self.metadata)
        merged.update({k: str(v) for k, v in metadata.items()})
        return TimeHistogram(self.bin_width_ps, self.origin_ps, counts, self.exposure_s, merged)

    def with_metadata(self, metadata: Dict[str, Any]) -> 'TimeHistogram':
        return TimeHistogram(self.bin_width_ps, self.origin_ps, self.counts, self.exposure_s, metadata)

    def normalized(self) -> 'TimeHistogram':
        total = float(self.counts.sum())
        if total <= 0:
            raise DomainError("cannot normalize an empty histogram")
        return self.with_counts(self.counts / total, normalized='true')


def histogram_events(events, bin_width_ps: float, span_ps: float, origin_ps: float = 0.0) -> TimeHistogram:
    """Histogram raw readings; readings outside the span go to the metadata counters."""
    if not (math.isfinite(bin_width_ps) and bin_width_ps > 0):
        raise ConfigurationError(f"bin width must be positive, got {bin_width_ps}",
                                 key='bin_width_ps', invariant='bin_width > 0')
    n_bins = int(math.ceil(span_ps / bin_width_ps - 1e-9))
    if n_bins < 1:
        raise ConfigurationError(f"span {span_ps} ps holds no bins", key='span_ps')

    if hasattr(events, 'raw_time_ps'):
        raw = np.asarray(events.raw_time_ps, dtype=float)
        metadata = dict(getattr(events, 'metadata', {}))
        exposure = float(getattr(events, 'exposure_s', 0.0))
        period = getattr(events, 'period_ps', None)
    else:
        raw = np.fromiter((e.raw_time_ps for e in events), dtype=float)
        metadata, exposure, period = {}, 0.0, None

    index = np.floor((raw - origin_ps) / bin_width_ps + 1e-9).astype(np.int64)
    underflow = int(np.count_nonzero(index < 0))
    overflow = int(np.count_nonzero(index >= n_bins))
    inside = index[(index >= 0) & (index < n_bins)]
    counts = np.bincount(inside, minlength=n_bins).astype(np.int64)

    metadata.update({'underflow': str(underflow), 'overflow': str(overflow)})
    if period is not None:
        metadata['period_ps'] = repr(float(period))
    if underflow or overflow:
        logger.warning(f"{underflow} readings below and {overflow} above the histogram span")
    return TimeHistogram(bin_width_ps, origin_ps, counts, exposure, metadata)


def period_bins(period_ps: float, bin_width_ps: float) -> int:
    ratio = period_ps / bin_width_ps
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9 * max(ratio, 1.0):
        raise ConfigurationError(
            f"period {period_ps} ps is not an integer multiple of the bin width {bin_width_ps} ps",
            key='period_ps', invariant='period is an integer multiple of bin_width')
    return n


def fold_and_invert(hist: TimeHistogram, period_ps: float) -> TimeHistogram:
    """Sum bins congruent modulo the pulse period, then reverse the bin order.

    Total counts are conserved exactly.
    """
    n = period_bins(period_ps, hist.bin_width_ps)
    counts = hist.counts
    pad = (-counts.size) % n if counts.size else n
    padded = np.concatenate([counts, np.zeros(pad, dtype=counts.dtype)])
    folded = padded.reshape(-1, n).sum(axis=0)[::-1].copy()

    metadata = dict(hist.metadata)
    metadata.update({'folded': 'true', 'period_ps': repr(float(period_ps))})
    return TimeHistogram(hist.bin_width_ps, 0.0, folded, hist.exposure_s, metadata)


def is_folded(hist: TimeHistogram) -> bool:
    return hist.metadata.get('folded', '').lower() == 'true'


# =============================================================================
# Poisson maximum-likelihood decay fit
# =============================================================================

@dataclass(frozen=True)
class FitWindow:
    """Fit range in ns, measured from the anchor (peak) bin."""

    start_offset_ns: float
    end_offset_ns: float

    def __post_init__(self):
        if not (math.isfinite(self.start_offset_ns) and math.isfinite(self.end_offset_ns)
                and 0.0 <= self.start_offset_ns < self.end_offset_ns):
            raise ConfigurationError(
                f"invalid window [{self.start_offset_ns}, {self.end_offset_ns}] ns",
                key='window', invariant='FitWindow: 0 <= start_offset < end_offset')


@dataclass(frozen=True, eq=False)
class FitResult:
    tau_ns: float
    tau_stat_ns: float
    amplitude: float
    amplitude_err: float
    background_level: float
    background_err: float
    covariance: np.ndarray
    param_names: Tuple[str, ...]
    gof: float
    deviance: float
    ndf: int
    n_bins_used: int
    converged: bool
    model: str
    window: FitWindow
    anchor_bin: int
    start_bin: int
    bin_width_ns: float
    period_ns: float
    prompt_fraction: float = 0.0
    diagnostic: str = ''
    # d tau / d background for fits with the background held fixed
    tau_background_slope: float = 0.0

    def shape(self, t_ns: np.ndarray) -> np.ndarray:
        return _decay_shape(np.asarray(t_ns, dtype=float), self.tau_ns, self.model, self.period_ns)[0]

    def model_counts(self, n_bins: int) -> np.ndarray:
        """Fitted expectation per histogram bin; NaN outside the fit window."""
        expected = np.full(n_bins, np.nan)
        if not self.n_bins_used or not math.isfinite(self.tau_ns):
            return expected
        k = np.arange(self.n_bins_used)
        index = self.start_bin + k
        if self.model == 'wrapped':
            index = index % n_bins
        expected[index] = self.amplitude * self.shape(k * self.bin_width_ns) + self.background_level
        return expected


def _decay_shape(t_ns: np.ndarray, tau: float, model: str, period_ns: float):
    """Decay shape g(t; tau) with its first and second tau-derivatives."""
    if model == 'bare':
        g = np.exp(-t_ns / tau)
        h = t_ns / tau ** 2
        h_prime = -2.0 * t_ns / tau ** 3
    else:
        u = np.mod(t_ns, period_ns)
        q = math.exp(-period_ns / tau)
        one_minus_q = -math.expm1(-period_ns / tau)
        g = np.exp(-u / tau) / one_minus_q
        h = u / tau ** 2 + q * period_ns / (tau ** 2 * one_minus_q)
        h_prime = (-2.0 * u / tau ** 3
                   + period_ns * q * (period_ns - 2.0 * tau * one_minus_q) / (tau ** 4 * one_minus_q ** 2))
    dg = g * h
    d2g = g * (h * h + h_prime)
    return g, dg, d2g


def _expectation(theta: np.ndarray, t_ns: np.ndarray, model: str, period_ns: float,
                 background_level: float):
    amplitude, tau = theta[0], theta[1]
    background = theta[2] if theta.size == 3 else background_level
    g, dg, d2g = _decay_shape(t_ns, tau, model, period_ns)
    mu = amplitude * g + background
    columns = [g, amplitude * dg]
    if theta.size == 3:
        columns.append(np.ones_like(g))
    return mu, np.column_stack(columns), g, dg, d2g


def poisson_nll(theta, counts, t_ns, model: str = 'wrapped', period_ns: Optional[float] = None,
                background_level: float = 0.0) -> float:
    """Negative Poisson log-likelihood, without the log(y!) constant.

    ``theta`` is (amplitude, tau) or (amplitude, tau, background).
    """
    theta = np.asarray(theta, dtype=float)
    y = np.asarray(counts, dtype=float)
    if theta[1] <= 0:
        return math.inf
    mu = _expectation(theta, np.asarray(t_ns, dtype=float), model, period_ns, background_level)[0]
    if np.any(mu <= 0) or not np.all(np.isfinite(mu)):
        return math.inf
    return float(np.sum(mu - y * np.log(mu)))


def poisson_score(theta, counts, t_ns, model: str = 'wrapped', period_ns: Optional[float] = None,
                  background_level: float = 0.0) -> np.ndarray:
    """Analytic gradient of the Poisson log-likelihood with respect to ``theta``."""
    theta = np.asarray(theta, dtype=float)
    y = np.asarray(counts, dtype=float)
    mu, jacobian = _expectation(theta, np.asarray(t_ns, dtype=float), model, period_ns, background_level)[:2]
    return jacobian.T @ (y / mu - 1.0)


def _window_data(hist: TimeHistogram, window: FitWindow, model: str, anchor_bin: Optional[int]):
    n = hist.n_bins
    w_ns = hist.bin_width_ns
    if window.end_offset_ns > n * w_ns + 1e-9:
        raise ConfigurationError(
            f"window end {window.end_offset_ns} ns exceeds the histogram period {n * w_ns} ns",
            key='end_offset_ns', invariant='FitWindow: end_offset <= fold period')
    anchor = hist.peak_bin if anchor_bin is None else int(anchor_bin) % max(n, 1)
    start = int(round(window.start_offset_ns / w_ns))
    end = int(round(window.end_offset_ns / w_ns))
    offsets = np.arange(start, end)
    index = anchor + offsets
    if model == 'wrapped':
        index = index % n
    else:
        index = index[index < n]
    y = hist.counts[index].astype(float)
    t = np.arange(index.size) * w_ns
    return y, t, anchor, anchor + start


def _failed_fit(message: str, model: str, window: FitWindow, anchor: int, start_bin: int,
                n_used: int, w_ns: float, period_ns: float, fit_background: bool) -> FitResult:
    names = ('amplitude', 'tau', 'background') if fit_background else ('amplitude', 'tau')
    logger.warning(f"Decay fit failed: {message}")
    return FitResult(
        tau_ns=math.nan, tau_stat_ns=math.nan, amplitude=math.nan, amplitude_err=math.nan,
        background_level=math.nan, background_err=math.nan,
        covariance=np.full((len(names), len(names)), np.nan), param_names=names,
        gof=math.nan, deviance=math.nan, ndf=0, n_bins_used=n_used, converged=False,
        model=model, window=window, anchor_bin=anchor, start_bin=start_bin,
        bin_width_ns=w_ns, period_ns=period_ns, diagnostic=message)


def _initial_linear(y: np.ndarray, g: np.ndarray, fit_background: bool, background_level: float):
    if fit_background:
        design = np.column_stack([g, np.ones_like(g)])
        amplitude, background = np.linalg.lstsq(design, y, rcond=None)[0]
        if amplitude <= 0:
            background = float(np.min(y))
            amplitude = max(float(np.max(y)) - background, 1e-3) / float(np.max(g))
        mu = amplitude * g + background
        if np.min(mu) <= 0:
            background += 1e-3 * max(float(np.mean(y)), 1.0) - float(np.min(mu))
        return np.array([amplitude, 0.0, background])
    amplitude = float(np.sum((y - background_level) * g) / np.sum(g * g))
    if amplitude <= 0:
        amplitude = max(float(np.max(y)) - background_level, 1e-3) / float(np.max(g))
    return np.array([amplitude, 0.0])


def _information(theta: np.ndarray, y: np.ndarray, t: np.ndarray, model: str, period_ns: float,
                 background_level: float) -> Tuple[np.ndarray, np.ndarray]:
    """Observed information (Hessian of the NLL) and Fisher information at ``theta``."""
    mu, jacobian, _, dg, d2g = _expectation(theta, t, model, period_ns, background_level)
    fisher = jacobian.T @ (jacobian / mu[:, None])
    observed = jacobian.T @ (jacobian * (y / mu ** 2)[:, None])
    residual = 1.0 - y / mu
    observed[0, 1] += float(np.sum(residual * dg))
    observed[1, 0] = observed[0, 1]
    observed[1, 1] += float(np.sum(residual * theta[0] * d2g))
    return observed, fisher


def _minimize_nll(theta0: np.ndarray, y: np.ndarray, t: np.ndarray, model: str, period_ns: float,
                  background_level: float, tau_bounds: Tuple[float, float], max_iterations: int):
    """Trust-region Newton minimization of the Poisson NLL.

    Works in coordinates scaled by the starting point, so the gradient
    tolerance CONVERGENCE_TOLERANCE * counts bounds the relative parameter
    change. Returns (theta, nll, converged, iterations, diagnostic).
    """
    scale = np.where(np.abs(theta0) > 0, np.abs(theta0), 1.0)
    args = (y, t, model, period_ns, background_level)

    def valid(theta) -> bool:
        return tau_bounds[0] <= theta[1] <= tau_bounds[1]

    def nll(z):
        theta = z * scale
        return poisson_nll(theta, *args) if valid(theta) else math.inf

    def gradient(z):
        theta = z * scale
        if not math.isfinite(nll(z)):
            return np.zeros_like(z)
        return -poisson_score(theta, *args) * scale

    def hessian(z):
        theta = z * scale
        if not math.isfinite(nll(z)):
            return np.eye(z.size)
        return _information(theta, *args)[0] * np.outer(scale, scale)

    start = np.ones_like(scale)
    if not math.isfinite(nll(start)):
        return theta0, math.inf, False, 0, 'invalid starting point'
    gtol = CONVERGENCE_TOLERANCE * max(float(y.sum()), 1.0)
    with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
        solution = optimize.minimize(nll, start, jac=gradient, hess=hessian, method='trust-exact',
                                     options={'gtol': gtol, 'maxiter': max_iterations})
    theta = solution.x * scale
    value = nll(solution.x)
    converged = bool(solution.success) or float(np.linalg.norm(gradient(solution.x))) < gtol
    diagnostic = '' if converged else str(solution.message)
    return theta, value, converged and math.isfinite(value), int(solution.nit), diagnostic


def _covariance(theta: np.ndarray, y: np.ndarray, t: np.ndarray, model: str, period_ns: float,
                background_level: float) -> np.ndarray:
    """Inverse observed information; Fisher information when it is not positive definite."""
    observed, fisher = _information(theta, y, t, model, period_ns, background_level)
    try:
        np.linalg.cholesky(observed)
        covariance = np.linalg.inv(observed)
    except np.linalg.LinAlgError:
        covariance = np.linalg.pinv(fisher)
    return 0.5 * (covariance + covariance.T)


def fit_decay(hist: TimeHistogram, window: FitWindow, model: str = 'wrapped',
              fit_background: bool = True, background_level: Optional[float] = None,
              anchor_bin: Optional[int] = None, initial_tau_ns: Optional[float] = None,
              max_iterations: int = MAX_ITERATIONS) -> FitResult:
    """Poisson maximum-likelihood fit of A*g(t; tau) + b over a window.

    g is exp(-t/tau) for the bare model, or the period-wrapped
    exp(-(t mod T)/tau) / (1 - exp(-T/tau)) for the wrapped model, with t
    counted from the window start. The NLL is minimized with a trust-region
    Newton method on the analytic score and observed information, from three
    starting lifetimes unless one is given. Numerical trouble yields a result
    with ``converged=False`` and a diagnostic instead of an exception.
    """
    if model not in MODELS:
        raise ConfigurationError(f"unknown decay model '{model}'", key='model', invariant=f"model in {MODELS}")
    if background_level is not None and not (math.isfinite(background_level) and background_level >= 0):
        raise DomainError(f"fixed background must be >= 0, got {background_level}")
    fixed_background = 0.0 if background_level is None else float(background_level)
    if not fit_background and background_level is None:
        logger.debug("Background fixed at zero")

    w_ns = hist.bin_width_ns
    period_ns = hist.n_bins * w_ns
    y, t, anchor, start_bin = _window_data(hist, window, model, anchor_bin)
    failure = dict(model=model, window=window, anchor=anchor, start_bin=start_bin, n_used=y.size,
                   w_ns=w_ns, period_ns=period_ns, fit_background=fit_background)
    if y.size == 0:
        return _failed_fit('empty fit window', **failure)
    if not np.any(y > 0):
        return _failed_fit('all-zero counts in fit window', **failure)
    if np.count_nonzero(y) < 3:
        return _failed_fit('fewer than 3 occupied bins in fit window', **failure)

    window_ns = y.size * w_ns
    tau_bounds = (w_ns / 50.0, 100.0 * max(window_ns, period_ns))
    if initial_tau_ns is not None and math.isfinite(initial_tau_ns) and initial_tau_ns > 0:
        starts = [float(initial_tau_ns)]
    else:
        tail = max(3, y.size // 10)
        baseline = float(np.mean(y[-tail:])) if fit_background else fixed_background
        excess = np.clip(y - baseline, 0.0, None)
        if excess.sum() > 0:
            tau_hat = float(np.sum(excess * (t + 0.5 * w_ns)) / excess.sum())
        else:
            tau_hat = window_ns / 3.0
        tau_hat = min(max(tau_hat, 2.0 * w_ns), window_ns)
        starts = [tau_hat / 2.0, tau_hat, 2.0 * tau_hat]
    starts = [min(max(s, tau_bounds[0] * 1.01), tau_bounds[1] * 0.99) for s in starts]

    best = None
    for tau0 in starts:
        g0 = _decay_shape(t, tau0, model, period_ns)[0]
        theta0 = _initial_linear(y, g0, fit_background, fixed_background)
        theta0[1] = tau0
        outcome = _minimize_nll(theta0, y, t, model, period_ns, fixed_background, tau_bounds, max_iterations)
        logger.debug(f"start tau0={tau0:.4f} ns -> tau={outcome[0][1]:.6f} ns, "
                     f"nll={outcome[1]:.6f}, converged={outcome[2]} after {outcome[3]} iterations")
        if best is None or (outcome[2], -outcome[1]) > (best[2], -best[1]):
            best = outcome
    theta, nll, converged, _, diagnostic = best
    if not math.isfinite(nll):
        return _failed_fit(diagnostic or 'no valid starting point', **failure)

    covariance = _covariance(theta, y, t, model, period_ns, fixed_background)
    errors = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    mu, jacobian = _expectation(theta, t, model, period_ns, fixed_background)[:2]
    slope = 0.0 if fit_background else -float((covariance @ (jacobian.T @ (y / mu ** 2)))[1])
    positive = y > 0
    deviance = 2.0 * float(np.sum(y[positive] * np.log(y[positive] / mu[positive])) - np.sum(y - mu))
    deviance = max(deviance, 0.0)
    ndf = y.size - theta.size
    if not converged:
        logger.warning(f"Decay fit did not converge: {diagnostic}")

    return FitResult(
        tau_ns=float(theta[1]),
        tau_stat_ns=float(errors[1]),
        amplitude=float(theta[0]),
        amplitude_err=float(errors[0]),
        background_level=float(theta[2]) if fit_background else fixed_background,
        background_err=float(errors[2]) if fit_background else 0.0,
        covariance=covariance,
        param_names=('amplitude', 'tau', 'background') if fit_background else ('amplitude', 'tau'),
        gof=deviance / max(ndf, 1),
        deviance=deviance,
        ndf=ndf,
        n_bins_used=int(y.size),
        converged=bool(converged),
        model=model,
        window=window,
        anchor_bin=anchor,
        start_bin=start_bin,
        bin_width_ns=w_ns,
        period_ns=period_ns,
        diagnostic=diagnostic,
        tau_background_slope=slope,
    )


# =============================================================================
# Start-time scan
# =============================================================================

@dataclass(frozen=True)
class ScanConfig:
    """Start-time scan settings. ``end_offset_ns=None`` means period minus the margin.

    ``background`` is 'measured' (held at a dark-run level when one is
    supplied, floated otherwise), 'floated' or 'zero'.
    """

    step_ns: float = 0.2
    max_offset_ns: float = 4.0
    end_offset_ns: Optional[float] = None
    end_margin_ns: float = 2.5
    plateau_offset_ns: float = 2.0
    model: str = 'wrapped'
    background: str = 'measured'
    max_match_chi2_ndf: float = 10.0

    def __post_init__(self):
        if not (self.step_ns > 0 and self.max_offset_ns >= 0 and self.end_margin_ns >= 0):
            raise ConfigurationError("scan step must be positive and offsets non-negative", key='scan')
        if self.model not in MODELS:
            raise ConfigurationError(f"unknown decay model '{self.model}'", key='model')
        if self.background not in BACKGROUND_MODES:
            raise ConfigurationError(f"unknown background mode '{self.background}'", key='background',
                                     invariant=f"background in {BACKGROUND_MODES}")

    @classmethod
    def from_settings(cls, **overrides) -> 'ScanConfig':
        settings = config.ANALYSIS_CONFIG
        values = dict(step_ns=settings['scan_step_ns'],
                      max_offset_ns=settings['scan_max_offset_ns'],
                      end_margin_ns=settings['window_end_margin_ns'],
                      plateau_offset_ns=settings['plateau_offset_ns'],
                      background=settings['scan_background'],
                      max_match_chi2_ndf=settings['max_match_chi2_ndf'])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def offsets(self) -> np.ndarray:
        n = int(math.floor(self.max_offset_ns / self.step_ns + 1e-9))
        return np.arange(n + 1) * self.step_ns

    def end_offset(self, hist: TimeHistogram) -> float:
        if self.end_offset_ns is not None:
            return self.end_offset_ns
        return hist.n_bins * hist.bin_width_ns - self.end_margin_ns

    def resolve_background(self, measured: Optional[float]) -> Optional[float]:
        """Background per bin held fixed in the fits; None means floated."""
        if self.background == 'zero':
            return 0.0
        if self.background == 'floated':
            return None
        return measured


@dataclass(frozen=True)
class ScanPoint:
    start_offset_ns: float
    fit: FitResult


@dataclass(frozen=True)
class StartTimeScan:
    points: Tuple[ScanPoint, ...]

    def __post_init__(self):
        offsets = [p.start_offset_ns for p in self.points]
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ValueError("scan start offsets must be strictly increasing")

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self) -> Iterator[ScanPoint]:
        return iter(self.points)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([p.start_offset_ns for p in self.points])

    @property
    def taus(self) -> np.ndarray:
        return np.array([p.fit.tau_ns for p in self.points])

    @property
    def tau_errors(self) -> np.ndarray:
        return np.array([p.fit.tau_stat_ns for p in self.points])

    @property
    def converged(self) -> np.ndarray:
        return np.array([p.fit.converged for p in self.points], dtype=bool)

    def plateau(self, offset_ns: float) -> ScanPoint:
        """First converged point at or beyond ``offset_ns``, else the last converged one."""
        good = [p for p in self.points if p.fit.converged]
        if not good:
            raise ExtractionError("no converged point in start-time scan")
        for point in good:
            if point.start_offset_ns >= offset_ns - 1e-9:
                return point
        return good[-1]

    def difference_errors(self, plateau_offset_ns: float) -> np.ndarray:
        """Statistical error of tau_i - tau_plateau for every point.

        The windows are nested, so the fits share counts and
        var(tau_i - tau_p) = |sigma_i^2 - sigma_p^2|.
        """
        plateau = self.plateau(plateau_offset_ns).fit
        return np.sqrt(np.abs(self.tau_errors ** 2 - plateau.tau_stat_ns ** 2))

    def variation(self, plateau_offset_ns: float, n_sigma: float = 1.0) -> float:
        """Non-statistical spread of the scan relative to the plateau tau.

        Largest |tau_i - tau_plateau| over the converged points after removing
        ``n_sigma`` of the difference's statistical error; 0 for a flat scan.
        """
        mask = self.converged
        if not mask.any():
            return math.nan
        plateau = self.plateau(plateau_offset_ns).fit
        excess = (np.abs(self.taus - plateau.tau_ns)
                  - n_sigma * self.difference_errors(plateau_offset_ns))[mask]
        return float(max(excess.max(), 0.0) / plateau.tau_ns)

    def max_deviation_sigma(self) -> float:
        """Largest pairwise |dtau| in units of the quadrature-combined errors."""
        mask = self.converged
        taus, errors = self.taus[mask], self.tau_errors[mask]
        if taus.size < 2:
            return 0.0
        delta = np.abs(taus[:, None] - taus[None, :])
        combined = np.sqrt(errors[:, None] ** 2 + errors[None, :] ** 2)
        np.fill_diagonal(combined, 1.0)
        return float(np.max(delta / combined))

    def is_flat(self, n_sigma: float = 3.0) -> bool:
        return self.max_deviation_sigma() < n_sigma

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'start_offset_ns': self.offsets,
            'tau_ns': self.taus,
            'tau_stat_ns': self.tau_errors,
            'background': [p.fit.background_level for p in self.points],
            'gof': [p.fit.gof for p in self.points],
            'n_bins': [p.fit.n_bins_used for p in self.points],
            'converged': self.converged,
        })


def scan_start_time(hist: TimeHistogram, scan_config: Optional[ScanConfig] = None,
                    anchor_bin: Optional[int] = None, background_level: Optional[float] = None,
                    initial_taus: Optional[Sequence[float]] = None) -> StartTimeScan:
    """Refit with the window start stepped away from the peak; the end stays fixed.

    ``background_level`` is a measured background per bin. The scan config's
    mode decides whether every fit holds it fixed, floats the background or
    holds it at zero.
    """
    cfg = scan_config or ScanConfig.from_settings()
    if cfg.step_ns < hist.bin_width_ns - 1e-12:
        raise ConfigurationError(
            f"scan step {cfg.step_ns} ns is finer than the bin width {hist.bin_width_ns} ns",
            key='scan_step_ns', invariant='step >= bin_width')
    end = cfg.end_offset(hist)
    offsets = cfg.offsets()
    if end <= offsets[-1] + 3 * hist.bin_width_ns:
        raise ConfigurationError(f"scan window end {end} ns leaves too few bins after the last start",
                                 key='end_offset_ns')
    anchor = hist.peak_bin if anchor_bin is None else int(anchor_bin)
    background_level = cfg.resolve_background(background_level)

    points = []
    for i, offset in enumerate(offsets):
        initial = None if initial_taus is None else initial_taus[i]
        fit = fit_decay(hist, FitWindow(float(offset), end), model=cfg.model,
                        fit_background=background_level is None, background_level=background_level,
                        anchor_bin=anchor, initial_tau_ns=initial)
        points.append(ScanPoint(float(offset), fit))
    scan = StartTimeScan(tuple(points))
    logger.debug(f"Start-time scan over {len(points)} offsets, {int(scan.converged.sum())} converged")
    return scan


# =============================================================================
# Template construction and lifetime extraction
# =============================================================================

def wrapped_exponential(n_bins: int, bin_width_ps: float, tau_ns: float) -> np.ndarray:
    """Bin-integrated periodic decay over n_bins bins, normalized to 1."""
    if tau_ns <= 0:
        raise DomainError(f"lifetime must be positive, got {tau_ns}")
    x = bin_width_ps / 1000.0 / tau_ns
    k = np.arange(n_bins)
    return np.exp(-k * x) * (-math.expm1(-x)) / (-math.expm1(-n_bins * x))


def binned_decay_kernel(n_bins: int, bin_width_ps: float, tau_ns: float) -> np.ndarray:
    """Periodic decay kernel for a binned response, normalized to 1.

    A response count in bin j arrived anywhere inside that bin, so its decay
    partner lands k bins later with the probability averaged over that
    position. Bins k >= 1 follow the wrapped exponential; bin 0 holds the
    decays that stay inside the response's own bin.
    """
    if tau_ns <= 0:
        raise DomainError(f"lifetime must be positive, got {tau_ns}")
    x = bin_width_ps / 1000.0 / tau_ns
    one_minus_q = -math.expm1(-n_bins * x)
    spread = -math.expm1(-x) * math.expm1(x) / x
    kernel = np.exp(-np.arange(n_bins) * x) * spread / one_minus_q
    kernel[0] = 1.0 + math.expm1(-x) / x + spread * math.exp(-n_bins * x) / one_minus_q
    return kernel


def shift_response(irf: TimeHistogram, shift_bins: float) -> TimeHistogram:
    """Response moved later by a fraction of a bin, interpolating linearly between neighbours.

    Periodic in the response length; |shift_bins| <= 1.
    """
    if abs(shift_bins) > 1.0:
        raise DomainError(f"sub-bin shift must lie in [-1, 1], got {shift_bins}")
    counts = np.asarray(irf.counts, dtype=float)
    neighbour = np.roll(counts, 1 if shift_bins >= 0 else -1)
    moved = (1.0 - abs(shift_bins)) * counts + abs(shift_bins) * neighbour
    return irf.with_counts(moved, shift_bins=repr(float(shift_bins)))


def build_template(irf: TimeHistogram, tau_ns: float, prompt_fraction: float, period_ps: float,
                   background_level: float = 0.0, total_counts: float = 1.0) -> TimeHistogram:
    """Model spectrum: IRF circularly convolved with the decay kernel, plus a prompt copy of the IRF.

    total = signal * [(1 - f) * (IRF (*) kernel) + f * IRF] + n_bins * background.
    """
    if not 0.0 <= prompt_fraction <= 1.0:
        raise DomainError(f"prompt fraction must lie in [0, 1], got {prompt_fraction}")
    if not (math.isfinite(tau_ns) and tau_ns > 0):
        raise DomainError(f"lifetime must be positive, got {tau_ns}")
    weights = np.asarray(irf.counts, dtype=float)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise DomainError(f"instrument response must be normalized, sums to {weights.sum():.12g}")
    n = period_bins(period_ps, irf.bin_width_ps)
    if irf.n_bins > n:
        raise ConfigurationError(f"instrument response spans {irf.n_bins} bins, longer than the "
                                 f"{n}-bin period; fold it first", key='irf')
    response = np.concatenate([weights, np.zeros(n - irf.n_bins)])

    decay = linalg.circulant(binned_decay_kernel(n, irf.bin_width_ps, tau_ns)) @ response
    shape = (1.0 - prompt_fraction) * decay + prompt_fraction * response
    signal = total_counts - n * background_level
    if signal < 0:
        raise DomainError(f"background {background_level} per bin exceeds the requested total {total_counts}")
    counts = np.clip(signal * shape + background_level, 0.0, None)
    return TimeHistogram(irf.bin_width_ps, 0.0, counts, 0.0, {
        'kind': 'template', 'tau_ns': repr(float(tau_ns)),
        'prompt_fraction': repr(float(prompt_fraction)), 'period_ps': repr(float(period_ps))})


@dataclass(frozen=True)
class LifetimeResult:
    trap_label: str
    tau_ns: float
    stat_error_ns: float
    sys_error_ns: float
    final_error_ns: float
    combine_rule: str = COMBINE_RULE
    n_inputs: int = 1

    @classmethod
    def build(cls, trap_label: str, tau_ns: float, stat_error_ns: float, sys_error_ns: float,
              n_inputs: int = 1) -> 'LifetimeResult':
        return cls(trap_label, float(tau_ns), float(stat_error_ns), float(sys_error_ns),
                   math.hypot(stat_error_ns, sys_error_ns), COMBINE_RULE, n_inputs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'trap_label': self.trap_label, 'tau_ns': self.tau_ns,
            'stat_error_ns': self.stat_error_ns, 'sys_error_ns': self.sys_error_ns,
            'final_error_ns': self.final_error_ns, 'combine_rule': self.combine_rule,
            'n_inputs': self.n_inputs,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LifetimeResult':
        return cls(str(data['trap_label']), float(data['tau_ns']), float(data['stat_error_ns']),
                   float(data['sys_error_ns']), float(data['final_error_ns']),
                   str(data.get('combine_rule', COMBINE_RULE)), int(data.get('n_inputs', 1)))


@dataclass(frozen=True)
class BackgroundEstimate:
    level: float
    error: float
    n_bins: int
    warnings: Tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class ExtractionResult:
    lifetime: LifetimeResult
    data_scan: StartTimeScan
    template_scan: StartTimeScan
    prompt_fraction: float
    match_chi2_ndf: float
    scan_residuals_ns: np.ndarray
    plateau_fit: FitResult
    template: TimeHistogram
    anchor_bin: int
    background: Optional[BackgroundEstimate] = None
    residual_rms_ns: float = 0.0
    alignment_error_ns: float = 0.0

    def __iter__(self):
        yield self.lifetime
        yield (self.data_scan, self.template_scan)


def background_estimate(hist: TimeHistogram, region: Optional[FitWindow] = None,
                        anchor_bin: Optional[int] = None) -> BackgroundEstimate:
    """Mean counts per bin in a region, with the region's Poisson error.

    The default region is BACKGROUND_BINS bins ending BACKGROUND_GAP_NS before
    the anchor, clear of the rising edge. The wrapped decay tail is still
    present there, so the level is an upper bound on the uncorrelated
    background. Regions touching the peak carry a warning.
    """
    n = hist.n_bins
    w_ns = hist.bin_width_ns
    anchor = hist.peak_bin if anchor_bin is None else int(anchor_bin) % n
    if region is None:
        settings = config.ANALYSIS_CONFIG
        region_end = n - int(round(settings['background_gap_ns'] / w_ns))
        region_start = region_end - settings['background_bins']
        if region_start < 0:
            raise ConfigurationError(f"{n} bins leave no room for a background region before the peak",
                                     key='background_region')
        region = FitWindow(region_start * w_ns, region_end * w_ns)
    start = int(round(region.start_offset_ns / w_ns))
    end = int(round(region.end_offset_ns / w_ns))
    if end - start < 5:
        raise ConfigurationError(f"background region holds {end - start} bins",
                                 key='background_region', invariant='region contains >= 5 bins')
    if end > n:
        raise ConfigurationError("background region extends beyond one period", key='background_region')

    index = (anchor + np.arange(start, end)) % n
    values = hist.counts[index].astype(float)
    warnings = []
    peak_height = float(hist.counts[anchor]) if n else 0.0
    if start == 0 or (peak_height > 0 and np.any(values >= 0.5 * peak_height)):
        warnings.append('background region overlaps the peak')
    total = float(values.sum())
    for message in warnings:
        logger.warning(f"Background estimate: {message}")
    return BackgroundEstimate(level=total / values.size, error=math.sqrt(total) / values.size,
                              n_bins=int(values.size), warnings=tuple(warnings))


def dark_background(dark: TimeHistogram, exposure_s: float) -> BackgroundEstimate:
    """Background per bin expected in a data run of ``exposure_s`` from a dark-count run.

    Dark counts are uncorrelated with the pulses, so every bin of the folded
    dark histogram contributes; the level scales with exposure.
    """
    if not (dark.exposure_s > 0 and exposure_s > 0):
        raise ConfigurationError(f"dark run exposure {dark.exposure_s} s and data exposure {exposure_s} s "
                                 "must both be positive", key='exposure_s')
    scale = exposure_s / dark.exposure_s / dark.n_bins
    total = float(dark.total)
    logger.debug(f"Dark run: {total:.0f} counts over {dark.exposure_s:g} s, scaled to {exposure_s:g} s")
    return BackgroundEstimate(level=total * scale, error=math.sqrt(total) * scale, n_bins=dark.n_bins)


def extract_lifetime(data: TimeHistogram, irf: TimeHistogram, scan_config: Optional[ScanConfig] = None,
                     label: str = '', initial_prompt_fraction: float = 0.05,
                     background: Optional[BackgroundEstimate] = None) -> ExtractionResult:
    """Lifetime from matching the data's start-time scan with a template's scan.

    Searches (tau, prompt fraction) so the template scan reproduces the data
    scan point by point, weighted by the data errors. Both scans hold the
    background at the measured ``background`` or float it, as the scan
    config's mode says.

    Errors come from the linearized match. The statistical error propagates
    the data-scan covariance, cov(tau_i, tau_j) = sigma_min(i,j)^2 for nested
    windows, plus the background error. The systematic error is the
    error-weighted rms scan residual combined with the lifetime shift for a
    response timing uncertainty of 1/sqrt(12) bin.
    """
    cfg = scan_config or ScanConfig.from_settings()
    if data.bin_width_ps != irf.bin_width_ps:
        raise ConfigurationError(f"data bin width {data.bin_width_ps} ps differs from IRF bin width "
                                 f"{irf.bin_width_ps} ps", key='bin_width_ps')
    period_ps = data.span_ps
    if irf.n_bins > data.n_bins:
        raise ConfigurationError("instrument response is longer than the folded data; fold both first",
                                 key='irf')
    response = irf.normalized()
    anchor = data.peak_bin
    level = cfg.resolve_background(None if background is None else background.level)

    data_scan = scan_start_time(data, cfg, anchor_bin=anchor, background_level=level)
    good = data_scan.converged
    if good.sum() < 3:
        raise ExtractionError("fewer than 3 converged points in the data scan",
                              {'data_scan': data_scan, 'anchor_bin': anchor})
    plateau = data_scan.plateau(cfg.plateau_offset_ns)
    d_tau, d_err = data_scan.taus[good], data_scan.tau_errors[good]
    d_err = np.where(d_err > 0, d_err, np.nanmax(d_err[d_err > 0]) if np.any(d_err > 0) else 1.0)
    warm = data_scan.taus
    template_level = level if level is not None else max(plateau.fit.background_level, 0.0)
    total = float(data.total)

    def template_scan(params, shape: TimeHistogram = response) -> Tuple[TimeHistogram, StartTimeScan]:
        template = build_template(shape, params[0], params[1], period_ps, template_level, total)
        return template, scan_start_time(template, cfg, anchor_bin=anchor, background_level=level,
                                         initial_taus=np.where(np.isfinite(warm), warm, params[0]))

    def residuals(params) -> np.ndarray:
        scan = template_scan(params)[1]
        t_tau = scan.taus[good]
        r = (d_tau - t_tau) / d_err
        return np.where(np.isfinite(r), r, 1e3)

    tau0 = plateau.fit.tau_ns
    x0 = np.array([tau0, min(max(initial_prompt_fraction, 0.0), 0.9)])
    solution = optimize.least_squares(residuals, x0, bounds=([0.5 * tau0, 0.0], [2.0 * tau0, 0.95]),
                                      diff_step=1e-4, x_scale='jac')
    tau_best, prompt_best = float(solution.x[0]), float(solution.x[1])
    template, t_scan = template_scan(solution.x)

    scan_residuals = d_tau - t_scan.taus[good]
    ndf = max(int(good.sum()) - 2, 1)
    chi2_ndf = float(np.sum((scan_residuals / d_err) ** 2) / ndf)
    logger.info(f"Scan match: tau={tau_best:.5f} ns, prompt fraction={prompt_best:.4f}, "
                f"chi2/ndf={chi2_ndf:.3f}")
    if not np.isfinite(chi2_ndf) or chi2_ndf >= cfg.max_match_chi2_ndf:
        raise ExtractionError(
            f"template scan does not match the data (chi2/ndf = {chi2_ndf:.3g})",
            {'data_scan': data_scan, 'template_scan': t_scan, 'tau_ns': tau_best,
             'prompt_fraction': prompt_best, 'chi2_ndf': chi2_ndf, 'anchor_bin': anchor})

    # rows: change of (tau, prompt fraction) per unit change of one scan point
    projector = linalg.pinv(solution.jac.T @ solution.jac) @ solution.jac.T / d_err[None, :]
    order = np.arange(d_err.size)
    nested = d_err[np.minimum.outer(order, order)] ** 2
    variance = float(projector[0] @ nested @ projector[0])
    if background is not None and level is not None and cfg.background == 'measured':
        slopes = np.array([p.fit.tau_background_slope for p in data_scan.points])[good]
        variance += float(projector[0] @ slopes * background.error) ** 2
    stat_error = math.sqrt(variance)

    weights = 1.0 / d_err ** 2
    residual_rms = float(np.sqrt(np.sum(weights * scan_residuals ** 2) / weights.sum()))
    later, earlier = (template_scan(solution.x, shift_response(response, shift))[1].taus[good]
                      for shift in (0.5, -0.5))
    timing_slope = float(projector[0] @ np.nan_to_num(later - earlier))
    alignment = abs(timing_slope) / math.sqrt(12.0)
    sys_error = math.hypot(residual_rms, alignment)
    logger.info(f"Lifetime errors: stat {stat_error:.5f} ns, residual rms {residual_rms:.5f} ns, "
                f"response timing {alignment:.5f} ns")

    lifetime = LifetimeResult.build(label or data.metadata.get('transition', ''), tau_best,
                                    stat_error, sys_error)
    return ExtractionResult(lifetime=lifetime, data_scan=data_scan, template_scan=t_scan,
                            prompt_fraction=prompt_best, match_chi2_ndf=chi2_ndf,
                            scan_residuals_ns=scan_residuals, plateau_fit=plateau.fit,
                            template=template, anchor_bin=anchor, background=background,
                            residual_rms_ns=residual_rms, alignment_error_ns=alignment)


# =============================================================================
# Precision and combination
# =============================================================================

def predict_statistical_precision(count_rate_hz: float, duration_s: float, tau_ns: float,
                                  window_ns: float = math.inf) -> float:
    """Cramer-Rao bound on the relative lifetime error for an exponential observed over a window.

    With x = window/tau the per-count information is
    1 - x^2 e^-x / (1 - e^-x)^2, which tends to 1 for an unbounded window.
    The 0.25%/sqrt(minutes) rule for 3000 counts/s is the unbounded-window
    value 1/sqrt(N); a 12.4 ns window at tau = 3.148 ns gives about 0.285%.
    """
    for name, value in (('count_rate_hz', count_rate_hz), ('duration_s', duration_s),
                        ('tau_ns', tau_ns), ('window_ns', window_ns)):
        if not value > 0:
            raise DomainError(f"{name} must be positive, got {value}")
    n_counts = count_rate_hz * duration_s
    if math.isinf(window_ns):
        information = 1.0
    else:
        x = window_ns / tau_ns
        information = 1.0 - x * x * math.exp(-x) / math.expm1(-x) ** 2
    return 1.0 / math.sqrt(n_counts * information)


def combine_measurements(results: Sequence[LifetimeResult], common_sys: bool = True,
                         label: Optional[str] = None) -> LifetimeResult:
    """Inverse-variance weighted mean over statistical errors.

    A common systematic error passes through unreduced; independent ones are
    propagated with the weights. Final error is the quadrature sum.
    """
    if not results:
        raise DomainError("nothing to combine")
    stat = np.array([r.stat_error_ns for r in results], dtype=float)
    if np.any(stat <= 0):
        raise DomainError("statistical errors must be positive to weight measurements")
    weights = 1.0 / stat ** 2
    taus = np.array([r.tau_ns for r in results], dtype=float)
    sys = np.array([r.sys_error_ns for r in results], dtype=float)

    tau = float(np.sum(weights * taus) / weights.sum())
    stat_error = float(1.0 / math.sqrt(weights.sum()))
    if common_sys:
        sys_error = float(np.sum(weights * sys) / weights.sum())
    else:
        sys_error = float(math.sqrt(np.sum((weights * sys) ** 2)) / weights.sum())

    if label is None:
        labels = list(dict.fromkeys(r.trap_label for r in results))
        label = labels[0] if len(labels) == 1 else '+'.join(labels)
    return LifetimeResult.build(label, tau, stat_error, sys_error,
                                n_inputs=sum(r.n_inputs for r in results))


# =============================================================================
# Plot-ready tables
# =============================================================================

def decay_curve_table(hist: TimeHistogram, fit: FitResult) -> pd.DataFrame:
    """Counts, fitted model and Pearson residuals per bin."""
    expected = fit.model_counts(hist.n_bins)
    counts = hist.counts.astype(float)
    with np.errstate(invalid='ignore', divide='ignore'):
        residual = (counts - expected) / np.sqrt(expected)
    return pd.DataFrame({
        'bin': np.arange(hist.n_bins),
        't_ns': hist.bin_starts_ps / 1000.0,
        'counts': hist.counts,
        'model': expected,
        'pearson_residual': residual,
        'in_window': np.isfinite(expected),
    })


def scan_table(data_scan: StartTimeScan, template_scan: Optional[StartTimeScan] = None) -> pd.DataFrame:
    table = data_scan.to_frame()
    if template_scan is not None:
        table['template_tau_ns'] = template_scan.taus
        table['residual_ns'] = table['tau_ns'] - table['template_tau_ns']
    return table
