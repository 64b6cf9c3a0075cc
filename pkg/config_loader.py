# config_loader.py - Experiment config files: flat "key = value" text with unit-suffixed keys
"""
Loads and writes experiment configurations.

Every key carries its unit in its name (``*_ns``, ``*_ps``, ``*_hz`` ...);
dimensionless keys are probabilities, counts, seeds or labels. Unknown keys
are rejected and every error names the offending key. A bare preset name
such as ``p12_quadrupole`` resolves to ``presets/<name>.cfg``.
"""

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

from errors import ConfigurationError
from physics_sim import (AtomicTransition, BeatModulation, EmpiricalResponse, ExperimentConfig,
                         ParametricResponse, PulseParams, PulseTrain, TdcSpec,
                         efficiency_for_detection_probability, zeeman_beat)

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent / 'presets'
KEY_PATTERN = re.compile(r'^[a-z][a-z0-9_]*$')


@dataclass(frozen=True)
class KeySpec:
    parse: Callable[[str], Any]
    required: bool
    description: str


def _parse_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"{text!r} is not a finite number")
    return value


def _parse_int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"{text!r} is not an integer")
    return int(value)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ('true', 'yes', '1', 'on'):
        return True
    if lowered in ('false', 'no', '0', 'off'):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _parse_float_list(text: str) -> Tuple[float, ...]:
    if not text.strip():
        return ()
    return tuple(_parse_float(part.strip()) for part in text.split(','))


CONFIG_KEYS: Dict[str, KeySpec] = {
    'transition': KeySpec(str, True, 'excited level label, P1/2 or P3/2'),
    'lifetime_ns': KeySpec(_parse_float, True, 'true excited-state lifetime'),
    'wavelength_nm': KeySpec(_parse_float, True, 'transition wavelength'),
    'pulse_energy_pj': KeySpec(_parse_float, True, 'excitation pulse energy'),
    'pulse_duration_ps': KeySpec(_parse_float, True, 'excitation pulse duration'),
    'beam_waist_um': KeySpec(_parse_float, True, 'beam waist at the ion'),
    'pulses_per_cycle': KeySpec(_parse_int, True, 'pulses fired per experiment cycle'),
    'pulse_spacing_ns': KeySpec(_parse_float, True, 'laser repetition period'),
    'cooling_window_ns': KeySpec(_parse_float, True, 'cooling time per cycle'),
    'cycle_rate_hz': KeySpec(_parse_float, True, 'experiment cycle rate'),
    'pick_every': KeySpec(_parse_int, False, 'pulse picker: use every n-th laser pulse'),
    'tdc_bin_width_ps': KeySpec(_parse_float, True, 'TDC bin width'),
    'tdc_jitter_ps': KeySpec(_parse_float, True, 'timing jitter sigma'),
    'tdc_scale_error_ppm': KeySpec(_parse_float, True, 'TDC timebase scale error'),
    'tdc_inl_rms_ps': KeySpec(_parse_float, True, 'integral non-linearity rms'),
    'tdc_inl_seed': KeySpec(_parse_int, False, 'seed of the INL pattern'),
    'irf_rise_sigma_ps': KeySpec(_parse_float, False, 'detector rise sigma'),
    'irf_tail_ns': KeySpec(_parse_float, False, 'detector exponential tail'),
    'irf_delay_ns': KeySpec(_parse_float, False, 'cable delay'),
    'irf_echo_delays_ns': KeySpec(_parse_float_list, False, 'ringing echo delays, comma separated'),
    'irf_echo_amplitudes': KeySpec(_parse_float_list, False, 'ringing echo amplitudes, comma separated'),
    'irf_file': KeySpec(str, False, 'empirical response histogram, relative to the config file'),
    'detection_efficiency': KeySpec(_parse_float, False, 'probability an emitted photon is detected'),
    'per_pulse_detection_prob': KeySpec(_parse_float, False, 'correlated events per pulse (decay + prompt)'),
    'prompt_scatter_prob': KeySpec(_parse_float, True, 'prompt scatter probability per pulse'),
    'background_rate_hz': KeySpec(_parse_float, True, 'uncorrelated background rate'),
    'duration_s': KeySpec(_parse_float, True, 'data-taking duration'),
    'seed': KeySpec(_parse_int, True, 'master random seed'),
    'beat_enabled': KeySpec(_parse_bool, False, 'enable quantum-beat modulation'),
    'beat_amplitude': KeySpec(_parse_float, False, 'beat amplitude'),
    'beat_angular_frequency_rad_s': KeySpec(_parse_float, False, 'beat angular frequency'),
    'beat_field_gauss': KeySpec(_parse_float, False, 'magnetic field; sets the Larmor beat frequency'),
    'beat_phase_rad': KeySpec(_parse_float, False, 'beat phase'),
}

REQUIRED_KEYS = [key for key, spec in CONFIG_KEYS.items() if spec.required]

# dataclass field -> config key, for errors raised while building the config
FIELD_KEYS = {
    'energy_pj': 'pulse_energy_pj',
    'duration_ps': 'pulse_duration_ps',
    'waist_um': 'beam_waist_um',
    'bin_width_ps': 'tdc_bin_width_ps',
    'jitter_sigma_ps': 'tdc_jitter_ps',
    'scale_error_ppm': 'tdc_scale_error_ppm',
    'inl_rms_ps': 'tdc_inl_rms_ps',
    'inl_seed': 'tdc_inl_seed',
}


def resolve_config_path(path_or_preset: Union[str, Path]) -> Path:
    path = Path(path_or_preset)
    if path.exists():
        return path
    preset = PRESET_DIR / f"{path_or_preset}.cfg"
    if preset.exists():
        return preset
    raise FileNotFoundError(f"No config file or preset named '{path_or_preset}'")


def parse_config_text(text: str, source: str = '<config>') -> Dict[str, Any]:
    """Parse "key = value" lines into typed values, rejecting unknown and duplicate keys."""
    values: Dict[str, Any] = {}
    for line_num, line in enumerate(text.splitlines(), 1):
        content = line.split('#', 1)[0].strip()
        if not content:
            continue
        if '=' not in content:
            raise ConfigurationError(f"{source}:{line_num}: expected 'key = value', got {content!r}")
        key, raw = (part.strip() for part in content.split('=', 1))
        if not KEY_PATTERN.match(key):
            raise ConfigurationError(f"{source}:{line_num}: malformed key", key=key)
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"{source}:{line_num}: unknown key", key=key)
        if key in values:
            raise ConfigurationError(f"{source}:{line_num}: duplicate key", key=key)
        try:
            values[key] = CONFIG_KEYS[key].parse(raw)
        except ValueError as error:
            raise ConfigurationError(f"{source}:{line_num}: invalid value: {error}", key=key)
    return values


def config_from_items(items: Mapping[str, Any], base_dir: Optional[Path] = None,
                      source: str = '<config>') -> ExperimentConfig:
    """Build a validated ExperimentConfig from parsed (or string) values."""
    values: Dict[str, Any] = {}
    for key, value in items.items():
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"{source}: unknown key", key=key)
        if isinstance(value, str) and CONFIG_KEYS[key].parse is not str:
            try:
                value = CONFIG_KEYS[key].parse(value)
            except ValueError as error:
                raise ConfigurationError(f"{source}: invalid value: {error}", key=key)
        values[key] = value

    missing = [key for key in REQUIRED_KEYS if key not in values]
    if missing:
        raise ConfigurationError(f"{source}: missing required keys: {', '.join(missing)}",
                                 key=missing[0])
    has_efficiency = 'detection_efficiency' in values
    has_probability = 'per_pulse_detection_prob' in values
    if has_efficiency == has_probability:
        raise ConfigurationError(f"{source}: give exactly one of detection_efficiency or "
                                 f"per_pulse_detection_prob", key='detection_efficiency')

    try:
        return _build(values, base_dir or Path('.'))
    except ConfigurationError as error:
        raise ConfigurationError(f"{source}: {error.detail}", key=FIELD_KEYS.get(error.key, error.key),
                                 invariant=error.invariant) from error


def _build(values: Dict[str, Any], base_dir: Path) -> ExperimentConfig:
    transition = AtomicTransition(values['transition'], values['lifetime_ns'], values['wavelength_nm'])
    pulse = PulseParams(values['pulse_energy_pj'], values['pulse_duration_ps'], values['beam_waist_um'])
    train = PulseTrain(values['pulses_per_cycle'], values['pulse_spacing_ns'], values['cooling_window_ns'],
                       values['cycle_rate_hz'], values.get('pick_every', 1))
    tdc = TdcSpec(values['tdc_bin_width_ps'], values['tdc_jitter_ps'], values['tdc_scale_error_ppm'],
                  values['tdc_inl_rms_ps'], values.get('tdc_inl_seed', 0))

    if 'irf_file' in values:
        from data_io import read_histogram
        irf = EmpiricalResponse.from_histogram(read_histogram(base_dir / values['irf_file']))
    else:
        delays = values.get('irf_echo_delays_ns', ())
        amplitudes = values.get('irf_echo_amplitudes', ())
        if len(delays) != len(amplitudes):
            raise ConfigurationError(f"{len(delays)} echo delays but {len(amplitudes)} amplitudes",
                                     key='irf_echo_amplitudes')
        irf = ParametricResponse(values.get('irf_rise_sigma_ps', 0.0), values.get('irf_tail_ns', 0.0),
                                 values.get('irf_delay_ns', 0.0), tuple(zip(delays, amplitudes)))

    if values.get('beat_enabled', False) and 'beat_field_gauss' in values:
        beats = zeeman_beat(transition, values['beat_field_gauss'], values.get('beat_amplitude', 0.0),
                            values.get('beat_phase_rad', 0.0))
    else:
        beats = BeatModulation(values.get('beat_enabled', False), values.get('beat_amplitude', 0.0),
                               values.get('beat_angular_frequency_rad_s', 0.0),
                               values.get('beat_phase_rad', 0.0))

    prompt = values['prompt_scatter_prob']
    if 'per_pulse_detection_prob' in values:
        efficiency = efficiency_for_detection_probability(values['per_pulse_detection_prob'], prompt,
                                                          pulse, transition)
    else:
        efficiency = values['detection_efficiency']

    return ExperimentConfig(
        transition=transition, pulse=pulse, train=train, irf=irf, tdc=tdc, beats=beats,
        detection_efficiency=efficiency, prompt_scatter_prob=prompt,
        background_rate_hz=values['background_rate_hz'], duration_s=values['duration_s'],
        seed=values['seed'])


def load_config(path_or_preset: Union[str, Path]) -> ExperimentConfig:
    """Read and fully validate an experiment config file or preset name."""
    path = resolve_config_path(path_or_preset)
    text = path.read_text(encoding='utf-8')
    values = parse_config_text(text, source=str(path))
    if not values:
        raise ConfigurationError(f"{path}: empty config; required keys: {', '.join(REQUIRED_KEYS)}",
                                 key=REQUIRED_KEYS[0])
    experiment = config_from_items(values, base_dir=path.parent, source=str(path))
    logger.info(f"Loaded config {path}: {experiment.transition.label}, "
                f"tau={experiment.transition.lifetime_ns} ns, seed={experiment.seed}")
    return experiment


def _text(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ', '.join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_items(experiment: ExperimentConfig, irf_file: Optional[str] = None) -> List[Tuple[str, str]]:
    """Flat (key, text) pairs that load back to an equal config."""
    t, p, train, tdc, beats = (experiment.transition, experiment.pulse, experiment.train,
                               experiment.tdc, experiment.beats)
    items: List[Tuple[str, Any]] = [
        ('transition', t.label), ('lifetime_ns', t.lifetime_ns), ('wavelength_nm', t.wavelength_nm),
        ('pulse_energy_pj', p.energy_pj), ('pulse_duration_ps', p.duration_ps),
        ('beam_waist_um', p.waist_um),
        ('pulses_per_cycle', train.pulses_per_cycle), ('pulse_spacing_ns', train.pulse_spacing_ns),
        ('cooling_window_ns', train.cooling_window_ns), ('cycle_rate_hz', train.cycle_rate_hz),
        ('pick_every', train.pick_every),
        ('tdc_bin_width_ps', tdc.bin_width_ps), ('tdc_jitter_ps', tdc.jitter_sigma_ps),
        ('tdc_scale_error_ppm', tdc.scale_error_ppm), ('tdc_inl_rms_ps', tdc.inl_rms_ps),
        ('tdc_inl_seed', tdc.inl_seed),
    ]
    if isinstance(experiment.irf, EmpiricalResponse):
        if irf_file is None:
            raise ConfigurationError("an empirical response needs an irf_file to be written", key='irf_file')
        items.append(('irf_file', irf_file))
    else:
        irf = experiment.irf
        items += [('irf_rise_sigma_ps', irf.rise_sigma_ps), ('irf_tail_ns', irf.tail_ns),
                  ('irf_delay_ns', irf.delay_ns),
                  ('irf_echo_delays_ns', tuple(d for d, _ in irf.echoes)),
                  ('irf_echo_amplitudes', tuple(a for _, a in irf.echoes))]
    items += [
        ('detection_efficiency', experiment.detection_efficiency),
        ('prompt_scatter_prob', experiment.prompt_scatter_prob),
        ('background_rate_hz', experiment.background_rate_hz),
        ('duration_s', experiment.duration_s), ('seed', experiment.seed),
        ('beat_enabled', beats.enabled), ('beat_amplitude', beats.amplitude),
        ('beat_angular_frequency_rad_s', beats.angular_frequency_rad_s),
        ('beat_phase_rad', beats.phase_rad),
    ]
    return [(key, _text(value)) for key, value in items]


def write_config(experiment: ExperimentConfig, path: Union[str, Path]) -> Path:
    """Write a config that reloads to an equal ExperimentConfig.

    An empirical response is stored next to it as ``<stem>_irf.txt``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    irf_file = None
    if isinstance(experiment.irf, EmpiricalResponse):
        from data_io import write_histogram
        irf_file = f"{path.stem}_irf.txt"
        write_histogram(path.parent / irf_file, experiment.irf.histogram)
    lines = [f"{key} = {value}" for key, value in config_to_items(experiment, irf_file)]
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    logger.debug(f"Wrote config to {path}")
    return path
