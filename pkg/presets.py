# presets.py - Built-in Cd+ transitions, instrument settings and trap presets
"""
Reference parameters for the cadmium ion lifetime experiment.

The trap presets differ only in prompt scatter: the linear trap shows an
order of magnitude larger prompt peak than the quadrupole trap.
"""

import logging
from typing import Dict, Optional

from physics_sim import (AtomicTransition, BeatModulation, ExperimentConfig, ParametricResponse,
                         PulseParams, PulseTrain, TdcSpec, efficiency_for_detection_probability)

logger = logging.getLogger(__name__)

TRANSITIONS: Dict[str, AtomicTransition] = {
    'P1/2': AtomicTransition('P1/2', lifetime_ns=3.148, wavelength_nm=226.5),
    'P3/2': AtomicTransition('P3/2', lifetime_ns=2.647, wavelength_nm=214.5),
}

PRESET_PULSE = PulseParams(energy_pj=10.0, duration_ps=1.0, waist_um=6.0)
PRESET_TRAIN = PulseTrain(pulses_per_cycle=15, pulse_spacing_ns=12.4, cooling_window_ns=500.0,
                          cycle_rate_hz=1e6)
PRESET_TDC = TdcSpec(bin_width_ps=100.0, jitter_sigma_ps=145.0, scale_error_ppm=20.0,
                     inl_rms_ps=20.0, inl_seed=7)
PRESET_IRF = ParametricResponse(rise_sigma_ps=120.0, tail_ns=0.5, delay_ns=1.0,
                                echoes=((3.1, 0.006), (6.2, 0.006)))

# correlated events (decay + prompt) per pulse
PER_PULSE_DETECTION_PROB = 2e-4
BACKGROUND_RATE_HZ = 5.0

TRAP_PROMPT_PROB = {
    'quadrupole': 1e-5,
    'linear': 1e-4,
}

PRESET_FILES = {
    'p12_quadrupole': ('P1/2', 'quadrupole'),
    'p32_quadrupole': ('P3/2', 'quadrupole'),
    'p12_linear': ('P1/2', 'linear'),
    'p32_linear': ('P3/2', 'linear'),
}

# Published lifetimes (ns): per trap (tau, stat, sys) and the final value with its error
PUBLISHED_LIFETIMES = {
    'P1/2': {
        'quadrupole': (3.148, 0.005, 0.010),
        'linear': (3.132, 0.002, 0.030),
        'final': (3.148, 0.011),
    },
    'P3/2': {
        'quadrupole': (2.646, 0.002, 0.010),
        'linear': (2.649, 0.003, 0.010),
        'final': (2.647, 0.010),
    },
}


def make_preset(name: str, duration_s: float = 60.0, seed: int = 0,
                prompt_scale: float = 1.0, beats: Optional[BeatModulation] = None) -> ExperimentConfig:
    """Experiment config for one of the four transition/trap presets."""
    if name not in PRESET_FILES:
        raise KeyError(f"unknown preset '{name}', choose from {sorted(PRESET_FILES)}")
    label, trap = PRESET_FILES[name]
    transition = TRANSITIONS[label]
    prompt = TRAP_PROMPT_PROB[trap] * prompt_scale
    efficiency = efficiency_for_detection_probability(
        max(PER_PULSE_DETECTION_PROB, prompt), prompt, PRESET_PULSE, transition)
    logger.debug(f"Preset {name}: prompt={prompt:g}, detection efficiency={efficiency:.4g}")
    return ExperimentConfig(
        transition=transition,
        pulse=PRESET_PULSE,
        train=PRESET_TRAIN,
        irf=PRESET_IRF,
        tdc=PRESET_TDC,
        beats=beats or BeatModulation(),
        detection_efficiency=efficiency,
        prompt_scatter_prob=prompt,
        background_rate_hz=BACKGROUND_RATE_HZ,
        duration_s=duration_s,
        seed=seed,
    )
