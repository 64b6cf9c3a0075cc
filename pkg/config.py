# config.py - Ion Lifetime Twin Configuration
"""
Application settings for Ion Lifetime Twin.

Values are read from the environment, which is populated from a .env file
when one is present. Experiment parameters (transition, detector, TDC ...)
are not settings; they live in experiment config files (see config_loader.py).
"""

import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv


class Config:
    """Configuration class that reads from .env file and provides defaults"""

    def __init__(self, env_path: Optional[str] = None):
        self.env_path = Path(env_path) if env_path else Path('.env')
        self.load_env_file()

    def load_env_file(self):
        """Load environment variables from .env file"""
        if self.env_path.exists():
            load_dotenv(self.env_path, override=False)

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value with type conversion"""
        value = os.environ.get(key, default)

        if isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in ('true', 'yes'):
                return True
            elif lowered in ('false', 'no'):
                return False
            elif lowered.lstrip('-').isdigit():
                return int(lowered)
            try:
                return float(lowered)
            except ValueError:
                return value.strip()

        return value

    # Application Settings
    @property
    def APP_NAME(self) -> str:
        return str(self.get('APP_NAME', 'Ion Lifetime Twin'))

    @property
    def APP_VERSION(self) -> str:
        return str(os.environ.get('APP_VERSION', '1.0.0'))

    @property
    def DEBUG_MODE(self) -> bool:
        return bool(self.get('DEBUG_MODE', False))

    # Storage
    @property
    def DATA_DIR(self) -> str:
        return str(self.get('DATA_DIR', 'data'))

    @property
    def DATABASE_PATH(self) -> str:
        return str(self.get('DATABASE_PATH', 'data/lifetime_runs.db'))

    @property
    def LOG_DIR(self) -> str:
        return str(self.get('LOG_DIR', 'logs'))

    @property
    def LOG_LEVEL(self) -> str:
        return str(self.get('LOG_LEVEL', 'INFO')).upper()

    # Execution
    @property
    def DEFAULT_WORKERS(self) -> int:
        return int(self.get('DEFAULT_WORKERS', 1))

    @property
    def CYCLES_PER_BLOCK(self) -> int:
        return int(self.get('CYCLES_PER_BLOCK', 100000))

    # Simulation Configuration
    @property
    def SIMULATION_CONFIG(self) -> Dict[str, Any]:
        return {
            'cycles_per_block': self.CYCLES_PER_BLOCK,
            'irf_measurement_s': float(self.get('IRF_MEASUREMENT_S', 60.0)),
            'irf_measurement_prompt_prob': float(self.get('IRF_MEASUREMENT_PROMPT_PROB', 2e-4)),
            'dark_measurement_s': float(self.get('DARK_MEASUREMENT_S', 60.0)),
        }

    # Analysis Configuration
    @property
    def ANALYSIS_CONFIG(self) -> Dict[str, Any]:
        return {
            'scan_step_ns': float(self.get('SCAN_STEP_NS', 0.2)),
            'scan_max_offset_ns': float(self.get('SCAN_MAX_OFFSET_NS', 4.0)),
            'window_end_margin_ns': float(self.get('WINDOW_END_MARGIN_NS', 2.5)),
            'plateau_offset_ns': float(self.get('PLATEAU_OFFSET_NS', 2.0)),
            'max_match_chi2_ndf': float(self.get('MAX_MATCH_CHI2_NDF', 10.0)),
            'background_bins': int(self.get('BACKGROUND_BINS', 10)),
            'background_gap_ns': float(self.get('BACKGROUND_GAP_NS', 1.0)),
            'scan_background': self.get('SCAN_BACKGROUND', 'measured'),
            'anchor_smoothing_bins': float(self.get('ANCHOR_SMOOTHING_BINS', 1.0)),
        }


# Global configuration instance
config = Config()
