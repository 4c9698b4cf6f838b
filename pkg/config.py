"""
Configuration Module
Application settings, presets and environment handling
"""

import os
from typing import Dict, Any, Optional
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()


class Config:
    """Application configuration class"""

    # Base directory
    BASE_DIR = Path(__file__).parent

    # Output locations; TRIMODAL_OUTPUT_DIR overrides the default
    DATA_DIR = Path(os.getenv('TRIMODAL_OUTPUT_DIR', str(BASE_DIR / 'data')))
    LOGS_DIR = DATA_DIR / 'logs'
    RUNS_DIR = DATA_DIR / 'runs'
    DATASETS_DIR = DATA_DIR / 'datasets'

    # Log-mel presets (window / hop in milliseconds)
    DSP_PRESETS = {
        'A': {'n_mels': 80, 'window_ms': 20.0, 'hop_ms': 10.0, 'n_fft': 512,
              'fmin': 60.0, 'fmax': 7800.0, 'log_floor': 1e-10},
        'B': {'n_mels': 64, 'window_ms': 25.0, 'hop_ms': 10.0, 'n_fft': 512,
              'fmin': 60.0, 'fmax': 7800.0, 'log_floor': 1e-10},
    }

    # Learning-rate schedules and batch sizes
    SCHEDULE_PRESETS = {
        'paper': {'warmup_steps': 5000, 'total_steps': 400000, 'peak_lr': 1e-4},
        'desk': {'warmup_steps': 100, 'total_steps': 2000, 'peak_lr': 1e-4},
    }
    BATCH_PRESETS = {
        'paper': 4096,
        'desk': 64,
    }

    # Encoder output sizes
    ENCODER_PRESETS = {
        'paper': {'spectrogram': 2048, 'waveform': 2048, 'video': 2048},
        'paper_efficientnet': {'spectrogram': 1280, 'waveform': 1280, 'video': 1280},
        'desk': {'spectrogram': 128, 'waveform': 128, 'video': 128},
    }

    # Mixing-ratio distributions studied for example mixing
    MIXING_PRESETS = {
        'beta_5_5': (5.0, 5.0),
        'beta_5_2': (5.0, 2.0),
        'beta_5_1': (5.0, 1.0),
    }

    # Downstream protocols
    PROTOCOLS = {
        'audioset': {'kind': 'mlp', 'hidden': 512, 'lr': 2e-4, 'subclips': 'tensec_by_3s', 'augment': True},
        'linear': {'kind': 'linear', 'hidden': 0, 'lr': 1e-3, 'subclips': 'nonoverlap_1s', 'augment': False},
    }

    # Synthetic dataset defaults for the synth command
    SYNTH_DEFAULTS = {
        'num_classes': 4,
        'num_samples': 400,
        'test_fraction': 0.2,
    }

    # Logging configuration (loguru sinks)
    LOGGING = {
        'level': 'INFO',
        'format': '{time:YYYY-MM-DD HH:mm:ss} - {name} - {level} - {message}',
        'file': str(LOGS_DIR / 'trimodal.log'),
        'rotation': '10 MB',
        'retention': 5
    }

    @classmethod
    def ensure_directories(cls) -> None:
        """Create output directories if they don't exist"""
        for dir_path in [cls.DATA_DIR, cls.LOGS_DIR, cls.RUNS_DIR, cls.DATASETS_DIR]:
            dir_path.mkdir(parents=True, exist_ok=True)

    @classmethod
    def get_dsp_preset(cls, name: str) -> Dict[str, Any]:
        """Get log-mel preset by name"""
        if name not in cls.DSP_PRESETS:
            raise KeyError(f"Unknown DSP preset: {name}")
        return dict(cls.DSP_PRESETS[name])

    @classmethod
    def get_schedule_preset(cls, name: str) -> Dict[str, Any]:
        """Get schedule preset by name"""
        if name not in cls.SCHEDULE_PRESETS:
            raise KeyError(f"Unknown schedule preset: {name}")
        return dict(cls.SCHEDULE_PRESETS[name])

    @classmethod
    def get_protocol(cls, name: str) -> Dict[str, Any]:
        """Get downstream protocol settings by name"""
        if name not in cls.PROTOCOLS:
            raise KeyError(f"Unknown protocol: {name}")
        return dict(cls.PROTOCOLS[name])

    @classmethod
    def get_run_path(cls, name: str) -> Path:
        """Get directory for a named run"""
        return cls.RUNS_DIR / name


class DevelopmentConfig(Config):
    """Development configuration"""
    LOGGING = {
        'level': 'DEBUG',
        'format': '{time:YYYY-MM-DD HH:mm:ss} - {name} - {level} - {message}',
        'file': str(Config.LOGS_DIR / 'trimodal_dev.log'),
        'rotation': '5 MB',
        'retention': 3
    }


class ProductionConfig(Config):
    """Production configuration"""
    LOGGING = {**Config.LOGGING, 'level': 'WARNING'}


class TestingConfig(Config):
    """Testing configuration"""
    LOGGING = {
        'level': 'WARNING',
        'format': '{level} - {message}',
        'file': None,  # No file logging for tests
        'rotation': None,
        'retention': None
    }


# Configuration mapping
config_map = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': Config
}


def get_config(config_name: Optional[str] = None) -> Config:
    """
    Get configuration instance

    Args:
        config_name: Configuration name (development, production, testing)

    Returns:
        Config: Configuration instance
    """
    if config_name is None:
        config_name = os.getenv('TRIMODAL_ENV', 'default')

    config_class = config_map.get(config_name, Config)
    return config_class()


# Global configuration instance
config = get_config()
