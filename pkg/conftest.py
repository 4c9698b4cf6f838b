"""
Shared pytest fixtures: tiny configs and synthetic clips that keep the suite fast
"""

import os

os.environ.setdefault('TRIMODAL_ENV', 'testing')

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from backend.core import diffmath as dm  # noqa: E402
from backend.core.synthdata import gen_dataset  # noqa: E402
from backend.utils.validators import ExperimentConfig, LatentSpec  # noqa: E402


def tiny_config_dict(**overrides) -> dict:
    """Desk-sized experiment small enough for unit tests"""
    data = {
        'seed': 7,
        'modalities': ['S', 'W', 'V'],
        'dsp': {'n_mels': 16, 'window_ms': 20.0, 'hop_ms': 10.0},
        'augment': {
            'crop': {'crop_len': 0.5, 'video_fps': 5.0, 'video_frames': 3, 'video_size': 16},
            'shift': {'max_shift': 2},
        },
        'model': {
            'spectrogram': {'modality': 'S', 'channels': [4, 4], 'kernels': [3, 3], 'strides': [2, 2], 'hidden_dim': 8},
            'waveform': {'modality': 'W', 'channels': [4, 4], 'kernels': [16, 8], 'strides': [8, 4], 'hidden_dim': 8},
            'video': {'modality': 'V', 'channels': [4, 4], 'kernels': [3, 3], 'strides': [2, 2], 'hidden_dim': 8},
            'projector': {'hidden': 16, 'out': 8},
        },
        'schedule': {'warmup_steps': 2, 'total_steps': 6, 'peak_lr': 1e-3},
        'trainer': {'batch_size': 4, 'checkpoint_every': 3, 'log_every': 1},
        'classifier': {'num_classes': 2, 'epochs': 3, 'batch_size': 8},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return data


@pytest.fixture(autouse=True)
def float64_default():
    """Every test starts (and ends) in 64-bit mode"""
    dm.set_default_dtype(np.float64)
    yield
    dm.set_default_dtype(np.float64)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return ExperimentConfig.model_validate(tiny_config_dict())


@pytest.fixture
def tiny_spec() -> LatentSpec:
    return LatentSpec(num_classes=2, clip_len=1.0, frame_size=16, noise_level=0.1)


@pytest.fixture
def tiny_dataset(tiny_spec):
    return gen_dataset(tiny_spec, seed=3, n=8)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
