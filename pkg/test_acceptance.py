"""
Acceptance runs on synthetic data (slow; run with -m slow)

These are scaled-down runs: the encoders keep the tiny unit-test shapes
(4 channels per conv stage, hidden size 8, 1 s clips) and only the schedule
and batch size follow the desk preset. They check that learning happens and
that the modality trend holds, not the full-size encoder configuration.
"""

import numpy as np
import pytest

from backend.core.synthdata import gen_dataset
from backend.core.trainer import run_pretraining
from backend.utils.validators import ExperimentConfig, LatentSpec
from conftest import tiny_config_dict
from main import override_config, probe_heads

pytestmark = pytest.mark.slow


def _desk_config(steps: int, **overrides) -> ExperimentConfig:
    data = tiny_config_dict(
        schedule={'warmup_steps': 100, 'total_steps': steps, 'peak_lr': 1e-4},
        trainer={'batch_size': 64, 'checkpoint_every': steps, 'log_every': 50},
        classifier={'num_classes': 4, 'epochs': 30, 'batch_size': 32},
        **overrides,
    )
    return ExperimentConfig.model_validate(data)


def _split(samples, test_fraction=0.2):
    cut = int(round(len(samples) * (1 - test_fraction)))
    return samples[:cut], samples[cut:]


def test_pretraining_learns_a_linearly_separable_audio_code(tmp_path):
    spec = LatentSpec(num_classes=4, shared_cue_strength=1.0, noise_level=0.3, clip_len=1.0, frame_size=32)
    train, test = _split(gen_dataset(spec, seed=0, n=400))
    cfg = _desk_config(2000, modalities=['S', 'W', 'V'])
    result = run_pretraining(cfg, train, tmp_path / 'run')
    reports = probe_heads(cfg, result.params, train, test, 'linear', ('S',))
    assert reports['S'].accuracy >= 0.9


def test_video_modality_improves_the_audio_probe(tmp_path):
    spec = LatentSpec(num_classes=4, audio_cue_strength=0.4, video_cue_strength=1.0,
                      shared_cue_strength=1.0, noise_level=0.3, clip_len=1.0, frame_size=32)
    train, test = _split(gen_dataset(spec, seed=1, n=400))
    base = _desk_config(1000)
    accuracy = {}
    for subset in ('SW', 'SVW'):
        scores = []
        for seed in range(3):
            cfg = override_config(base, seed=seed, modalities=list(subset))
            result = run_pretraining(cfg, train, tmp_path / f"{subset}_{seed}")
            scores.append(probe_heads(cfg, result.params, train, test, 'linear', ('S',))['S'].accuracy)
        accuracy[subset] = float(np.mean(scores))
    assert accuracy['SVW'] - accuracy['SW'] >= 0.05
