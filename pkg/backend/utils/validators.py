"""
Validators Module
Pydantic schemas for every configuration block of an experiment
"""

import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import Config
from backend.utils.errors import ConfigError

Modality = Literal['S', 'W', 'V']
ENCODER_KEYS = {'S': 'spectrogram', 'W': 'waveform', 'V': 'video'}


class StrictModel(BaseModel):
    """Base model: unknown keys are rejected, instances are immutable"""
    model_config = ConfigDict(extra='forbid', frozen=True)


class DspConfig(StrictModel):
    """Log-mel front-end settings"""
    n_mels: int = Field(80, gt=0)
    window_ms: float = Field(20.0, gt=0)
    hop_ms: float = Field(10.0, gt=0)
    n_fft: int = Field(512, gt=0)
    fmin: float = Field(60.0, ge=0)
    fmax: float = 7800.0
    log_floor: float = Field(1e-10, gt=0)

    @model_validator(mode='after')
    def _check_band(self):
        if not self.fmin < self.fmax:
            raise ValueError(f"fmin ({self.fmin}) must be below fmax ({self.fmax})")
        return self

    @classmethod
    def preset(cls, name: str) -> 'DspConfig':
        return cls(**Config.get_dsp_preset(name))

    def win_length(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def hop_length(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))


class CropConfig(StrictModel):
    crop_len: float = Field(3.0, gt=0)
    video_fps: float = Field(5.0, gt=0)
    video_frames: int = Field(15, gt=0)
    video_size: int = Field(50, gt=0)


class ShiftConfig(StrictModel):
    max_shift: int = Field(10, ge=0)


class MixupConfig(StrictModel):
    beta_a: float = Field(5.0, gt=0)
    beta_b: float = Field(2.0, gt=0)
    audio: bool = True
    video: bool = True
    shared_alpha: bool = False


class JitterConfig(StrictModel):
    enabled: bool = True
    min_area: float = Field(0.6, gt=0, le=1)
    max_area: float = Field(1.0, gt=0, le=1)
    max_brightness: float = Field(0.2, ge=0)
    min_contrast: float = Field(0.8, gt=0)
    max_contrast: float = Field(1.25, gt=0)

    @model_validator(mode='after')
    def _check_ranges(self):
        if self.min_area > self.max_area or self.min_contrast > self.max_contrast:
            raise ValueError("jitter ranges must satisfy min <= max")
        return self


class AugmentConfig(StrictModel):
    crop: CropConfig = CropConfig()
    shift: ShiftConfig = ShiftConfig()
    mixup: MixupConfig = MixupConfig()
    jitter: JitterConfig = JitterConfig()


class EncoderConfig(StrictModel):
    """Conv stack followed by global pooling and a bias-free map to hidden_dim"""
    modality: Modality
    channels: List[int]
    kernels: List[int]
    strides: List[int]
    hidden_dim: int = Field(128, gt=0)

    @model_validator(mode='after')
    def _check_stages(self):
        if not self.channels:
            raise ValueError("encoder needs at least one stage")
        if not len(self.channels) == len(self.kernels) == len(self.strides):
            raise ValueError("channels, kernels and strides must have the same length")
        if min(self.channels + self.kernels + self.strides) < 1:
            raise ValueError("channels, kernels and strides must be positive")
        return self


def _default_encoder(modality: str) -> EncoderConfig:
    hidden_dim = Config.ENCODER_PRESETS['desk'][ENCODER_KEYS[modality]]
    if modality == 'W':
        return EncoderConfig(modality='W', channels=[8, 16, 32], kernels=[32, 8, 8], strides=[16, 4, 4],
                             hidden_dim=hidden_dim)
    return EncoderConfig(modality=modality, channels=[8, 16, 32], kernels=[3, 3, 3], strides=[2, 2, 2],
                         hidden_dim=hidden_dim)


class ProjectorConfig(StrictModel):
    hidden: int = Field(512, gt=0)
    out: int = Field(64, gt=0)


class ModelConfig(StrictModel):
    spectrogram: EncoderConfig = Field(default_factory=lambda: _default_encoder('S'))
    waveform: EncoderConfig = Field(default_factory=lambda: _default_encoder('W'))
    video: EncoderConfig = Field(default_factory=lambda: _default_encoder('V'))
    projector: ProjectorConfig = ProjectorConfig()

    @model_validator(mode='after')
    def _check_modalities(self):
        for key, expected in (('spectrogram', 'S'), ('waveform', 'W'), ('video', 'V')):
            if getattr(self, key).modality != expected:
                raise ValueError(f"{key} encoder must have modality {expected}")
        # the projector is shared, so every encoder feeds it the same width
        widths = {self.spectrogram.hidden_dim, self.waveform.hidden_dim, self.video.hidden_dim}
        if len(widths) != 1:
            raise ValueError("all encoders must share hidden_dim")
        return self


class ScheduleConfig(StrictModel):
    warmup_steps: int = Field(5000, ge=0)
    total_steps: int = Field(400000, ge=0)
    peak_lr: float = Field(1e-4, gt=0)

    @model_validator(mode='after')
    def _check_warmup(self):
        # total_steps == 0 is an initialization-only run
        if self.total_steps > 0 and not self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must be smaller than total_steps")
        return self

    @classmethod
    def preset(cls, name: str) -> 'ScheduleConfig':
        return cls(**Config.get_schedule_preset(name))


class OptimizerConfig(StrictModel):
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class TrainerConfig(StrictModel):
    batch_size: int = Field(Config.BATCH_PRESETS['desk'], ge=2)
    temperature: float = Field(0.1, gt=0)
    mean_reduction: bool = False
    checkpoint_every: int = Field(500, ge=1)
    log_every: int = Field(10, ge=1)
    threads: int = Field(1, ge=1)
    precision: Literal['float64', 'float32'] = 'float64'


class ClassifierConfig(StrictModel):
    kind: Literal['linear', 'mlp'] = 'mlp'
    hidden: int = Field(512, ge=0)
    num_classes: int = Field(4, ge=2)
    multi_label: bool = False
    lr: float = Field(2e-4, gt=0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=2)
    augment: bool = False
    balanced_sampling: bool = False
    cosine_decay: bool = True

    @model_validator(mode='after')
    def _check_hidden(self):
        if self.kind == 'mlp' and self.hidden <= 0:
            raise ValueError("mlp classifier requires hidden > 0")
        return self


class LatentSpec(StrictModel):
    """Controls how much class information each synthetic modality carries"""
    num_classes: int = Field(4, ge=2)
    audio_cue_strength: float = Field(1.0, ge=0, le=1)
    video_cue_strength: float = Field(1.0, ge=0, le=1)
    shared_cue_strength: float = Field(1.0, ge=0, le=1)
    distractor_strength: float = Field(0.0, ge=0, le=1)
    noise_level: float = Field(0.3, ge=0)
    clip_len: float = Field(4.0, gt=0)
    sample_rate: int = Field(16000, gt=0)
    video_fps: float = Field(5.0, gt=0)
    frame_size: int = Field(64, gt=0)


class ExperimentConfig(StrictModel):
    """Everything a pretraining or evaluation run needs"""
    seed: int = 0
    modalities: List[Modality] = ['S', 'W', 'V']
    dsp: DspConfig = DspConfig()
    augment: AugmentConfig = AugmentConfig()
    model: ModelConfig = ModelConfig()
    schedule: ScheduleConfig = Field(default_factory=lambda: ScheduleConfig.preset('desk'))
    optimizer: OptimizerConfig = OptimizerConfig()
    trainer: TrainerConfig = TrainerConfig()
    classifier: ClassifierConfig = ClassifierConfig()

    @field_validator('modalities')
    @classmethod
    def _check_modalities(cls, value):
        if len(set(value)) != len(value):
            raise ValueError("modalities must be distinct")
        if len(value) < 2:
            raise ValueError("contrastive training needs at least two modalities")
        return sorted(value, key='SWV'.index)


def validate_config(model_cls, data: dict):
    """Validate a mapping, converting pydantic errors into ConfigError"""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid {model_cls.__name__}: {e}") from e


def load_experiment_config(path: Optional[Union[str, Path]]) -> ExperimentConfig:
    """
    Load and validate an experiment config file

    Args:
        path: Path to a JSON config file

    Returns:
        ExperimentConfig: Validated configuration
    """
    if path is None:
        raise ConfigError("A config file is required (--config)")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file is not valid JSON: {e}") from e
    return validate_config(ExperimentConfig, data)


def modality_string(modalities: Union[List[str], Tuple[str, ...]]) -> str:
    """Canonical label for a modality subset, e.g. ['W', 'S'] -> 'SW'"""
    return ''.join(sorted(modalities, key='SWV'.index))
