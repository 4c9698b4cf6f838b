"""
Synthetic Data Module
Deterministic trimodal clips whose audio and video share a latent class
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from backend.core.augment import VideoClip, derive_rng
from backend.core.dsp_frontend import Waveform
from backend.utils.errors import ConfigError, DataIntegrityError
from backend.utils.file_handlers import FileHandler
from backend.utils.validators import LatentSpec

BASE_FREQUENCY = 200.0
HARMONIC_GAIN = 0.25
CUE_AMPLITUDE = 0.5
NOISE_SCALE = 0.2
DISTRACTOR_BAND = (2500.0, 6000.0)
BLOB_WIDTH = 1.0 / 8.0
LABELS_FILE = 'labels'
MANIFEST_COLUMNS = ['index', 'label', 'split', 'wav', 'video', 'clip_len', 'sample_rate', 'fps']


@dataclass(frozen=True)
class TrimodalSample:
    """One clip: waveform, video and the latent class that generated both"""
    waveform: Waveform
    video: Optional[VideoClip]
    label: int
    index: int
    audio_class: Optional[int] = None

    @property
    def clip_len(self) -> float:
        return self.waveform.duration


def class_frequency(c: int) -> float:
    """Fundamental of the tone keyed to class c"""
    return BASE_FREQUENCY * (c + 1)


def class_position(c: int, num_classes: int) -> float:
    """Horizontal blob position of class c as a fraction of the frame width"""
    return (c + 0.5) / num_classes


def _audio(spec: LatentSpec, rng: np.random.Generator, audio_class: int) -> np.ndarray:
    n = int(round(spec.clip_len * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    f0 = class_frequency(audio_class)
    tone = np.sin(2 * np.pi * f0 * t + phases[0]) + HARMONIC_GAIN * np.sin(2 * np.pi * 2 * f0 * t + phases[1])
    cue = spec.audio_cue_strength * CUE_AMPLITUDE * tone

    top = min(DISTRACTOR_BAND[1], 0.45 * spec.sample_rate)
    f_distractor = rng.uniform(DISTRACTOR_BAND[0], top)
    distractor = spec.distractor_strength * CUE_AMPLITUDE * np.sin(2 * np.pi * f_distractor * t + phases[2])

    noise = spec.noise_level * NOISE_SCALE * rng.standard_normal(n)
    return np.clip(cue + distractor + noise, -1.0, 1.0)


def _video(spec: LatentSpec, rng: np.random.Generator, label: int) -> np.ndarray:
    num_frames = max(1, int(round(spec.clip_len * spec.video_fps)))
    size = spec.frame_size
    s = spec.video_cue_strength
    x_center = s * class_position(label, spec.num_classes) + (1 - s) * rng.uniform(0.1, 0.9)
    phase = rng.uniform(0.0, 2 * np.pi)

    times = np.arange(num_frames) / spec.video_fps
    # vertical motion completes one period per clip
    y_center = 0.5 + 0.25 * np.sin(2 * np.pi * times / spec.clip_len + phase)
    coords = (np.arange(size) + 0.5) / size
    dx = (coords[None, None, :] - x_center) ** 2
    dy = (coords[None, :, None] - y_center[:, None, None]) ** 2
    blob = np.exp(-(dx + dy) / (2 * BLOB_WIDTH ** 2))

    color = np.array([1.0, 0.8, 0.6])
    frames = 0.1 + 0.8 * blob[..., None] * color
    frames = frames + spec.noise_level * 0.05 * rng.standard_normal(frames.shape)
    return np.clip(frames, 0.0, 1.0)


def gen_sample(spec: LatentSpec, seed: int, index: int) -> TrimodalSample:
    """
    Generate clip `index` of the dataset defined by (spec, seed)

    The label cycles through the classes with the index. The audio tone
    follows the label with probability shared_cue_strength and an
    independently drawn class otherwise.
    """
    rng = derive_rng(seed, index)
    label = index % spec.num_classes
    u = rng.uniform()
    other = int(rng.integers(spec.num_classes))
    audio_class = label if u < spec.shared_cue_strength else other

    samples = _audio(spec, rng, audio_class)
    frames = _video(spec, rng, label)
    return TrimodalSample(
        waveform=Waveform(samples, spec.sample_rate),
        video=VideoClip(frames, spec.video_fps),
        label=label,
        index=index,
        audio_class=audio_class,
    )


def gen_dataset(spec: LatentSpec, seed: int, n: int, start_index: int = 0) -> List[TrimodalSample]:
    """
    Generate n consecutive samples starting at start_index

    Args:
        spec: Latent settings
        seed: Dataset seed
        n: Number of samples, at least num_classes
        start_index: First sample index; disjoint ranges give disjoint samples

    Returns:
        List[TrimodalSample]: samples with balanced labels
    """
    if n < spec.num_classes:
        raise ConfigError(f"n ({n}) must be at least the number of classes ({spec.num_classes})")
    logger.info(f"Generating {n} synthetic clips (seed {seed}, {spec.num_classes} classes)")
    return [gen_sample(spec, seed, i) for i in range(start_index, start_index + n)]


def split_labels(n: int, test_fraction: float) -> List[str]:
    """Train/test assignment by position; the tail goes to test"""
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    first_test = n - int(round(n * test_fraction))
    return ['train' if i < first_test else 'test' for i in range(n)]


def save_dataset(samples: List[TrimodalSample], out_dir: Union[str, Path],
                 test_fraction: float = 0.2, include_video: bool = True) -> pd.DataFrame:
    """
    Write WAV files, video blobs and labels.csv

    Args:
        samples: Generated samples
        out_dir: Dataset directory
        test_fraction: Share of samples assigned to the test split
        include_video: Skip video blobs when False

    Returns:
        pd.DataFrame: the label manifest
    """
    handler = FileHandler(out_dir, subdirectories=('audio', 'video'))
    splits = split_labels(len(samples), test_fraction)
    rows = []
    for sample, split in zip(samples, splits):
        name = f"{sample.index:06d}"
        wav = Path(handler.write_wav(sample.waveform.samples, sample.waveform.sample_rate, name, 'audio'))
        video_name = ''
        fps = float('nan')
        if include_video and sample.video is not None:
            frames = np.round(sample.video.frames * 255.0).astype(np.uint8)
            blob = Path(handler.write_blob(frames, name, 'video', extra={'fps': sample.video.fps}))
            video_name = f"video/{blob.name}"
            fps = sample.video.fps
        rows.append({
            'index': sample.index,
            'label': sample.label,
            'split': split,
            'wav': f"audio/{wav.name}",
            'video': video_name,
            'clip_len': sample.clip_len,
            'sample_rate': sample.waveform.sample_rate,
            'fps': fps,
        })
    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    handler.save_csv_data(manifest, LABELS_FILE)
    logger.info(f"Dataset with {len(manifest)} clips written to {handler.base_directory}")
    return manifest


def load_dataset(data_dir: Union[str, Path], split: Optional[str] = None,
                 load_video: bool = True) -> Tuple[List[TrimodalSample], pd.DataFrame]:
    """
    Read a dataset directory written by save_dataset

    Any labeled clip directory with the same manifest layout works; the
    video column may be empty when only audio is available.
    """
    handler = FileHandler(data_dir)
    manifest = handler.load_csv_data(LABELS_FILE)
    missing = set(MANIFEST_COLUMNS) - set(manifest.columns)
    if missing:
        raise DataIntegrityError(f"labels.csv lacks columns: {sorted(missing)}")
    if split is not None:
        manifest = manifest[manifest['split'] == split].reset_index(drop=True)

    samples = []
    for row in manifest.itertuples(index=False):
        audio, sample_rate = handler.read_wav(row.wav)
        video = None
        try:
            if load_video and isinstance(row.video, str) and row.video:
                frames, header = handler.read_blob(row.video)
                video = VideoClip(frames.astype(np.float64) / 255.0, float(header.get('fps', row.fps)))
            samples.append(TrimodalSample(Waveform(audio, sample_rate), video, int(row.label), int(row.index)))
        except (ValueError, TypeError) as e:
            logger.error(f"Malformed manifest row {row.index}: {e}")
            raise DataIntegrityError(f"malformed manifest row {row.index} in {handler.base_directory}: {e}") from e
    logger.info(f"Loaded {len(samples)} clips from {handler.base_directory}")
    return samples, manifest
