"""
Augmentation Module
Stochastic view construction: crops, frequency shift, example mixing, video jitter
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from backend.core.dsp_frontend import Spectrogram
from backend.utils.errors import InvalidLengthError, InvalidShapeError, InvalidShiftError
from backend.utils.validators import CropConfig, JitterConfig, MixupConfig, ShiftConfig


@dataclass(frozen=True)
class VideoClip:
    """RGB frames [T, H, W, C] with values in [0, 1]"""
    frames: np.ndarray
    fps: float = 5.0

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise InvalidShapeError(f"video frames must be [T, H, W, 3], got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple:
        return self.frames.shape[1], self.frames.shape[2]

    def window(self, start_s: float, num_frames: int, fps: Optional[float] = None) -> 'VideoClip':
        """
        Frames covering [start_s, start_s + num_frames / fps)

        The clip is resampled by nearest frame when fps differs from the
        native rate; indices past the end repeat the last frame.
        """
        fps = fps or self.fps
        times = start_s + np.arange(num_frames) / fps
        idx = np.minimum(np.floor(times * self.fps + 1e-9).astype(int), self.num_frames - 1)
        return VideoClip(self.frames[idx], fps)


@dataclass(frozen=True)
class CropPlan:
    """Two audio crops plus a video window synchronized to the first crop"""
    crop1_start: float
    crop2_start: float
    crop_len: float = 3.0
    video_fps: float = 5.0
    video_frames: int = 15
    video_size: int = 50

    @property
    def video_window(self) -> tuple:
        return self.crop1_start, self.crop1_start + self.video_frames / self.video_fps


@dataclass(frozen=True)
class JitterParams:
    """One draw of the video jitter; applied identically to every frame"""
    area: float = 1.0
    offset_y: float = 0.0
    offset_x: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, step, sample_index, ...)"""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def sample_crop_plan(clip_len: float, rng: np.random.Generator,
                     cfg: Optional[CropConfig] = None) -> CropPlan:
    """
    Draw two independent crop starts uniformly in [0, clip_len - crop_len]

    Args:
        clip_len: Clip duration in seconds
        rng: Random generator
        cfg: Crop settings

    Returns:
        CropPlan: crop starts plus the video sampling settings
    """
    cfg = cfg or CropConfig()
    slack = clip_len - cfg.crop_len
    if slack < -1e-9:
        raise InvalidLengthError(f"clip of {clip_len} s is shorter than the {cfg.crop_len} s crop")
    slack = max(slack, 0.0)
    starts = rng.uniform(0.0, slack, size=2) if slack > 0 else np.zeros(2)
    return CropPlan(float(starts[0]), float(starts[1]), cfg.crop_len,
                    cfg.video_fps, cfg.video_frames, cfg.video_size)


def sample_shift(cfg: ShiftConfig, rng: np.random.Generator) -> int:
    """Integer shift drawn uniformly from [-F, F]"""
    return int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))


def freq_shift(s: Spectrogram, k: int) -> Spectrogram:
    """
    Truncated shift along the mel axis: bin b moves to b + k

    Bins shifted past either edge are dropped and vacated bins are set to 0.
    """
    n_mels = s.n_mels
    if abs(k) > n_mels:
        raise InvalidShiftError(f"shift {k} exceeds the number of mel bins ({n_mels})")
    shifted = np.zeros_like(s.values)
    if k >= 0:
        shifted[:, k:] = s.values[:, :n_mels - k]
    else:
        shifted[:, :n_mels + k] = s.values[:, -k:]
    return Spectrogram(shifted, s.frame_hop, s.log_floor)


def sample_mixing_ratio(cfg: MixupConfig, rng: np.random.Generator, size=None):
    """alpha ~ Beta(beta_a, beta_b)"""
    return rng.beta(cfg.beta_a, cfg.beta_b, size=size)


def mixup(x1: np.ndarray, x2: np.ndarray, alpha: float) -> np.ndarray:
    """alpha * x1 + (1 - alpha) * x2"""
    x1, x2 = np.asarray(x1), np.asarray(x2)
    if x1.shape != x2.shape:
        raise InvalidShapeError(f"mixup inputs differ in shape: {x1.shape} vs {x2.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"mixing ratio must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return x1.astype(np.float64)
    return _convex(alpha, x1, x2)


def _convex(alpha, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    # rounding must not leave the segment [min(x1, x2), max(x1, x2)]
    mixed = alpha * x1 + (1.0 - alpha) * x2
    return np.clip(mixed, np.minimum(x1, x2), np.maximum(x1, x2))


def mixup_batch(batch: np.ndarray, perm: Sequence[int], alphas: Sequence[float]) -> np.ndarray:
    """Mix sample i with sample perm[i] using alphas[i]"""
    batch = np.asarray(batch, dtype=np.float64)
    perm = np.asarray(perm)
    alphas = np.asarray(alphas, dtype=np.float64)
    if sorted(perm.tolist()) != list(range(len(batch))):
        raise ValueError("perm must be a permutation of the batch indices")
    if np.any((alphas < 0) | (alphas > 1)):
        raise ValueError("mixing ratios must lie in [0, 1]")
    weights = alphas.reshape((-1,) + (1,) * (batch.ndim - 1))
    mixed = _convex(weights, batch, batch[perm])
    keep = alphas == 1.0
    mixed[keep] = batch[keep]
    return mixed


def sample_jitter(cfg: JitterConfig, rng: np.random.Generator) -> JitterParams:
    if not cfg.enabled:
        return JitterParams()
    area = rng.uniform(cfg.min_area, cfg.max_area)
    return JitterParams(
        area=float(area),
        offset_y=float(rng.uniform()),
        offset_x=float(rng.uniform()),
        brightness=float(rng.uniform(-cfg.max_brightness, cfg.max_brightness)),
        contrast=float(np.exp(rng.uniform(np.log(cfg.min_contrast), np.log(cfg.max_contrast)))),
    )


def apply_video_jitter(v: VideoClip, params: JitterParams, out_size: int = 50) -> VideoClip:
    """
    Scaled crop resized bilinearly to out_size, then contrast and brightness

    Args:
        v: Clip with frames [T, H, W, C]
        params: Jitter draw
        out_size: Output side length in pixels

    Returns:
        VideoClip: frames [T, out_size, out_size, C] clamped to [0, 1]
    """
    frames = np.asarray(v.frames, dtype=np.float64)
    t, h, w, c = frames.shape
    side = np.sqrt(params.area) * min(h, w)
    if side < 1:
        raise InvalidShapeError(f"frame size {(h, w)} too small for a crop")
    y0 = params.offset_y * (h - side)
    x0 = params.offset_x * (w - side)
    # corner-aligned sampling grid: a full-area crop at out_size reproduces the input
    step = (side - 1) / (out_size - 1) if out_size > 1 else 0.0
    ys = y0 + np.arange(out_size) * step
    xs = x0 + np.arange(out_size) * step
    grid = np.meshgrid(np.arange(t), ys, xs, np.arange(c), indexing='ij')
    resized = ndimage.map_coordinates(frames, grid, order=1, mode='nearest')

    if params.contrast != 1.0:
        mean = resized.mean()
        resized = (resized - mean) * params.contrast + mean
    resized = resized + params.brightness
    return VideoClip(np.clip(resized, 0.0, 1.0), v.fps)


def video_jitter(v: VideoClip, rng: np.random.Generator, cfg: Optional[JitterConfig] = None,
                 out_size: int = 50) -> VideoClip:
    """Random scaled crop and color jitter shared by all frames of a clip"""
    return apply_video_jitter(v, sample_jitter(cfg or JitterConfig(), rng), out_size)
