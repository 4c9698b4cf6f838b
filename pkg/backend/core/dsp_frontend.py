"""
DSP Front-end Module
Waveform framing, power spectra and log-mel spectrograms
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from loguru import logger
from scipy import signal

from backend.utils.errors import ConfigError, InvalidLengthError
from backend.utils.validators import DspConfig

DEFAULT_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Waveform:
    """Mono audio in [-1, 1]"""
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def crop(self, start_s: float, length_s: float) -> 'Waveform':
        """Cut [start_s, start_s + length_s) aligned to whole samples"""
        start = int(np.floor(start_s * self.sample_rate + 1e-9))
        count = int(round(length_s * self.sample_rate))
        if start + count > len(self.samples):
            raise InvalidLengthError(
                f"crop [{start_s}, {start_s + length_s}) s exceeds clip of {self.duration:.3f} s")
        return Waveform(self.samples[start:start + count], self.sample_rate)


@dataclass(frozen=True)
class Spectrogram:
    """Log-mel energies, frames x n_mels"""
    values: np.ndarray
    frame_hop: float
    log_floor: float = 1e-10

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def hz_to_mel(freq):
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def num_frames(length: int, win: int, hop: int) -> int:
    """Frame count for non-centered framing"""
    if length < win:
        raise InvalidLengthError(f"signal of {length} samples is shorter than the window ({win})")
    return (length - win) // hop + 1


def frame_signal(w: Waveform, cfg: DspConfig, window: str = 'hann') -> np.ndarray:
    """
    Split a waveform into windowed, non-centered frames

    Args:
        w: Input waveform
        cfg: Front-end settings
        window: scipy window name; 'boxcar' gives rectangular frames

    Returns:
        np.ndarray: [frames, win] windowed frames
    """
    win = cfg.win_length(w.sample_rate)
    hop = cfg.hop_length(w.sample_rate)
    count = num_frames(len(w.samples), win, hop)
    samples = np.asarray(w.samples, dtype=np.float64)
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop][:count]
    taper = signal.get_window(window, win, fftbins=True)
    return frames * taper


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """Squared magnitude of the real DFT per frame, zero-padded to n_fft"""
    if frames.shape[-1] > n_fft:
        raise ConfigError(f"n_fft ({n_fft}) is smaller than the window ({frames.shape[-1]})")
    spectrum = np.fft.rfft(frames, n=n_fft, axis=-1)
    return spectrum.real ** 2 + spectrum.imag ** 2


def mel_filterbank(cfg: DspConfig, sample_rate: int) -> np.ndarray:
    """
    Triangular filters equally spaced on the mel scale

    Args:
        cfg: Front-end settings (n_mels, n_fft, fmin, fmax)
        sample_rate: Sampling rate in Hz

    Returns:
        np.ndarray: [n_mels, n_fft // 2 + 1] non-negative weights, peaks at 1
    """
    nyquist = sample_rate / 2.0
    if cfg.fmax > nyquist:
        raise ConfigError(f"fmax ({cfg.fmax} Hz) exceeds Nyquist ({nyquist} Hz)")
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    bin_freqs = np.arange(cfg.n_fft // 2 + 1) * sample_rate / cfg.n_fft

    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs[None, :] - lower) / (center - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(weights.sum(axis=1) == 0)
    if empty.size:
        logger.warning(f"{empty.size} mel filters cover no FFT bin (n_fft={cfg.n_fft}); they stay at the floor")
    return weights


def filter_centers(cfg: DspConfig) -> np.ndarray:
    """Center frequency in Hz of every mel filter"""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))[1:-1]


def log_mel(w: Waveform, cfg: DspConfig) -> Spectrogram:
    """log(max(filterbank . power, log_floor)) per frame"""
    power = power_spectrum(frame_signal(w, cfg), cfg.n_fft)
    energies = power @ mel_filterbank(cfg, w.sample_rate).T
    values = np.log(np.maximum(energies, cfg.log_floor))
    return Spectrogram(values, frame_hop=cfg.hop_length(w.sample_rate) / w.sample_rate,
                       log_floor=cfg.log_floor)


def decimate(w: Waveform, factor: int) -> Waveform:
    """Integer-factor downsampling with an anti-aliasing filter"""
    if factor < 1:
        raise ConfigError(f"decimation factor must be >= 1, got {factor}")
    if factor == 1:
        return w
    if w.sample_rate % factor:
        raise ConfigError(f"{w.sample_rate} Hz is not divisible by {factor}")
    samples = signal.decimate(np.asarray(w.samples, dtype=np.float64), factor, zero_phase=True)
    return Waveform(np.clip(samples, -1.0, 1.0), w.sample_rate // factor)


def resample_to(w: Waveform, target_rate: Optional[int]) -> Waveform:
    """Decimate to target_rate when it divides the current rate"""
    if target_rate is None or target_rate == w.sample_rate:
        return w
    if w.sample_rate % target_rate:
        raise ConfigError(
            f"only integer-factor decimation is supported ({w.sample_rate} Hz -> {target_rate} Hz)")
    return decimate(w, w.sample_rate // target_rate)
