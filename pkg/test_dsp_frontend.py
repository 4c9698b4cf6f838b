"""
Tests for framing, spectra and log-mel features
"""

import numpy as np
import pytest

from backend.core.dsp_frontend import (
    Waveform,
    decimate,
    filter_centers,
    frame_signal,
    hz_to_mel,
    log_mel,
    mel_filterbank,
    mel_to_hz,
    num_frames,
    power_spectrum,
    resample_to,
)
from backend.utils.errors import ConfigError, InvalidLengthError
from backend.utils.validators import DspConfig

SR = 16000


def _reference_log_mel(samples: np.ndarray, cfg: DspConfig, dft: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Straight-line log-mel: explicit frames, periodic Hann, matrix DFT, explicit triangles"""
    win = cfg.win_length(SR)
    hop = cfg.hop_length(SR)
    taper = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    rows = []
    for start in range(0, len(samples) - win + 1, hop):
        frame = samples[start:start + win] * taper
        spectrum = dft @ frame
        power = spectrum.real ** 2 + spectrum.imag ** 2
        rows.append(np.log(np.maximum(weights @ power, cfg.log_floor)))
    return np.array(rows)


def _reference_triangles(cfg: DspConfig) -> np.ndarray:
    mel_lo = 2595.0 * np.log10(1.0 + cfg.fmin / 700.0)
    mel_hi = 2595.0 * np.log10(1.0 + cfg.fmax / 700.0)
    points = [700.0 * (10 ** ((mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1)) / 2595.0) - 1.0)
              for i in range(cfg.n_mels + 2)]
    weights = np.zeros((cfg.n_mels, cfg.n_fft // 2 + 1))
    for m in range(cfg.n_mels):
        lo, center, hi = points[m], points[m + 1], points[m + 2]
        for k in range(cfg.n_fft // 2 + 1):
            f = k * SR / cfg.n_fft
            if lo < f <= center:
                weights[m, k] = (f - lo) / (center - lo)
            elif center < f < hi:
                weights[m, k] = (hi - f) / (hi - center)
    return weights


def test_log_mel_matches_straight_line_reference():
    cfg = DspConfig.preset('A')
    win = cfg.win_length(SR)
    k = np.arange(cfg.n_fft // 2 + 1)[:, None]
    n = np.arange(win)[None, :]
    dft = np.exp(-2j * np.pi * k * n / cfg.n_fft)
    weights = _reference_triangles(cfg)

    rng = np.random.default_rng(0)
    for _ in range(100):
        samples = rng.uniform(-1.0, 1.0, size=SR // 2)
        ours = log_mel(Waveform(samples, SR), cfg).values
        np.testing.assert_allclose(ours, _reference_log_mel(samples, cfg, dft, weights), atol=1e-5)


def test_preset_shapes():
    three_seconds = Waveform(np.zeros(3 * SR), SR)
    assert log_mel(three_seconds, DspConfig.preset('A')).values.shape == (299, 80)
    assert log_mel(three_seconds, DspConfig.preset('B')).values.shape == (298, 64)


def test_frame_count_boundaries():
    cfg = DspConfig.preset('A')
    assert frame_signal(Waveform(np.ones(320), SR), cfg).shape == (1, 320)
    assert num_frames(48000, 320, 160) == 299
    with pytest.raises(InvalidLengthError):
        frame_signal(Waveform(np.ones(319), SR), cfg)


def test_frame_count_is_a_function_of_length(rng):
    cfg = DspConfig.preset('B')
    for length in rng.integers(400, 5000, size=20):
        frames = frame_signal(Waveform(rng.uniform(-1, 1, size=length), SR), cfg)
        assert frames.shape == ((length - 400) // 160 + 1, 400)


def test_rectangular_frames_of_constant_signal_are_identical():
    frames = frame_signal(Waveform(np.full(2000, 0.25), SR), DspConfig.preset('A'), window='boxcar')
    assert np.all(frames == frames[0])


def test_power_spectrum_zero_and_pure_tone():
    assert not power_spectrum(np.zeros((2, 320)), 512).any()
    bin_k = 32
    tone = np.sin(2 * np.pi * bin_k * np.arange(512) / 512)
    power = power_spectrum(tone[None, :], 512)[0]
    assert power[bin_k] / power.sum() >= 0.99


def test_power_spectrum_matches_naive_dft(rng):
    frame = rng.standard_normal(320)
    padded = np.concatenate([frame, np.zeros(192)])
    naive = np.array([
        abs(sum(padded[n] * np.exp(-2j * np.pi * k * n / 512) for n in range(512))) ** 2
        for k in range(257)
    ])
    np.testing.assert_allclose(power_spectrum(frame[None, :], 512)[0], naive, rtol=1e-8, atol=1e-8)


def test_filterbank_shape_support_and_peaks():
    cfg = DspConfig.preset('A')
    weights = mel_filterbank(cfg, SR)
    assert weights.shape == (80, 257)
    assert (weights >= 0).all() and weights.max() <= 1.0
    for row in weights:
        support = np.flatnonzero(row)
        assert support.size > 0
        assert np.array_equal(support, np.arange(support[0], support[-1] + 1))


def test_filter_centers_match_closed_form_inversion():
    cfg = DspConfig.preset('B')
    centers = filter_centers(cfg)
    assert np.all(np.diff(centers) > 0)
    mels = np.linspace(2595 * np.log10(1 + cfg.fmin / 700), 2595 * np.log10(1 + cfg.fmax / 700), cfg.n_mels + 2)
    np.testing.assert_allclose(centers, 700 * (10 ** (mels[1:-1] / 2595) - 1), atol=1e-6)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(centers)), centers, atol=1e-6)


def test_fmax_above_nyquist_is_rejected():
    with pytest.raises(ConfigError):
        mel_filterbank(DspConfig.preset('A'), 8000)


def test_silence_sits_at_the_floor():
    cfg = DspConfig.preset('A')
    values = log_mel(Waveform(np.zeros(SR), SR), cfg).values
    assert np.all(values == np.log(cfg.log_floor))


def test_scaling_adds_two_ln_ten(rng):
    cfg = DspConfig.preset('A')
    samples = rng.uniform(-0.05, 0.05, size=SR // 2)
    base = log_mel(Waveform(samples, SR), cfg).values
    louder = log_mel(Waveform(samples * 10.0, SR), cfg).values
    above = base > np.log(cfg.log_floor) + 1.0
    np.testing.assert_allclose(louder[above] - base[above], 2 * np.log(10.0), atol=1e-9)


def test_tone_peaks_at_its_mel_band():
    cfg = DspConfig.preset('A')
    t = np.arange(SR) / SR
    values = log_mel(Waveform(0.5 * np.sin(2 * np.pi * 1000.0 * t), SR), cfg).values
    peak = int(np.bincount(values.argmax(axis=1)).argmax())
    assert abs(filter_centers(cfg)[peak] - 1000.0) < 100.0


def test_crop_outside_clip():
    w = Waveform(np.zeros(SR), SR)
    assert len(w.crop(0.5, 0.5)) == SR // 2
    with pytest.raises(InvalidLengthError):
        w.crop(0.75, 0.5)


def test_decimation_keeps_low_tones():
    rate = 48000
    t = np.arange(rate) / rate
    w = Waveform(0.5 * np.sin(2 * np.pi * 440.0 * t), rate)
    down = decimate(w, 3)
    assert down.sample_rate == SR and len(down) == SR
    spectrum = np.abs(np.fft.rfft(down.samples))
    assert abs(np.argmax(spectrum) * SR / len(down) - 440.0) <= 1.0
    assert resample_to(w, SR).sample_rate == SR
    with pytest.raises(ConfigError):
        resample_to(w, 44100)
