"""
Model Module
Spectrogram, waveform and video encoders with a shared projector
"""

import hashlib
from typing import Dict, Iterator, Mapping, Optional, Sequence, Union

import numpy as np
from loguru import logger

from backend.core import diffmath as dm
from backend.core.augment import VideoClip
from backend.core.diffmath import Tensor
from backend.core.dsp_frontend import Spectrogram, Waveform
from backend.utils.errors import InvalidShapeError
from backend.utils.validators import CropConfig, DspConfig, EncoderConfig, ModelConfig

ENCODER_PREFIX = {'S': 'spectrogram', 'W': 'waveform', 'V': 'video'}
PROJECTOR_PREFIX = 'projector'
VIDEO_CHANNELS = 3


class ModelParams(Mapping[str, Tensor]):
    """Named learnable tensors of all encoders and the projector"""

    def __init__(self, tensors: Mapping[str, Union[Tensor, np.ndarray]]):
        self._tensors: Dict[str, Tensor] = {}
        for name, value in tensors.items():
            data = value.data if isinstance(value, Tensor) else value
            self._tensors[name] = Tensor(data, requires_grad=True, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def replace(self, updates: Mapping[str, np.ndarray]) -> 'ModelParams':
        """New parameter set with some tensors swapped out"""
        merged = self.arrays()
        merged.update(updates)
        return ModelParams(merged)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._tensors.values())

    def checksum(self) -> str:
        """SHA-256 over names, shapes and raw bytes"""
        digest = hashlib.sha256()
        for name in sorted(self._tensors):
            data = np.ascontiguousarray(self._tensors[name].data)
            digest.update(name.encode('utf-8'))
            digest.update(str(data.shape).encode('utf-8'))
            digest.update(data.tobytes())
        return digest.hexdigest()

    def num_values(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))


def _kaiming_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ContrastiveModel:
    """Three desk-scale encoders plus one projector shared by all modalities"""

    def __init__(self, model_cfg: Optional[ModelConfig] = None, dsp_cfg: Optional[DspConfig] = None,
                 crop_cfg: Optional[CropConfig] = None):
        self.config = model_cfg or ModelConfig()
        self.n_mels = (dsp_cfg or DspConfig()).n_mels
        self.video_size = (crop_cfg or CropConfig()).video_size
        self.encoders: Dict[str, EncoderConfig] = {
            'S': self.config.spectrogram,
            'W': self.config.waveform,
            'V': self.config.video,
        }

    @property
    def hidden_dim(self) -> int:
        return self.config.spectrogram.hidden_dim

    def init_params(self, seed: int) -> ModelParams:
        """
        Uniform fan-in initialization, reproducible for a fixed seed

        Args:
            seed: Initialization seed

        Returns:
            ModelParams: weights for all encoders and the shared projector
        """
        rng = np.random.default_rng(seed)
        tensors: Dict[str, np.ndarray] = {}
        in_channels = {'S': 1, 'W': 1, 'V': VIDEO_CHANNELS}
        for modality in ('S', 'W', 'V'):
            cfg = self.encoders[modality]
            prefix = ENCODER_PREFIX[modality]
            c_in = in_channels[modality]
            for i, (c_out, k) in enumerate(zip(cfg.channels, cfg.kernels)):
                kernel = (k,) if modality == 'W' else (k, k)
                fan_in = c_in * int(np.prod(kernel))
                tensors[f'{prefix}.conv{i}.weight'] = _kaiming_uniform(rng, (c_out, c_in) + kernel, fan_in)
                tensors[f'{prefix}.conv{i}.bias'] = np.zeros(c_out)
                c_in = c_out
            tensors[f'{prefix}.fc.weight'] = _kaiming_uniform(rng, (c_in, cfg.hidden_dim), c_in)

        proj = self.config.projector
        tensors[f'{PROJECTOR_PREFIX}.fc1.weight'] = _kaiming_uniform(rng, (self.hidden_dim, proj.hidden), self.hidden_dim)
        tensors[f'{PROJECTOR_PREFIX}.fc1.bias'] = np.zeros(proj.hidden)
        tensors[f'{PROJECTOR_PREFIX}.fc2.weight'] = _kaiming_uniform(rng, (proj.hidden, proj.out), proj.hidden)
        tensors[f'{PROJECTOR_PREFIX}.fc2.bias'] = np.zeros(proj.out)

        params = ModelParams(tensors)
        logger.debug(f"Initialized {len(params)} tensors ({params.num_values()} values) with seed {seed}")
        return params

    def _conv_stack(self, x: Tensor, modality: str, params: Mapping[str, Tensor]) -> Tensor:
        cfg = self.encoders[modality]
        prefix = ENCODER_PREFIX[modality]
        conv = dm.conv1d if modality == 'W' else dm.conv2d
        bias_shape = (-1, 1) if modality == 'W' else (-1, 1, 1)
        for i, stride in enumerate(cfg.strides):
            x = conv(x, params[f'{prefix}.conv{i}.weight'], stride)
            x = dm.relu(x + params[f'{prefix}.conv{i}.bias'].reshape(bias_shape))
        return x

    def encode_spectrogram(self, s: Union[Spectrogram, np.ndarray], params: Mapping[str, Tensor]) -> Tensor:
        """
        h_s for one spectrogram [frames, n_mels] or a batch [N, frames, n_mels]

        Global pooling over time and frequency makes the output length-invariant.
        """
        values = s.values if isinstance(s, Spectrogram) else np.asarray(s)
        single = values.ndim == 2
        batch = values[None] if single else values
        if batch.ndim != 3 or batch.shape[-1] != self.n_mels:
            raise InvalidShapeError(f"expected spectrograms [..., frames, {self.n_mels}], got {values.shape}")
        x = Tensor(batch[:, None, :, :])
        feats = self._conv_stack(x, 'S', params).mean(axis=(2, 3))
        h = feats @ params['spectrogram.fc.weight']
        return h[0] if single else h

    def encode_waveform(self, w: Union[Waveform, np.ndarray], params: Mapping[str, Tensor]) -> Tensor:
        """h_w for one waveform [L] or a batch [N, L]"""
        samples = w.samples if isinstance(w, Waveform) else np.asarray(w)
        single = samples.ndim == 1
        batch = samples[None] if single else samples
        if batch.ndim != 2:
            raise InvalidShapeError(f"expected waveforms [L] or [N, L], got {samples.shape}")
        x = Tensor(batch[:, None, :])
        feats = self._conv_stack(x, 'W', params).mean(axis=2)
        h = feats @ params['waveform.fc.weight']
        return h[0] if single else h

    def encode_video(self, v: Union[VideoClip, np.ndarray], params: Mapping[str, Tensor]) -> Tensor:
        """h_v for one clip [T, H, W, C] or a batch [N, T, H, W, C]: per-frame convs, then temporal mean"""
        frames = v.frames if isinstance(v, VideoClip) else np.asarray(v)
        single = frames.ndim == 4
        batch = frames[None] if single else frames
        size = self.video_size
        if batch.ndim != 5 or batch.shape[2:] != (size, size, VIDEO_CHANNELS):
            raise InvalidShapeError(f"expected video frames [..., T, {size}, {size}, {VIDEO_CHANNELS}], got {frames.shape}")
        n, t = batch.shape[:2]
        x = Tensor(batch.reshape(n * t, size, size, VIDEO_CHANNELS).transpose(0, 3, 1, 2))
        per_frame = self._conv_stack(x, 'V', params).mean(axis=(2, 3))
        pooled = per_frame.reshape(n, t, per_frame.shape[-1]).mean(axis=1)
        h = pooled @ params['video.fc.weight']
        return h[0] if single else h

    def encode(self, modality: str, batch, params: Mapping[str, Tensor]) -> Tensor:
        if modality == 'S':
            return self.encode_spectrogram(batch, params)
        if modality == 'W':
            return self.encode_waveform(batch, params)
        if modality == 'V':
            return self.encode_video(batch, params)
        raise ValueError(f"Unknown modality: {modality}")

    def project_and_normalize(self, h: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        """z = g(h) / ||g(h)|| through the shared projector"""
        single = h.ndim == 1
        x = h.reshape(1, -1) if single else h
        hidden = dm.relu(x @ params['projector.fc1.weight'] + params['projector.fc1.bias'])
        g = hidden @ params['projector.fc2.weight'] + params['projector.fc2.bias']
        z = dm.l2_normalize(g, axis=-1)
        return z[0] if single else z

    def embed(self, modality: str, batch, params: Mapping[str, Tensor]) -> Tensor:
        return self.project_and_normalize(self.encode(modality, batch, params), params)
