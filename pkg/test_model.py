"""
Tests for the encoders and the shared projector
"""

import numpy as np
import pytest

from backend.core import diffmath as dm
from backend.core.augment import VideoClip
from backend.core.dsp_frontend import Spectrogram, Waveform
from backend.core.model import ContrastiveModel, ModelParams
from backend.utils.errors import DegenerateInputError, InvalidShapeError

GRAD_TOL = 1e-5


@pytest.fixture
def model(tiny_config):
    return ContrastiveModel(tiny_config.model, tiny_config.dsp, tiny_config.augment.crop)


@pytest.fixture
def params(model):
    return model.init_params(seed=11)


def _inputs(rng):
    return {
        'S': Spectrogram(rng.standard_normal((24, 16)), frame_hop=0.01),
        'W': Waveform(rng.uniform(-1, 1, size=400)),
        'V': VideoClip(rng.uniform(size=(3, 16, 16, 3))),
    }


def _zero_last_conv(params: ModelParams, prefix: str) -> ModelParams:
    weight, bias = f'{prefix}.conv1.weight', f'{prefix}.conv1.bias'
    return params.replace({weight: np.zeros_like(params[weight].data), bias: np.zeros_like(params[bias].data)})


class TestEncoders:

    def test_output_size_ignores_input_length(self, model, params, rng):
        short_s, long_s = rng.standard_normal((12, 16)), rng.standard_normal((50, 16))
        assert model.encode_spectrogram(short_s, params).shape == (8,)
        assert model.encode_spectrogram(long_s, params).shape == (8,)
        assert model.encode_waveform(rng.uniform(-1, 1, 200), params).shape == (8,)
        assert model.encode_waveform(rng.uniform(-1, 1, 1600), params).shape == (8,)
        assert model.encode_video(rng.uniform(size=(1, 16, 16, 3)), params).shape == (8,)
        assert model.encode_video(rng.uniform(size=(7, 16, 16, 3)), params).shape == (8,)

    @pytest.mark.parametrize('modality,prefix', [('S', 'spectrogram'), ('W', 'waveform'), ('V', 'video')])
    def test_zero_final_stage_gives_zero_features(self, model, params, rng, modality, prefix):
        zeroed = _zero_last_conv(params, prefix)
        h = model.encode(modality, _inputs(rng)[modality], zeroed)
        np.testing.assert_array_equal(h.numpy(), np.zeros(8))

    @pytest.mark.parametrize('modality,prefix', [('S', 'spectrogram'), ('W', 'waveform'), ('V', 'video')])
    def test_feature_norm_gradients(self, model, params, rng, modality, prefix):
        x = _inputs(rng)[modality]
        own = {name: t for name, t in params.items() if name.startswith(prefix)}

        def fn(p):
            h = model.encode(modality, x, p)
            return (h * h).sum()

        assert dm.gradient_check(fn, own, num_entries=40, seed=3) < GRAD_TOL

    def test_batched_and_single_inputs_agree(self, model, params, rng):
        batch = rng.standard_normal((3, 20, 16))
        stacked = model.encode_spectrogram(batch, params).numpy()
        for i in range(3):
            np.testing.assert_allclose(model.encode_spectrogram(batch[i], params).numpy(), stacked[i], atol=1e-12)

    def test_shape_errors(self, model, params, rng):
        with pytest.raises(InvalidShapeError):
            model.encode_spectrogram(rng.standard_normal((20, 12)), params)
        with pytest.raises(InvalidShapeError):
            model.encode_video(rng.uniform(size=(3, 20, 20, 3)), params)
        with pytest.raises(InvalidShapeError):
            model.encode_waveform(rng.standard_normal((2, 3, 400)), params)
        with pytest.raises(ValueError):
            model.encode('X', None, params)

    def test_bounded_inputs_give_finite_outputs(self, model):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            p = model.init_params(seed)
            for modality, x in _inputs(rng).items():
                assert np.all(np.isfinite(model.encode(modality, x, p).numpy()))


class TestProjector:

    def test_unit_norm(self, model, params, rng):
        for _ in range(10):
            z = model.project_and_normalize(dm.Tensor(rng.standard_normal(8)), params).numpy()
            assert np.linalg.norm(z) == pytest.approx(1.0, abs=1e-9)

    def test_projector_is_shared(self, model, params, rng):
        projector_names = [name for name in params if name.startswith('projector.')]
        assert sorted(projector_names) == ['projector.fc1.bias', 'projector.fc1.weight',
                                           'projector.fc2.bias', 'projector.fc2.weight']
        inputs = _inputs(rng)
        h_s = model.encode('S', inputs['S'], params)
        z_first = model.project_and_normalize(h_s, params).numpy()
        z_again = model.project_and_normalize(dm.Tensor(h_s.numpy()), params).numpy()
        np.testing.assert_array_equal(z_first, z_again)

    def test_scaling_output_layer_leaves_embedding_unchanged(self, model, params, rng):
        h = dm.Tensor(rng.standard_normal((4, 8)))
        scaled = params.replace({
            'projector.fc2.weight': params['projector.fc2.weight'].data * 3.5,
            'projector.fc2.bias': params['projector.fc2.bias'].data * 3.5,
        })
        np.testing.assert_allclose(model.project_and_normalize(h, scaled).numpy(),
                                   model.project_and_normalize(h, params).numpy(), atol=1e-12)

    def test_zero_projection_is_degenerate(self, model, params):
        zeroed = params.replace({name: np.zeros_like(params[name].data)
                                 for name in params if name.startswith('projector.fc2')})
        with pytest.raises(DegenerateInputError):
            model.project_and_normalize(dm.Tensor(np.ones(8)), zeroed)

    def test_embed_batch_rows_are_unit(self, model, params, rng):
        z = model.embed('W', rng.uniform(-1, 1, size=(5, 400)), params).numpy()
        assert z.shape == (5, 8)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)


class TestParams:

    def test_seeded_init_is_bitwise_reproducible(self, model):
        a, b = model.init_params(5), model.init_params(5)
        assert a.checksum() == b.checksum()
        for name in a:
            assert np.array_equal(a[name].data, b[name].data)
        assert model.init_params(6).checksum() != a.checksum()

    def test_replace_keeps_original(self, params):
        name = 'waveform.fc.weight'
        updated = params.replace({name: np.zeros_like(params[name].data)})
        assert params[name].data.any()
        assert not updated[name].data.any()
        assert set(updated) == set(params)

    def test_finiteness_and_size(self, params):
        assert params.is_finite()
        assert params.num_values() == sum(t.size for t in params.values())
        name = 'video.fc.weight'
        poisoned = params.replace({name: np.full(params[name].shape, np.nan)})
        assert not poisoned.is_finite()
