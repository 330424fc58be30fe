import json

import numpy as np
import pytest

from jedssl.autodiff import Tensor, no_grad
from jedssl.model import (
    ModelConfig,
    causal_mask,
    decoder_forward,
    encoder_forward,
    init_params,
    is_decoder_param,
    is_encoder_param,
)

from oracles import TINY_MODEL


@pytest.fixture(scope="module")
def params():
    return init_params(TINY_MODEL, seed=3)


def _enc(params, feats, valid=None):
    with no_grad():
        return encoder_forward(Tensor(feats), params, TINY_MODEL.encoder, valid)


class TestEncoder:
    def test_shapes_and_intermediates(self, params, rng):
        out = _enc(params, rng.normal(size=(2, 7, 4)))
        assert out.states.shape == (2, 7, 4)
        assert len(out.intermediates) == TINY_MODEL.encoder.n_layers + 1
        assert out.attention[0].shape == (2, 2, 7, 7)

    def test_padding_does_not_change_valid_frames(self, params, rng):
        feats = rng.normal(size=(1, 5, 4))
        padded = np.concatenate([feats, rng.normal(size=(1, 3, 4))], axis=1)
        valid = np.array([[True] * 5 + [False] * 3])
        a = _enc(params, feats).states.data
        b = _enc(params, padded, valid).states.data[:, :5]
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_feature_dim_mismatch(self, params):
        with pytest.raises(ValueError, match="feature dim"):
            _enc(params, np.zeros((1, 3, 5)))


class TestDecoder:
    def test_causal(self, params, rng):
        enc = _enc(params, rng.normal(size=(1, 6, 4))).states
        tokens = np.array([[2, 0, 1, 1]])
        changed = tokens.copy()
        changed[0, 2] = 0
        with no_grad():
            a = decoder_forward(tokens, enc, params, TINY_MODEL.decoder).logits.data
            b = decoder_forward(changed, enc, params, TINY_MODEL.decoder).logits.data
        np.testing.assert_allclose(a[0, :2], b[0, :2], atol=1e-12)
        assert not np.allclose(a[0, 2:], b[0, 2:])

    def test_padded_encoder_frames_ignored(self, params, rng):
        feats = rng.normal(size=(1, 5, 4))
        valid = np.array([[True] * 4 + [False]])
        enc = _enc(params, feats, valid).states
        other = enc.data.copy()
        other[0, 4] += 100.0
        with no_grad():
            a = decoder_forward([[2, 0]], enc, params, TINY_MODEL.decoder, valid).logits.data
            b = decoder_forward([[2, 0]], Tensor(other), params, TINY_MODEL.decoder, valid).logits.data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_vocab_and_oov(self, params, rng):
        enc = _enc(params, rng.normal(size=(1, 3, 4))).states
        with no_grad():
            out = decoder_forward([[3, 1]], enc, params, TINY_MODEL.decoder)
        assert out.logits.shape == (1, 2, TINY_MODEL.n_units + 2)
        with pytest.raises(IndexError):
            decoder_forward([[TINY_MODEL.n_units + 2]], enc, params, TINY_MODEL.decoder)

    def test_causal_mask_shape(self):
        m = causal_mask(3)[0, 0]
        np.testing.assert_array_equal(m, [[0, 1, 1], [0, 0, 1], [0, 0, 0]])


class TestInit:
    def test_deterministic(self):
        a, b = init_params(TINY_MODEL, 5), init_params(TINY_MODEL, 5)
        assert all(np.array_equal(a[n].data, b[n].data) for n in a)

    def test_every_param_is_encoder_or_decoder(self, params):
        for name in params:
            assert is_encoder_param(name) != is_decoder_param(name), name

    def test_mixed_mode_copies_encoder_and_reinits_decoder(self, params):
        class Ck:
            model_config = TINY_MODEL.to_dict()
            params = {n: t.data + 1.0 for n, t in init_params(TINY_MODEL, 9).items()}

        mixed = init_params(TINY_MODEL, 3, "encoder_from_checkpoint_decoder_random", Ck)
        for name, t in mixed.items():
            if is_encoder_param(name):
                np.testing.assert_array_equal(t.data, Ck.params[name])
            else:
                np.testing.assert_array_equal(t.data, params[name].data)

    def test_mixed_mode_reports_config_differences(self):
        other = ModelConfig.from_dict({**TINY_MODEL.to_dict(), "n_units": 5})

        class Ck:
            model_config = other.to_dict()
            params = {}

        with pytest.raises(ValueError, match="n_units: 2 != 5"):
            init_params(TINY_MODEL, 0, "encoder_from_checkpoint_decoder_random", Ck)

    def test_config_json_roundtrip(self):
        assert ModelConfig.from_dict(json.loads(json.dumps(TINY_MODEL.to_dict()))) == TINY_MODEL

    def test_head_must_divide_width(self):
        from jedssl.model import EncoderConfig

        with pytest.raises(ValueError):
            EncoderConfig(n_layers=1, n_heads=3, d_model=4, d_ff=4)
