"""Tests for the MLP blocks and the simple/complex encoders."""

import numpy as np
import pytest
from pydantic import ValidationError

from tf4ctr.diffcore import Rng, constant, grad_check, mean_all, mul, parameter
from tf4ctr.encoders import Dense, Mlp, MlpEncoder, default_configs, encode, validate_depths
from tf4ctr.errors import ConfigError
from tf4ctr.models import EncoderConfig, ModelConfig


def test_zero_weights_give_half_probability():
    enc = MlpEncoder(6, EncoderConfig(hidden_units=[5, 4]), Rng(1))
    for p in enc.parameters():
        p.value[...] = 0.0
    out = enc(constant(np.random.default_rng(0).normal(size=(3, 6))))
    assert np.array_equal(out.logit.value, np.zeros((3, 1)))
    assert np.allclose(out.prob.value, 0.5)


def test_single_layer_structure():
    """[400] is one hidden layer followed by the head."""
    enc = MlpEncoder(32, EncoderConfig(hidden_units=[400]), Rng(2))
    assert enc.depth == 1
    assert enc.hidden_width == 400
    assert len(enc.body.hidden) == 1
    assert enc.head.bias is None
    assert enc.parameter_count() == 32 * 400 + 400 + 400


def test_head_bias_switch():
    enc = MlpEncoder(4, EncoderConfig(hidden_units=[3], head_bias=True), Rng(2))
    assert enc.head.bias is not None
    assert enc.head.bias.shape == (1, 1)


def test_encoder_gradients_match_finite_differences(rng):
    """Three-layer encoder on four samples, checked away from relu kinks."""
    enc = MlpEncoder(5, EncoderConfig(hidden_units=[6, 6, 4], head_bias=True), Rng(3))
    x = parameter(rng.normal(size=(4, 5)), name="x")
    target = constant(rng.normal(size=(4, 1)))
    assert grad_check(lambda: mean_all(mul(enc(x).prob, target)), enc.parameters() + [x]).passed


def test_encode_rejects_wrong_width():
    enc = MlpEncoder(5, EncoderConfig(hidden_units=[3]), Rng(4))
    with pytest.raises(ConfigError):
        encode(enc, constant(np.ones((2, 4))))


def test_rows_do_not_mix(rng):
    """Permuting the batch permutes the outputs the same way."""
    enc = MlpEncoder(5, EncoderConfig(hidden_units=[8, 8]), Rng(5))
    x = rng.normal(size=(6, 5))
    perm = rng.permutation(6)
    out = enc(constant(x)).logit.value
    permuted = enc(constant(x[perm])).logit.value
    assert np.allclose(permuted, out[perm], atol=1e-14)


def test_wider_layers_never_shrink_the_parameter_count():
    narrow = MlpEncoder(10, EncoderConfig(hidden_units=[8, 8]), Rng(6))
    wide = MlpEncoder(10, EncoderConfig(hidden_units=[16, 8]), Rng(6))
    assert wide.parameter_count() >= narrow.parameter_count()


def test_default_configs():
    simple, complex_ = default_configs()
    assert simple.depth == 1
    assert complex_.hidden_units == [400, 400, 400]


def test_depth_ordering():
    validate_depths(EncoderConfig(hidden_units=[800, 800]), EncoderConfig(hidden_units=[400] * 3))
    with pytest.raises(ConfigError):
        deep = EncoderConfig(hidden_units=[400] * 3)
        validate_depths(deep, deep)
    with pytest.raises(ValidationError):
        ModelConfig(simple_hidden=[400, 400, 400], complex_hidden=[400, 400, 400])


def test_mlp_output_layer_and_activation():
    mlp = Mlp(3, [4], Rng(7), out_dim=2, activation="sigmoid")
    assert mlp.out_dim == 2
    assert mlp(constant(np.ones((5, 3)))).shape == (5, 2)
    assert Mlp(3, [], Rng(7)).out_dim == 3
    with pytest.raises(ConfigError):
        Mlp(3, [4], Rng(7), activation="tanh")


def test_dense_is_seeded():
    a = Dense(4, 3, Rng(8).child("x"))
    b = Dense(4, 3, Rng(8).child("x"))
    assert np.array_equal(a.weight.value, b.weight.value)
    assert not a.bias.value.any()
