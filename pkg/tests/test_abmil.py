import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles as O
from gleasonkit import abmil
from gleasonkit.abmil import AbmilModel, AttentionParams, EncoderSpec
from gleasonkit.errors import ValidationError

SMALL = EncoderSpec(pool=32, conv_channels=3)


def _lists(model):
    return {k: v.tolist() for k, v in model.params.items()}


@pytest.fixture(scope="module")
def pixel_model():
    return AbmilModel.random(5, hidden_dim=6, encoder=SMALL)


def test_encoder_output_dimension_and_determinism(pixel_model):
    rng = np.random.default_rng(0)
    patch = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
    f = abmil.encode_patch(patch, pixel_model)
    assert f.shape == (1000,)
    assert np.array_equal(f, abmil.encode_patch(patch.copy(), pixel_model))
    batch = abmil.encode_patches(np.stack([patch, patch]), pixel_model)
    assert np.array_equal(batch[0], f) and np.array_equal(batch[1], f)


def test_encoder_matches_loop_oracle(pixel_model):
    rng = np.random.default_rng(1)
    patch = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
    want = O.encode_loops(patch, _lists(pixel_model), 32, 3)
    np.testing.assert_allclose(abmil.encode_patch(patch, pixel_model), want, rtol=0, atol=1e-9)


def test_float_input_equals_uint8(pixel_model):
    rng = np.random.default_rng(2)
    patch = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
    a = abmil.encode_patch(patch, pixel_model)
    b = abmil.encode_patch(patch / 255.0, pixel_model)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_zero_image_bias_free_encoder_gives_zero():
    m = AbmilModel.random(3, hidden_dim=4, encoder=SMALL)
    params = {k: (np.zeros_like(v) if k.endswith(".b") else v) for k, v in m.params.items()}
    m0 = AbmilModel(params, 4, SMALL)
    assert not abmil.encode_patch(np.zeros((256, 256, 3), np.uint8), m0).any()


def test_attention_examples():
    m = AbmilModel.random(1, hidden_dim=8, encoder=None)
    h = np.random.default_rng(0).normal(size=(1, 1000))
    assert abmil.gated_attention(h, m.attention).tolist() == [1.0]
    two = np.vstack([h, h])
    np.testing.assert_array_equal(abmil.gated_attention(two, m.attention), [0.5, 0.5])
    # single hidden unit with saturated gate: scores become w * tanh(v.h)
    V = np.zeros((1, 1000))
    V[0, 0] = 1.0
    U = np.zeros((1, 1000))
    U[0, 1] = 1.0
    params = AttentionParams(V, U, np.array([1.0]))
    feats = np.zeros((2, 1000))
    feats[:, 1] = 800.0  # sigmoid -> 1
    feats[0, 0] = math.atanh(math.log(2.0))
    w = abmil.gated_attention(feats, params)
    np.testing.assert_allclose(w, [2 / 3, 1 / 3], atol=1e-15)


@given(st.integers(0, 2**31 - 1), st.integers(1, 64), st.integers(1, 16))
def test_permutation_invariance_and_normalisation(seed, n, hidden):
    rng = np.random.default_rng(seed)
    m = AbmilModel.random(seed, hidden_dim=hidden, encoder=None)
    bag = rng.normal(0, 1, (n, 1000))
    out = abmil.infer_bag(bag, m)
    perm = rng.permutation(n)
    out2 = abmil.infer_bag(bag[perm], m)
    assert np.all(out.attention >= 0)
    assert abs(out.attention.sum() - 1.0) <= 1e-9
    for a, b in ((out.distribution.primary_probs, out2.distribution.primary_probs),
                 (out.distribution.secondary_probs, out2.distribution.secondary_probs)):
        assert np.max(np.abs(a - b)) <= 1e-6
        assert abs(a.sum() - 1.0) <= 1e-6


@given(st.integers(0, 2**31 - 1), st.integers(1, 20))
def test_duplicate_patch_never_loses_attention_mass(seed, n):
    rng = np.random.default_rng(seed)
    m = AbmilModel.random(seed, hidden_dim=8, encoder=None)
    bag = rng.normal(0, 1, (n, 1000))
    k = int(rng.integers(n))
    before = abmil.gated_attention(bag, m.attention)[k]
    after = abmil.gated_attention(np.vstack([bag, bag[k:k + 1]]), m.attention)
    assert after[k] + after[-1] >= before - 1e-15


def test_identical_bag_equals_singleton():
    m = AbmilModel.random(2, hidden_dim=8, encoder=None)
    h = np.random.default_rng(4).normal(size=(1, 1000))
    one = abmil.infer_bag(h, m).distribution
    many = abmil.infer_bag(np.repeat(h, 7, axis=0), m).distribution
    np.testing.assert_allclose(many.primary_probs, one.primary_probs, atol=1e-15)
    np.testing.assert_allclose(many.secondary_probs, one.secondary_probs, atol=1e-15)


def test_two_patch_forward_matches_oracle():
    m = AbmilModel.random(11, hidden_dim=3, encoder=None, head_scale=2.0)
    bag = np.random.default_rng(11).normal(size=(2, 1000))
    out = abmil.infer_bag(bag, m)
    a, p1, p2 = O.bag_forward_loops(bag.tolist(), _lists(m))
    np.testing.assert_allclose(out.attention, a, atol=1e-12)
    np.testing.assert_allclose(out.distribution.primary_probs, p1, atol=1e-12)
    np.testing.assert_allclose(out.distribution.secondary_probs, p2, atol=1e-12)


def test_patch_pattern_probs(pixel_model):
    patch = np.random.default_rng(8).integers(0, 256, (256, 256, 3), dtype=np.uint8)
    p1, p2 = abmil.patch_pattern_probs(patch, pixel_model)
    single = abmil.infer_bag(patch[None], pixel_model).distribution
    np.testing.assert_array_equal(p1, single.primary_probs)
    np.testing.assert_array_equal(p2, single.secondary_probs)
    assert abs(p1.sum() - 1) <= 1e-6 and abs(p2.sum() - 1) <= 1e-6
    feats = abmil.encode_patch(patch, pixel_model)
    _, h1, h2 = O.bag_forward_loops([feats.tolist()], _lists(pixel_model))
    np.testing.assert_allclose(p1, h1, atol=1e-12)
    np.testing.assert_allclose(p2, h2, atol=1e-12)


def test_weights_round_trip_and_errors(tmp_path, pixel_model):
    path = tmp_path / "m.gkw"
    abmil.save_weights(pixel_model, path)
    back = abmil.load_weights(path)
    assert back.hidden_dim == pixel_model.hidden_dim and back.encoder == pixel_model.encoder
    for k, v in pixel_model.params.items():
        assert np.array_equal(back.params[k], v)
    raw = path.read_bytes()
    (tmp_path / "cut.gkw").write_bytes(raw[:-100])
    with pytest.raises(ValidationError):
        abmil.load_weights(tmp_path / "cut.gkw")
    with pytest.raises(ValidationError, match="attn"):
        abmil.load_weights(path, expected_hidden_dim=7)


def test_input_validation(pixel_model):
    feat_model = AbmilModel.random(0, hidden_dim=4, encoder=None)
    with pytest.raises(ValidationError):
        abmil.infer_bag(np.zeros((0, 1000)), feat_model)
    with pytest.raises(ValidationError):
        abmil.infer_bag(np.zeros((3, 999)), feat_model)
    with pytest.raises(ValidationError):
        abmil.encode_patch(np.zeros((128, 128, 3), np.uint8), pixel_model)
    with pytest.raises(ValidationError):
        abmil.encode_patch(np.full((256, 256, 3), 2.0), pixel_model)
    with pytest.raises(ValidationError):
        abmil.encode_patch(np.zeros((256, 256, 3), np.uint8), feat_model)
    with pytest.raises(ValidationError):
        EncoderSpec(pool=30)
    bad = dict(feat_model.params)
    bad["attn.w"] = np.full(4, np.nan)
    with pytest.raises(ValidationError):
        AbmilModel(bad, 4, None)
