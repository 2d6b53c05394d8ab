import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vglab import tensor as T
from vglab.errors import ConfigError, LengthError, VocabularyError
from vglab.tensor import Tensor, grad_check
from vglab.transformer import (
    BackboneConfig,
    DropoutState,
    EncoderLayer,
    FeedForward,
    MultiHeadAttention,
    Seq2SeqBackbone,
    attention,
    causal_bias,
    key_padding_bias,
    sinusoidal_table,
)


def backbone(seed=0, **kw):
    cfg = dict(n_layers=2, d_model=8, n_heads=2, d_ff=12, vocab_size=11, max_positions=40, dropout=0.0)
    cfg.update(kw)
    rng = np.random.default_rng(seed)
    return Seq2SeqBackbone(BackboneConfig(**cfg), rng, DropoutState(cfg["dropout"], np.random.default_rng(seed + 1)))


def test_position_zero_alternates_zero_one():
    np.testing.assert_array_equal(sinusoidal_table(3, 6)[0], [0, 1, 0, 1, 0, 1])


def test_sinusoid_matches_closed_form():
    table = sinusoidal_table(7, 8)
    for p in range(7):
        for i in range(4):
            angle = p / 10000 ** (2 * i / 8)
            assert table[p, 2 * i] == pytest.approx(math.sin(angle), abs=1e-12)
            assert table[p, 2 * i + 1] == pytest.approx(math.cos(angle), abs=1e-12)


def test_single_key_attention_returns_its_value():
    rng = np.random.default_rng(0)
    q = Tensor(rng.normal(size=(1, 1, 3, 4)))
    k = Tensor(rng.normal(size=(1, 1, 1, 4)))
    v = Tensor(rng.normal(size=(1, 1, 1, 4)))
    out, w = attention(q, k, v, None, 0.5)
    np.testing.assert_array_equal(w.data, 1.0)
    np.testing.assert_allclose(out.data, np.broadcast_to(v.data, out.shape))


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        BackboneConfig(d_model=10, n_heads=4)


def test_config_rejects_bad_dropout():
    with pytest.raises(ConfigError):
        BackboneConfig(dropout=1.0)


def test_key_padding_bias_shape_and_values():
    b = key_padding_bias(np.array([[True, False]]))
    assert b.shape == (1, 1, 1, 2) and b[0, 0, 0, 0] == 0 and b[0, 0, 0, 1] < -1e20


def test_causal_bias_is_lower_triangular():
    b = causal_bias(np.ones((1, 4), dtype=bool))[0, 0]
    assert ((b == 0) == np.tril(np.ones((4, 4), dtype=bool))).all()


@given(seed=st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_attention_rows_are_distributions(seed):
    rng = np.random.default_rng(seed)
    mha = MultiHeadAttention(8, 2, rng)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    mha(x, x, key_padding_bias(mask))
    w = mha.last_weights
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    assert np.abs(w[0, ..., 3:]).max() == 0.0


def test_ffn_maps_zero_to_zero():
    rng = np.random.default_rng(0)
    ffn = FeedForward(6, 10, rng, DropoutState(0.1, rng))
    assert not ffn(Tensor(np.zeros((2, 3, 6)))).data.any()


def test_eval_mode_is_deterministic_with_dropout_configured():
    bb = backbone(dropout=0.3)
    ids, mask = np.array([[4, 5, 6]]), np.ones((1, 3), dtype=bool)
    assert np.array_equal(bb.encode(ids, mask).data, bb.encode(ids, mask).data)


def test_train_mode_dropout_changes_outputs():
    bb = backbone(dropout=0.3)
    bb.encoder[0].ffn.drop.training = True
    ids, mask = np.array([[4, 5, 6]]), np.ones((1, 3), dtype=bool)
    assert not np.array_equal(bb.encode(ids, mask).data, bb.encode(ids, mask).data)


def test_decoder_is_causal():
    bb = backbone(seed=3)
    src, smask = np.array([[4, 5, 6, 7]]), np.ones((1, 4), dtype=bool)
    mem = bb.encode(src, smask)
    tgt = np.array([[1, 4, 8, 9]])
    tmask = np.ones((1, 4), dtype=bool)
    base = bb.decode(tgt, tmask, mem, smask).data
    tgt2 = tgt.copy()
    tgt2[0, 3] = 10
    alt = bb.decode(tgt2, tmask, mem, smask).data
    np.testing.assert_array_equal(base[0, :3], alt[0, :3])
    assert not np.array_equal(base[0, 3], alt[0, 3])


def test_padding_does_not_change_unpadded_outputs():
    bb = backbone(seed=4)
    src = np.array([[4, 5, 6]])
    tgt = np.array([[1, 7, 8]])
    ones = np.ones((1, 3), dtype=bool)
    logits = bb.decode(tgt, ones, bb.encode(src, ones), ones).data

    psrc = np.array([[4, 5, 6, 0, 0]])
    pmask = np.array([[1, 1, 1, 0, 0]], dtype=bool)
    ptgt = np.array([[1, 7, 8, 0]])
    ptmask = np.array([[1, 1, 1, 0]], dtype=bool)
    padded = bb.decode(ptgt, ptmask, bb.encode(psrc, pmask), pmask).data
    np.testing.assert_allclose(padded[0, :3], logits[0], atol=1e-9, rtol=0)


def test_logits_use_tied_embedding():
    bb = backbone()
    ones = np.ones((1, 2), dtype=bool)
    logits = bb.decode(np.array([[1, 4]]), ones, bb.encode(np.array([[5, 6]]), ones), ones)
    assert logits.shape == (1, 2, 11)
    assert "embed" in bb.parameters() and not any("head" in k for k in bb.parameters())


def test_length_and_vocabulary_checks():
    bb = backbone(max_positions=4)
    with pytest.raises(LengthError):
        bb.encode(np.ones((1, 5), dtype=int), np.ones((1, 5), dtype=bool))
    with pytest.raises(VocabularyError):
        bb.encode(np.array([[11]]), np.ones((1, 1), dtype=bool))


def test_encoder_layer_gradients():
    rng = np.random.default_rng(5)
    layer = EncoderLayer(4, 2, 6, rng, DropoutState(0.0, rng))
    for _, p in layer.named_parameters():
        if p.data.ndim == 2:
            p.data = rng.normal(scale=0.5, size=p.shape)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    bias = key_padding_bias(np.array([[1, 1, 0], [1, 1, 1]], dtype=bool))
    w = rng.normal(size=(2, 3, 4))
    params = dict(layer.named_parameters(), x=x)
    rep = grad_check(lambda: (layer(x, bias) * w).sum(), params)
    assert rep.max_error < 1e-4, rep


def test_backbone_gradients():
    bb = backbone(seed=6, d_model=4, d_ff=6, n_layers=1)
    rng = np.random.default_rng(0)
    for _, p in bb.named_parameters():
        if p.data.ndim == 2:
            p.data = rng.normal(scale=0.5, size=p.shape)
    ones = np.ones((1, 3), dtype=bool)

    def loss():
        logits = bb.decode(np.array([[1, 4, 5]]), ones, bb.encode(np.array([[6, 7, 8]]), ones), ones)
        return T.log_softmax(logits, -1).sum() * -1.0

    assert grad_check(loss, bb.parameters()).max_error < 1e-4
