from __future__ import annotations

import numpy as np
import pytest
from conftest import GRAD_TOL, store_gradcheck

from coughssl import diffcore as dc
from coughssl.diffcore import Tensor
from coughssl.encoder import (
    EncoderConfig,
    check_params,
    encode,
    encode_batch,
    encode_recurrent,
    init_encoder,
    transformer_forward,
)
from coughssl.errors import ConfigMismatch, InvalidConfig, ShapeMismatch
from coughssl.masking import MaskMatrix, generate_mask, generate_masks

SMALL = EncoderConfig(d_model=16, n_layers=2, n_heads=4, ffn_dim=24, dropout=0.2, n_bins=8)


def _params(cfg=SMALL, seed=0):
    return init_encoder(cfg, np.random.default_rng(seed), dtype=np.float64)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        EncoderConfig(d_model=10, n_heads=4)
    with pytest.raises(InvalidConfig):
        EncoderConfig(dropout=1.0)
    with pytest.raises(InvalidConfig):
        EncoderConfig(encoder_kind="cnn")


def test_identical_clips_give_identical_h():
    p = _params()
    x = np.random.default_rng(1).standard_normal((8, 10))
    a = encode(x, None, p, SMALL)
    b = encode(x.copy(), MaskMatrix(np.ones(10, dtype=bool), 0.0), p, SMALL)
    assert a.h.shape == (16,)
    np.testing.assert_array_equal(a.h, b.h)


def test_pooled_h_is_frame_permutation_invariant_without_positions():
    cfg = EncoderConfig(**{**SMALL.as_dict(), "positional_encoding": False})
    p = _params(cfg)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((8, 12))
    base = encode(x, None, p, cfg).h
    for _ in range(5):
        perm = rng.permutation(12)
        np.testing.assert_allclose(encode(x[:, perm], None, p, cfg).h, base, atol=1e-12)


@pytest.mark.parametrize("rate", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_output_shape_and_attention_rows(rate):
    p = _params()
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 8, 10))
    kept = generate_masks(3, 10, rate, rng)
    trace = {}
    h = transformer_forward(p, SMALL, x, kept=kept, trace=trace)
    assert h.shape == (3, 16) and np.isfinite(h.data).all()
    for i in range(SMALL.n_layers):
        w = trace[f"attn.{i}"]  # (batch, heads, T, T)
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-5)
        hidden = ~kept[:, None, None, :] & ~np.eye(10, dtype=bool)[None, None]
        assert (w[np.broadcast_to(hidden, w.shape)] == 0.0).all()


def test_rate_one_has_no_cross_attention():
    p = _params()
    trace = {}
    kept = generate_masks(2, 10, 1.0, np.random.default_rng(0))
    transformer_forward(p, SMALL, np.random.default_rng(4).standard_normal((2, 8, 10)), kept=kept, trace=trace)
    for i in range(SMALL.n_layers):
        np.testing.assert_array_equal(trace[f"attn.{i}"], np.broadcast_to(np.eye(10), trace[f"attn.{i}"].shape))


def test_dropout_only_in_training():
    p = _params()
    x = np.random.default_rng(5).standard_normal((2, 8, 10))
    with dc.no_grad():
        a = encode_batch(p, SMALL, x, train=False).data
        b = encode_batch(p, SMALL, x, train=False).data
        c = encode_batch(p, SMALL, x, train=True, rng=np.random.default_rng(0)).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_shape_and_config_mismatch():
    p = _params()
    with pytest.raises(ShapeMismatch):
        encode(np.zeros((7, 10)), None, p, SMALL)
    with pytest.raises(ShapeMismatch):
        transformer_forward(p, SMALL, np.zeros((1, 8, 10)), kept=np.ones((1, 9), dtype=bool))
    other = EncoderConfig(**{**SMALL.as_dict(), "d_model": 32})
    with pytest.raises(ConfigMismatch):
        check_params(p, other)
    with pytest.raises(ConfigMismatch):
        encode(np.zeros((8, 10)), None, p, other)


def test_batched_equals_single_clip_encoding():
    p = _params()
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 8, 10))
    kept = generate_masks(4, 10, 0.5, rng)
    with dc.no_grad():
        batch = encode_batch(p, SMALL, x, kept=kept).data
    for i in range(4):
        one = encode(x[i], MaskMatrix(kept[i], 0.5), p, SMALL).h
        np.testing.assert_allclose(one, batch[i], atol=1e-12)


# -- recurrent baseline ---------------------------------------------------------------

GRU = EncoderConfig(d_model=3, n_layers=1, n_heads=1, ffn_dim=4, dropout=0.0, n_bins=5, encoder_kind="recurrent")


def _sigmoid(v):
    return 1 / (1 + np.exp(-v))


def test_single_step_gru_matches_cell_formula():
    p = _params(GRU, 7)
    x = np.random.default_rng(8).standard_normal((5, 1))
    g = {k[4:]: t.data for k, t in p.items()}
    xt, h0 = x[:, 0], np.zeros(3)
    r = _sigmoid(xt @ g["w_ir"] + g["b_ir"] + h0 @ g["w_hr"] + g["b_hr"])
    z = _sigmoid(xt @ g["w_iz"] + g["b_iz"] + h0 @ g["w_hz"] + g["b_hz"])
    n = np.tanh(xt @ g["w_in"] + g["b_in"] + r * (h0 @ g["w_hn"] + g["b_hn"]))
    np.testing.assert_allclose(encode_recurrent(x, p, GRU).h, (1 - z) * n + z * h0, atol=1e-12)


def test_zero_input_zero_weights_stays_zero():
    p = _params(GRU)
    for _, t in p.items():
        t.data[...] = 0.0
    np.testing.assert_array_equal(encode_recurrent(np.zeros((5, 6)), p, GRU).h, np.zeros(3))


def test_gru_gradient_check_t4_d3():
    p = _params(GRU, 9)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 5, 4))
    w = rng.standard_normal((2, 3))
    err = store_gradcheck(lambda: (encode_batch(p, GRU, x) * Tensor(w)).sum(), p, 0, max_coords=20)
    assert err <= GRAD_TOL


def test_tiny_transformer_gradient_check():
    cfg = EncoderConfig(d_model=4, n_layers=1, n_heads=1, ffn_dim=6, dropout=0.0, n_bins=3)
    p = _params(cfg, 12)
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 3, 4))
    kept = np.stack([generate_mask(4, 0.5, rng).kept for _ in range(2)])
    w = rng.standard_normal((2, 4))
    err = store_gradcheck(lambda: (encode_batch(p, cfg, x, kept=kept) * Tensor(w)).sum(), p, 0, max_coords=30)
    assert err <= GRAD_TOL
