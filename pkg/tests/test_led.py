import math

import numpy as np
import pytest

from changekit import tensor as T
from changekit.config import DecoderConfig, EncoderConfig, FpnConfig, ModelConfig
from changekit.encoder import PyramidPair
from changekit.led import (
    ChannelAttention,
    DecodeOutput,
    LayerExchangeDecoder,
    LedLevelParams,
    channel_attention,
    downsample_nearest,
    layer_exchange,
    led_level,
    loss_terms,
    total_loss,
)
from changekit.model import ChangeDetector
from changekit.tensor import ParamStore, ShapeError, Tensor, grad_check

from . import oracles
from .gradtools import relu_margin

LN2 = math.log(2.0)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def toy_model_cfg(**kw) -> ModelConfig:
    cfg = ModelConfig(
        encoder=EncoderConfig(widths=(4, 6, 8, 10), blocks=1),
        fpn=FpnConfig(width=8),
        decoder=DecoderConfig(**kw),
    )
    return cfg


def level(width=8, seed=0, tie=False, has_prev=True, dtype=np.float64):
    store = ParamStore(dtype)
    params = LedLevelParams(store, "lvl", width, DecoderConfig(tie_streams=tie), np.random.default_rng(seed), has_prev)
    return store, params


def randomize(store, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in store.values():
        p.data[...] = rng.standard_normal(p.shape) * scale


def arrays(conv):
    return conv.weight.data, conv.bias.data


# ---------------------------------------------------------------------------
# layer exchange


def test_exchange_at_coarsest_level_is_identity():
    x_a, x_b = t64(np.ones((1, 4, 2, 2))), t64(np.zeros((1, 4, 2, 2)))
    out = layer_exchange(x_a, x_b, None, None, None, None)
    assert out[0] is x_a and out[1] is x_b


def test_exchange_symmetry_with_tied_fuse():
    store, params = level(tie=True)
    rng = np.random.default_rng(1)
    x, prev = t64(rng.standard_normal((1, 8, 4, 4))), t64(rng.standard_normal((1, 8, 4, 4)))
    a, b = layer_exchange(x, x, prev, prev, params.fuse_a, params.fuse_b)
    assert np.array_equal(a.data, b.data)


def test_exchange_matches_fuse_oracle():
    store, params = level(seed=2)
    randomize(store, 3)
    rng = np.random.default_rng(4)
    xa, xb, pa, pb = rng.standard_normal((4, 1, 8, 4, 4))
    a, b = layer_exchange(t64(xa), t64(xb), t64(pa), t64(pb), params.fuse_a, params.fuse_b)
    np.testing.assert_allclose(a.data, oracles.fuse(xa, pb, *arrays(params.fuse_a)), atol=1e-12)
    np.testing.assert_allclose(b.data, oracles.fuse(xb, pa, *arrays(params.fuse_b)), atol=1e-12)


def test_exchange_shape_mismatch():
    _, params = level()
    x = t64(np.zeros((1, 8, 4, 4)))
    with pytest.raises(ShapeError):
        layer_exchange(x, x, x, t64(np.zeros((1, 8, 2, 2))), params.fuse_a, params.fuse_b)


# ---------------------------------------------------------------------------
# channel attention


def attention(channels=8, ratio=4, seed=0):
    store = ParamStore(np.float64)
    return store, ChannelAttention(store, "att", channels, ratio, np.random.default_rng(seed))


def test_zero_attention_halves_input():
    store, att = attention()
    for p in store.values():
        p.data[...] = 0.0
    x = t64(np.random.default_rng(5).standard_normal((2, 8, 3, 3)))
    assert np.array_equal(channel_attention(x, att).data, x.data / 2)


def test_gate_lies_in_open_unit_interval():
    store, att = attention(seed=6)
    randomize(store, 7, scale=2.0)
    g = att.gate(t64(np.random.default_rng(8).standard_normal((4, 8, 5, 5)) * 10)).data
    assert np.all(g > 0) and np.all(g < 1)


def test_attention_matches_oracle():
    store, att = attention(seed=9)
    randomize(store, 10)
    x = np.random.default_rng(11).standard_normal((2, 8, 3, 3))
    ref = oracles.channel_attention(x, *arrays(att.fc1), *arrays(att.fc2))
    np.testing.assert_allclose(att(t64(x)).data, ref, atol=1e-12)


def test_attention_rejects_indivisible_channels():
    with pytest.raises(ShapeError, match="squeeze ratio"):
        attention(channels=6, ratio=4)


# ---------------------------------------------------------------------------
# one decoder level


def level_oracle(xa, xb, pa, pb, p: LedLevelParams):
    def refine(block, x):
        body = block.body
        return x + oracles.double_conv(x, *arrays(body.conv1), *arrays(body.conv2))

    def dc(block):
        return arrays(block.conv1) + arrays(block.conv2)

    if pa is not None:
        xa, xb = oracles.fuse(xa, pb, *arrays(p.fuse_a)), oracles.fuse(xb, pa, *arrays(p.fuse_b))
    ra, rb = refine(p.refine_a, xa), refine(p.refine_b, xb)
    fa = ra + oracles.pointwise(rb, *arrays(p.cross_a))
    fb = rb + oracles.pointwise(ra, *arrays(p.cross_b))
    fa = oracles.channel_attention(fa, *arrays(p.att_a.fc1), *arrays(p.att_a.fc2))
    fb = oracles.channel_attention(fb, *arrays(p.att_b.fc1), *arrays(p.att_b.fc2))
    return oracles.csdw_forward(fa, fb, dc(p.csdw.conv_a), dc(p.csdw.conv_b))


def test_level_matches_straight_line_oracle():
    store, params = level(seed=12)
    randomize(store, 13, scale=0.2)
    xa, xb, pa, pb = np.random.default_rng(14).standard_normal((4, 1, 8, 4, 4))
    out_a, out_b, pair = led_level(t64(xa), t64(xb), t64(pa), t64(pb), params)
    ref_a, ref_b = level_oracle(xa, xb, pa, pb, params)
    np.testing.assert_allclose(out_a.data, ref_a, atol=1e-10)
    np.testing.assert_allclose(out_b.data, ref_b, atol=1e-10)
    assert np.array_equal(pair.data, np.concatenate([out_a.data, out_b.data], axis=1))


def test_zero_params_coarsest_level_halves_each_stream():
    store, params = level(has_prev=False)
    for p in store.values():
        p.data[...] = 0.0
    xa, xb = np.random.default_rng(15).standard_normal((2, 1, 8, 4, 4))
    out_a, out_b, _ = led_level(t64(xa), t64(xb), None, None, params)
    # identity refine, zero cross term, gate 1/2, identity CSDW
    assert np.array_equal(out_a.data, xa / 2) and np.array_equal(out_b.data, xb / 2)


def test_zero_params_inner_level_zeroes_the_fused_streams():
    store, params = level()
    for p in store.values():
        p.data[...] = 0.0
    xa, xb, pa, pb = np.random.default_rng(16).standard_normal((4, 1, 8, 4, 4))
    out_a, out_b, _ = led_level(t64(xa), t64(xb), t64(pa), t64(pb), params)
    assert not out_a.data.any() and not out_b.data.any()


def test_level_shapes_and_tied_symmetry():
    _, params = level(tie=True, seed=17)
    x, prev = np.random.default_rng(18).standard_normal((2, 2, 8, 4, 4))
    out_a, out_b, pair = led_level(t64(x), t64(x), t64(prev), t64(prev), params)
    assert out_a.shape == (2, 8, 4, 4) and pair.shape == (2, 16, 4, 4)
    assert np.array_equal(out_a.data, out_b.data)


# ---------------------------------------------------------------------------
# full decode


def test_decode_shapes_on_default_ladder():
    model = ChangeDetector(toy_model_cfg(), seed=0, dtype=np.float64)
    a = np.random.default_rng(19).random((1, 3, 64, 64))
    out = model(a, a)
    assert out.main_logits.shape == (1, 2, 64, 64)
    # the three levels coarser than the finest (stride 8, 16, 32)
    assert [t.shape for t in out.aux_logits] == [(1, 2, 8, 8), (1, 2, 4, 4), (1, 2, 2, 2)]
    assert [s[0].shape[2] for s in out.streams] == [2, 4, 8, 16]


def test_group_norm_refiners_keep_shapes_and_change_outputs():
    a, b = np.random.default_rng(21).random((2, 1, 3, 32, 32))
    plain = ChangeDetector(toy_model_cfg(), seed=0, dtype=np.float64)(a, b)
    normed = ChangeDetector(toy_model_cfg(norm="group"), seed=0, dtype=np.float64)(a, b)
    assert normed.main_logits.shape == plain.main_logits.shape
    assert [t.shape for t in normed.aux_logits] == [t.shape for t in plain.aux_logits]
    assert not np.allclose(normed.main_logits.data, plain.main_logits.data)


def test_decode_is_deterministic():
    a, b = np.random.default_rng(20).random((2, 2, 3, 64, 64))
    m1, m2 = ChangeDetector(toy_model_cfg(), seed=3), ChangeDetector(toy_model_cfg(), seed=3)
    assert m1(a, b).main_logits.data.tobytes() == m2(a, b).main_logits.data.tobytes()
    assert m1(a, b).main_logits.data.tobytes() == m1(a, b).main_logits.data.tobytes()


def test_tied_decoder_on_identical_streams_is_symmetric():
    store = ParamStore(np.float64)
    dec = LayerExchangeDecoder(store, 8, DecoderConfig(tie_streams=True), np.random.default_rng(21))
    rng = np.random.default_rng(22)
    levels = [t64(rng.standard_normal((1, 8, s, s))) for s in (8, 4, 2, 1)]
    out = dec(PyramidPair(levels, list(levels)), out_size=(32, 32))
    for a, b in out.streams:
        assert np.array_equal(a.data, b.data)


def tied_model():
    cfg = ModelConfig(
        encoder=EncoderConfig(widths=(4, 6, 8, 10), blocks=1, csdw_shared=True),
        fpn=FpnConfig(width=8),
        decoder=DecoderConfig(tie_streams=True),
    )
    return ChangeDetector(cfg, seed=4, dtype=np.float64)


def test_tied_model_swaps_streams_with_inputs():
    model = tied_model()
    a, b = np.random.default_rng(23).random((2, 1, 3, 32, 32))
    ab, ba = model(a, b), model(b, a)
    for (xa, xb), (ya, yb) in zip(ab.streams, ba.streams):
        np.testing.assert_allclose(xa.data, yb.data, atol=1e-12)
        np.testing.assert_allclose(xb.data, ya.data, atol=1e-12)


def test_tied_model_on_identical_pair_is_order_free():
    model = tied_model()
    a = np.random.default_rng(24).random((1, 3, 32, 32))
    out = model(a, a.copy())
    for xa, xb in out.streams:
        assert np.array_equal(xa.data, xb.data)
    assert np.array_equal(out.main_logits.data, model(a.copy(), a).main_logits.data)


def test_decoder_grad_check_on_main_logits():
    store = ParamStore(np.float64)
    dec = LayerExchangeDecoder(store, 4, DecoderConfig(squeeze_ratio=2), np.random.default_rng(24))
    rng = np.random.default_rng(25)
    la = [t64(rng.standard_normal((1, 4, s, s))) for s in (8, 4, 2, 1)]
    lb = [t64(rng.standard_normal((1, 4, s, s))) for s in (8, 4, 2, 1)]

    def f():
        return T.tsum(dec(PyramidPair(la, lb), out_size=(32, 32)).main_logits)

    assert relu_margin(f) > 1e-4
    assert grad_check(f, list(store.values()), max_entries=4) < 1e-4


# ---------------------------------------------------------------------------
# loss


def zero_output(n=1, size=64):
    z = lambda s: Tensor(np.zeros((n, 2, s, s)))  # noqa: E731
    return DecodeOutput(z(size), [z(size // 8), z(size // 16), z(size // 32)])


def test_uniform_logits_loss():
    target = np.random.default_rng(26).integers(0, 2, size=(2, 64, 64))
    value = total_loss(zero_output(2), target).item()
    assert abs(value - 1.9 * LN2) < 1e-4
    assert abs(value - 1.316979) < 1e-4


def test_aux_weight_wiring_on_random_logits():
    rng = np.random.default_rng(27)
    out = DecodeOutput(
        Tensor(rng.standard_normal((2, 2, 32, 32)) * 3),
        [Tensor(rng.standard_normal((2, 2, s, s)) * 3) for s in (4, 2, 1)],
    )
    target = rng.integers(0, 2, size=(2, 32, 32))
    main, aux = loss_terms(out, target)
    diff = total_loss(out, target).item() - main.item()
    assert abs(diff - 0.3 * sum(a.item() for a in aux)) < 1e-6
    assert total_loss(out, target, aux_weight=0.0).item() == main.item()
    ref = oracles.cross_entropy(out.main_logits.data, target)
    assert abs(main.item() - ref) < 1e-12


def test_saturated_logits_give_near_zero_loss():
    target = np.random.default_rng(28).integers(0, 2, size=(1, 32, 32))

    def saturated(t):
        return Tensor(np.where(np.arange(2)[None, :, None, None] == t[:, None], 20.0, -20.0))

    aux = [saturated(downsample_nearest(target, (s, s))) for s in (4, 2, 1)]
    assert total_loss(DecodeOutput(saturated(target), aux), target).item() < 1e-2


def test_nearest_downsample_samples_pixel_centres():
    t = np.arange(16).reshape(1, 4, 4) % 2
    np.testing.assert_array_equal(downsample_nearest(t, (2, 2))[0], t[0][np.ix_([1, 3], [1, 3])])
    assert downsample_nearest(np.ones((1, 8, 8), dtype=np.uint8), (2, 2)).dtype == np.uint8


def test_loss_rejects_non_binary_target():
    with pytest.raises(ValueError):
        total_loss(zero_output(1, 32), np.full((1, 32, 32), 2))


def test_one_small_step_decreases_loss():
    failures = 0
    for seed in range(20):
        model = ChangeDetector(toy_model_cfg(), seed=seed, dtype=np.float64)
        rng = np.random.default_rng(100 + seed)
        a, b = rng.random((2, 2, 3, 32, 32))
        target = rng.integers(0, 2, size=(2, 32, 32))
        loss = model.loss(a, b, target)
        model.store.zero_grad()
        loss.backward()
        for p in model.store.values():
            p.data -= 1e-3 * p.grad
        if not model.loss(a, b, target).item() < loss.item():
            failures += 1
    assert failures <= 1
