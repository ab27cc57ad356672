import numpy as np
import pytest

from changekit import tensor as T
from changekit.config import EncoderConfig, FpnConfig
from changekit.encoder import CrossFpn, PyramidPair, SiameseEncoder, encode_pair, fpn_exchange, fpn_single
from changekit.tensor import ParamStore, ShapeError, Tensor, grad_check

from .gradtools import grad_check_counting_kinks, relu_margin

TOY = EncoderConfig(widths=(4, 6, 8, 10), blocks=1)


def images(n=1, size=64, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((n, 3, size, size)), dtype=dtype), Tensor(rng.random((n, 3, size, size)), dtype=dtype)


def build(cfg=TOY, fpn_cfg=None, seed=0, dtype=np.float64):
    store = ParamStore(dtype)
    rng = np.random.default_rng(seed)
    enc = SiameseEncoder(store, cfg, rng)
    fpn = CrossFpn(store, cfg.widths, fpn_cfg or FpnConfig(width=8), rng) if fpn_cfg is not False else None
    return store, enc, fpn


def test_default_ladder_shapes():
    _, enc, _ = build(EncoderConfig(), fpn_cfg=False, dtype=np.float32)
    pyr = enc(*images(dtype=np.float32))
    for k, (size, ch) in enumerate(zip((16, 8, 4, 2), (32, 64, 128, 256))):
        assert pyr.levels_a[k].shape == pyr.levels_b[k].shape == (1, ch, size, size)


def test_ladder_on_non_square_input():
    _, enc, fpn = build()
    a = Tensor(np.random.default_rng(0).random((2, 3, 32, 96)))
    pyr = fpn(enc(a, a))
    assert [p.shape[2:] for p in pyr.levels_a] == [(8, 24), (4, 12), (2, 6), (1, 3)]


@pytest.mark.parametrize("downsample", ["conv", "patch"])
@pytest.mark.parametrize("norm", ["none", "group"])
def test_downsample_and_norm_options_keep_the_ladder(downsample, norm):
    cfg = EncoderConfig(widths=(4, 6, 8, 10), blocks=1, downsample=downsample, norm=norm)
    store, enc, _ = build(cfg, fpn_cfg=False)
    pyr = enc(*images(size=32))
    assert [p.shape for p in pyr.levels_a] == [(1, 4, 8, 8), (1, 6, 4, 4), (1, 8, 2, 2), (1, 10, 1, 1)]
    stem = [n for n, _ in store.items() if n.startswith("encoder.stage0.down") and n.endswith("weight")]
    assert len(stem) == (2 if downsample == "conv" else 1)


def test_patch_stem_sees_each_pixel_once():
    # a non-overlapping stem: perturbing one pixel moves exactly one stride-4 cell
    cfg = EncoderConfig(widths=(4, 6, 8, 10), blocks=0, downsample="patch", csdw_per_level=False)
    _, enc, _ = build(cfg, fpn_cfg=False)
    a, b = images(size=32)
    bumped = a.data.copy()
    bumped[0, :, 13, 22] += 1.0
    diff = np.abs(enc(Tensor(bumped), b).levels_a[0].data - enc(a, b).levels_a[0].data).sum(axis=1)[0]
    assert set(zip(*np.nonzero(diff))) == {(3, 5)}


def test_unknown_options_are_rejected():
    with pytest.raises(ValueError, match="downsample"):
        EncoderConfig(downsample="pool").validate()
    with pytest.raises(ValueError, match="norm"):
        build(EncoderConfig(widths=(4, 6, 8, 10), blocks=1, norm="batch"), fpn_cfg=False)


def test_indivisible_size_names_the_multiple():
    _, enc, _ = build()
    with pytest.raises(ShapeError, match="multiple of 32"):
        enc(*images(size=48))
    with pytest.raises(ShapeError, match="3-channel"):
        enc(Tensor(np.zeros((1, 4, 32, 32))), Tensor(np.zeros((1, 4, 32, 32))))


def test_siamese_identical_inputs_are_bitwise_equal():
    _, enc, _ = build(EncoderConfig(widths=(8, 16, 24, 32), blocks=2, csdw_shared=True), fpn_cfg=False)
    a, _ = images()
    pyr = enc(a, Tensor(a.data.copy()))
    for la, lb in zip(pyr.levels_a, pyr.levels_b):
        assert la.data.tobytes() == lb.data.tobytes()


def test_identical_inputs_with_untied_csdw_branches():
    _, enc, _ = build(fpn_cfg=False)
    a, _ = images()
    pyr = enc(a, Tensor(a.data.copy()))
    assert pyr.pre_a[0].data.tobytes() == pyr.pre_b[0].data.tobytes()
    # the per-branch CSDW convolutions then separate the streams
    assert not np.array_equal(pyr.levels_a[0].data, pyr.levels_b[0].data)


def test_encoder_weights_are_shared():
    store, enc, _ = build(fpn_cfg=False)
    assert enc.stages_a is enc.stages_b
    assert not any("_b." in name and name.startswith("encoder.stage") for name in store)


def test_without_csdw_is_a_plain_siamese_encoder():
    cfg = EncoderConfig(widths=(4, 6, 8, 10), blocks=1, csdw_per_level=False)
    store, enc, _ = build(cfg, fpn_cfg=False)
    assert not enc.csdw and not any("csdw" in name for name in store)
    a, b = images(seed=1)
    pyr = enc(a, b)
    # each branch is then exactly the stage stack applied to its own image
    x = a
    for k, stage in enumerate(enc.stages_a):
        x = stage(x)
        assert np.array_equal(pyr.levels_a[k].data, x.data)
        assert pyr.weights[k] is None


def test_csdw_outputs_feed_the_next_stage():
    _, enc, _ = build()
    a, b = images(seed=2)
    pyr = enc(a, b)
    nxt = enc.stages_a[1](pyr.levels_a[0])
    assert np.array_equal(nxt.data, pyr.pre_a[1].data)
    assert not np.array_equal(pyr.levels_a[0].data, pyr.pre_a[0].data)


def test_swapping_inputs_swaps_pre_csdw_features():
    _, enc, _ = build()
    a, b = images(seed=3)
    p, q = enc(a, b), enc(b, a)
    # untied CSDW branches: the first stage's features swap exactly and the
    # symmetric weights agree; deeper levels see differently-convolved inputs
    assert np.array_equal(p.pre_a[0].data, q.pre_b[0].data)
    assert np.array_equal(p.pre_b[0].data, q.pre_a[0].data)
    np.testing.assert_allclose(p.weights[0].w.data, q.weights[0].w.data, atol=1e-12)
    assert not np.allclose(p.levels_a[1].data, q.levels_b[1].data)


def test_swapping_inputs_swaps_levels_with_tied_csdw():
    cfg = EncoderConfig(widths=(4, 6, 8, 10), blocks=1, csdw_shared=True)
    _, enc, _ = build(cfg, fpn_cfg=False)
    a, b = images(seed=4)
    p, q = enc(a, b), enc(b, a)
    for k in range(4):
        np.testing.assert_allclose(p.levels_a[k].data, q.levels_b[k].data, atol=1e-12)
        np.testing.assert_allclose(p.levels_b[k].data, q.levels_a[k].data, atol=1e-12)


def test_attention_refiner_runs():
    cfg = EncoderConfig(widths=(4, 8, 12, 16), blocks=1, refiner="attention")
    _, enc, fpn = build(cfg)
    pyr = fpn(enc(*images(size=64)))
    assert pyr.levels_a[0].shape == (1, 8, 16, 16)


def test_fpn_width_and_symmetry():
    _, enc, fpn = build(fpn_cfg=FpnConfig(width=12))
    a, b = images(seed=5)
    levels = enc(a, b).levels_a
    out = fpn(PyramidPair(levels, list(levels)))
    for la, lb in zip(out.levels_a, out.levels_b):
        assert la.shape[1] == 12
        assert np.array_equal(la.data, lb.data)


def test_default_fpn_width_is_128():
    assert FpnConfig().width == 128


def test_no_exchange_equals_single_input_fpn():
    _, enc, fpn = build(fpn_cfg=FpnConfig(width=8, exchange=False, shared=False))
    pyr = enc(*images(seed=6))
    out = fpn_exchange(pyr, fpn)
    ref_a = fpn_single(pyr.levels_a, fpn.lateral_a, fpn.output_a)
    ref_b = fpn_single(pyr.levels_b, fpn.lateral_b, fpn.output_b)
    for k in range(4):
        assert np.array_equal(out.levels_a[k].data, ref_a[k].data)
        assert np.array_equal(out.levels_b[k].data, ref_b[k].data)


def test_exchange_changes_exchanged_levels_only():
    _, enc, fpn = build(fpn_cfg=FpnConfig(width=8, exchange_levels=(2,)))
    pyr = enc(*images(seed=7))
    out = fpn(pyr)
    plain = fpn_single(pyr.levels_a, fpn.lateral_a, fpn.output_a)
    assert np.array_equal(out.levels_a[3].data, plain[3].data)
    assert not np.allclose(out.levels_a[2].data, plain[2].data)
    # level 2 of A takes B's coarser map: lateral_A(level2) + up(lateral_B(level3))
    expect = fpn.output_a[2](fpn.lateral_a[2](pyr.levels_a[2]) + T.upsample_bilinear(fpn.lateral_b[3](pyr.levels_b[3]), 2))
    np.testing.assert_allclose(out.levels_a[2].data, expect.data, atol=1e-12)


def test_fpn_swap_property_with_shared_params():
    _, enc, fpn = build(EncoderConfig(widths=(4, 6, 8, 10), blocks=1, csdw_shared=True))
    a, b = images(seed=8)
    p, q = fpn(enc(a, b)), fpn(enc(b, a))
    for k in range(4):
        np.testing.assert_allclose(p.levels_a[k].data, q.levels_b[k].data, atol=1e-12)


def test_pyramid_pair_rejects_mismatched_levels():
    with pytest.raises(ShapeError):
        PyramidPair([Tensor(np.zeros((1, 2, 2, 2)))], [Tensor(np.zeros((1, 3, 2, 2)))])


def test_grad_check_through_encoder_and_fpn():
    store, enc, fpn = build(EncoderConfig(widths=(3, 4, 5, 6), blocks=1), fpn_cfg=FpnConfig(width=4))
    a, b = images(size=32, seed=10)
    r = [np.random.default_rng(10 + k).standard_normal((2, 1, 4, 8 >> k, 8 >> k)) for k in range(4)]

    def loss():
        out = fpn(encode_pair(a, b, enc))
        total = None
        for k in range(4):
            term = T.tsum(out.levels_a[k] * Tensor(r[k][0])) + T.tsum(out.levels_b[k] * Tensor(r[k][1]))
            total = term if total is None else total + term
        return total

    assert relu_margin(loss) > 1e-4
    assert grad_check(loss, list(store.values()), max_entries=3) < 1e-4


def test_grad_check_through_conv_stem_with_group_norm():
    cfg = EncoderConfig(widths=(3, 4, 5, 6), blocks=1, downsample="conv", norm="group")
    store, enc, fpn = build(cfg, fpn_cfg=FpnConfig(width=4))
    a, b = images(size=32, seed=10)
    r = [np.random.default_rng(20 + k).standard_normal((2, 1, 4, 8 >> k, 8 >> k)) for k in range(4)]

    def loss():
        out = fpn(encode_pair(a, b, enc))
        return sum(
            (T.tsum(out.levels_a[k] * Tensor(r[k][0])) + T.tsum(out.levels_b[k] * Tensor(r[k][1])) for k in range(1, 4)),
            T.tsum(out.levels_a[0] * Tensor(r[0][0])) + T.tsum(out.levels_b[0] * Tensor(r[0][1])),
        )

    # the full-resolution stem has many near-zero pre-activations, so use a
    # step small enough that no checked entry crosses a kink
    err, crossings = grad_check_counting_kinks(loss, list(store.values()), step=1e-6, max_entries=3)
    assert crossings == 0
    assert err < 1e-6
