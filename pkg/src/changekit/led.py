"""Layer-exchange decoding of a bi-temporal pyramid, plus the loss.

Each decoder level, coarsest first, runs:

1. layer exchange: stream A is fused with stream B's upsampled previous
   output and vice versa (concat -> 1x1 conv);
2. a refinement block per stream;
3. residual exchange fusion: ``out_i = r_i + cross_i(r_other)``;
4. squeeze-excite channel attention per stream;
5. a CSDW block on the pair.

The channel concat of the two streams is supervised by a 1x1 head: auxiliary
heads at the coarser levels, the main head at the finest level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import DecoderConfig
from .csdw import Csdw
from .encoder import PyramidPair
from .layers import Conv, make_refiner
from .tensor import ParamStore, ShapeError, Tensor


@dataclass
class DecodeOutput:
    main_logits: Tensor  # (N, 2, H, W) at input resolution
    aux_logits: list[Tensor]  # finest supervised level first
    streams: list[tuple[Tensor, Tensor]] = field(default_factory=list)  # per level, coarsest first


class ChannelAttention:
    """g = sigmoid(W2 relu(W1 gap(x))); returns g * x."""

    def __init__(self, store: ParamStore, name: str, channels: int, ratio: int, rng: np.random.Generator):
        if channels % ratio:
            raise ShapeError(f"{channels} channels are not divisible by squeeze ratio {ratio}")
        self.fc1 = Conv(store, f"{name}.fc1", channels, channels // ratio, 1, rng=rng, gain=np.sqrt(2.0))
        self.fc2 = Conv(store, f"{name}.fc2", channels // ratio, channels, 1, rng=rng)

    def gate(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.fc2(T.relu(self.fc1(T.global_avg_pool(x)))))

    def __call__(self, x: Tensor) -> Tensor:
        return channel_attention(x, self)


def channel_attention(x: Tensor, params: ChannelAttention) -> Tensor:
    return params.gate(x) * x


def layer_exchange(x_a: Tensor, x_b: Tensor, prev_a: Tensor | None, prev_b: Tensor | None, fuse_a, fuse_b):
    """Cross-wire each stream with the other stream's previous-level output."""
    if prev_a is None or prev_b is None:
        return x_a, x_b
    shapes = {x_a.shape, x_b.shape, prev_a.shape, prev_b.shape}
    if len(shapes) != 1:
        raise ShapeError(f"layer exchange needs four equal shapes, got {sorted(shapes)}")
    return fuse_a(T.concat_channels(x_a, prev_b)), fuse_b(T.concat_channels(x_b, prev_a))


class LedLevelParams:
    def __init__(
        self,
        store: ParamStore,
        name: str,
        width: int,
        cfg: DecoderConfig,
        rng: np.random.Generator,
        has_prev: bool,
    ):
        tie = cfg.tie_streams

        def pair(make, suffix):
            a = make(f"{name}.{suffix}_a")
            return (a, a) if tie else (a, make(f"{name}.{suffix}_b"))

        self.fuse_a = self.fuse_b = None
        if has_prev:
            self.fuse_a, self.fuse_b = pair(lambda n: Conv(store, n, 2 * width, width, 1, rng=rng), "fuse")
        self.refine_a, self.refine_b = pair(lambda n: make_refiner(cfg.refiner, store, n, width, rng, cfg.norm), "refine")
        self.cross_a, self.cross_b = pair(lambda n: Conv(store, n, width, width, 1, rng=rng, gain=0.5), "cross")
        self.att_a, self.att_b = pair(lambda n: ChannelAttention(store, n, width, cfg.squeeze_ratio, rng), "att")
        self.csdw = Csdw(store, f"{name}.csdw", width, rng, shared=tie, norm=cfg.csdw_norm)


def led_level(x_a, x_b, prev_a, prev_b, params: LedLevelParams):
    """One decoder level; returns (out_a, out_b, concat(out_a, out_b))."""
    xa, xb = layer_exchange(x_a, x_b, prev_a, prev_b, params.fuse_a, params.fuse_b)
    ra, rb = params.refine_a(xa), params.refine_b(xb)
    fa = ra + params.cross_a(rb)
    fb = rb + params.cross_b(ra)
    fa, fb = params.att_a(fa), params.att_b(fb)
    out_a, out_b, _ = params.csdw(fa, fb)
    return out_a, out_b, T.concat_channels(out_a, out_b)


class LayerExchangeDecoder:
    def __init__(self, store: ParamStore, width: int, cfg: DecoderConfig, rng: np.random.Generator, name="led"):
        self.cfg = cfg
        self.levels = [
            LedLevelParams(store, f"{name}.level{k}", width, cfg, rng, has_prev=k < 3) for k in range(4)
        ]
        self.aux_heads = {k: Conv(store, f"{name}.aux_head{k}", 2 * width, 2, 1, rng=rng, gain=0.1) for k in cfg.aux_levels}
        self.main_head = Conv(store, f"{name}.main_head", 2 * width, 2, 1, rng=rng, gain=0.1)

    def __call__(self, pyr: PyramidPair, out_size=None) -> DecodeOutput:
        return decode(pyr, self, out_size)


def decode(pyr: PyramidPair, params: LayerExchangeDecoder, out_size: tuple[int, int] | None = None) -> DecodeOutput:
    if len(pyr.levels_a) != 4:
        raise ShapeError(f"decoder expects a 4-level pyramid, got {len(pyr.levels_a)}")
    prev_a = prev_b = None
    aux, streams = {}, []
    pair = None
    for k in range(3, -1, -1):
        if prev_a is not None:
            prev_a, prev_b = T.upsample_bilinear(prev_a, 2), T.upsample_bilinear(prev_b, 2)
        out_a, out_b, pair = led_level(pyr.levels_a[k], pyr.levels_b[k], prev_a, prev_b, params.levels[k])
        streams.append((out_a, out_b))
        if k in params.aux_heads:
            aux[k] = params.aux_heads[k](pair)
        prev_a, prev_b = out_a, out_b
    return DecodeOutput(_main(params.main_head, pair, out_size), [aux[k] for k in sorted(aux)], streams)


def _main(head: Conv, finest: Tensor, out_size) -> Tensor:
    logits = head(finest)
    h, w = finest.shape[2:]
    size = out_size if out_size is not None else (4 * h, 4 * w)
    return T.upsample_bilinear(logits, size=tuple(size))


class UpsampleDecoder:
    """Baseline: merge the streams per level and upsample layer by layer, no exchange."""

    def __init__(self, store: ParamStore, width: int, cfg: DecoderConfig, rng: np.random.Generator, name="dec"):
        self.cfg = cfg
        self.merge = [Conv(store, f"{name}.merge{k}", 2 * width, width, 1, rng=rng) for k in range(4)]
        self.refine = [make_refiner(cfg.refiner, store, f"{name}.refine{k}", width, rng, cfg.norm) for k in range(4)]
        self.aux_heads = {k: Conv(store, f"{name}.aux_head{k}", width, 2, 1, rng=rng, gain=0.1) for k in cfg.aux_levels}
        self.main_head = Conv(store, f"{name}.main_head", width, 2, 1, rng=rng, gain=0.1)

    def __call__(self, pyr: PyramidPair, out_size=None) -> DecodeOutput:
        prev = None
        aux = {}
        for k in range(3, -1, -1):
            f = self.merge[k](T.concat_channels(pyr.levels_a[k], pyr.levels_b[k]))
            if prev is not None:
                f = f + T.upsample_bilinear(prev, 2)
            f = self.refine[k](f)
            if k in self.aux_heads:
                aux[k] = self.aux_heads[k](f)
            prev = f
        return DecodeOutput(_main(self.main_head, prev, out_size), [aux[k] for k in sorted(aux)])


# ---------------------------------------------------------------------------
# loss


def downsample_nearest(target: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of (N, H, W) labels, sampling pixel centres."""
    n, h, w = target.shape
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(int), w - 1)
    return target[:, rows][:, :, cols]


def loss_terms(out: DecodeOutput, target: np.ndarray) -> tuple[Tensor, list[Tensor]]:
    target = T.check_binary_target(target)
    main = T.cross_entropy(out.main_logits, target)
    aux = [T.cross_entropy(a, downsample_nearest(target, a.shape[2:])) for a in out.aux_logits]
    return main, aux


def total_loss(out: DecodeOutput, target: np.ndarray, aux_weight: float = 0.3) -> Tensor:
    """CE(main) + aux_weight * sum of CE over the auxiliary heads."""
    main, aux = loss_terms(out, target)
    loss = main
    for a in aux:
        loss = loss + a * aux_weight
    return loss
