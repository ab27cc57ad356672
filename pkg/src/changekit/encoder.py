"""Siamese hierarchical encoder and the cross-temporal feature pyramid.

The encoder is a small stand-in for a pretrained transformer backbone: four
stages at strides 4, 8, 16 and 32, each a strided downsampling convolution
followed by refinement blocks.  After every stage the two temporal feature
maps can pass through a CSDW block whose outputs feed the next stage.

The FPN maps every level to a common width and runs a top-down pathway per
branch.  At the exchange levels a branch takes its top-down input from the
*other* branch's coarser map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import EncoderConfig, FpnConfig
from .csdw import Csdw, CsdwWeights
from .layers import Conv, make_refiner
from .tensor import ParamStore, ShapeError, Tensor

STRIDES = (4, 8, 16, 32)


@dataclass
class PyramidPair:
    levels_a: list[Tensor]
    levels_b: list[Tensor]
    # stage outputs before CSDW weighting, and the weights, per level
    pre_a: list[Tensor] = field(default_factory=list)
    pre_b: list[Tensor] = field(default_factory=list)
    weights: list[CsdwWeights | None] = field(default_factory=list)

    def __post_init__(self):
        if len(self.levels_a) != len(self.levels_b):
            raise ShapeError("pyramid branches have different depths")
        for k, (a, b) in enumerate(zip(self.levels_a, self.levels_b)):
            if a.shape != b.shape:
                raise ShapeError(f"level {k}: branch shapes differ, {a.shape} vs {b.shape}")

    def swapped(self) -> "PyramidPair":
        return PyramidPair(self.levels_b, self.levels_a, self.pre_b, self.pre_a, self.weights)


class Stage:
    """Downsample by ``stride`` then refine.

    ``downsample="conv"`` halves the resolution with overlapping 3x3 stride-2
    convolutions (two of them, ReLU between, for the stride-4 stem), which
    keeps sub-cell edge positions recoverable.  ``"patch"`` uses a single
    non-overlapping ``stride x stride`` convolution.
    """

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, stride: int, cfg: EncoderConfig, rng):
        if cfg.downsample == "patch":
            self.down = [Conv(store, f"{name}.down", cin, cout, k=stride, stride=stride, padding=0, rng=rng)]
        else:
            halvings = int(np.log2(stride))
            chans = [cin] + [cout] * halvings
            self.down = [
                Conv(store, f"{name}.down{i}", chans[i], chans[i + 1], 3, stride=2, rng=rng,
                     gain=np.sqrt(2.0) if i < halvings - 1 else 1.0)
                for i in range(halvings)
            ]
        self.blocks = [make_refiner(cfg.refiner, store, f"{name}.block{i}", cout, rng, cfg.norm) for i in range(cfg.blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.down):
            x = conv(x) if i == 0 else conv(T.relu(x))
        for block in self.blocks:
            x = block(x)
        return x


class SiameseEncoder:
    def __init__(self, store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator, name: str = "encoder"):
        cfg.validate()
        self.cfg = cfg
        cins = (3,) + tuple(cfg.widths[:-1])
        steps = (4, 2, 2, 2)
        self.stages_a = [
            Stage(store, f"{name}.stage{k}", cins[k], cfg.widths[k], steps[k], cfg, rng) for k in range(4)
        ]
        if cfg.shared_siamese:
            self.stages_b = self.stages_a
        else:
            self.stages_b = [
                Stage(store, f"{name}.stage{k}_b", cins[k], cfg.widths[k], steps[k], cfg, rng) for k in range(4)
            ]
        self.csdw: dict[int, Csdw] = {}
        if cfg.csdw_per_level:
            for k in cfg.csdw_levels:
                self.csdw[k] = Csdw(
                    store, f"{name}.csdw{k}", cfg.widths[k], rng, shared=cfg.csdw_shared, norm=cfg.csdw_norm
                )

    def __call__(self, img_a: Tensor, img_b: Tensor) -> PyramidPair:
        return encode_pair(img_a, img_b, self)


def encode_pair(img_a: Tensor, img_b: Tensor, encoder: SiameseEncoder) -> PyramidPair:
    img_a, img_b = _as_image(img_a), _as_image(img_b)
    if img_a.shape != img_b.shape:
        raise ShapeError(f"temporal images differ in shape: {img_a.shape} vs {img_b.shape}")
    n, c, h, w = img_a.shape
    if c != 3:
        raise ShapeError(f"expected 3-channel images, got {c} channels")
    if h % 32 or w % 32:
        raise ShapeError(f"image size {h}x{w} must be a multiple of 32")

    out = PyramidPair([], [])
    xa, xb = img_a, img_b
    for k in range(4):
        xa = encoder.stages_a[k](xa)
        xb = encoder.stages_b[k](xb)
        out.pre_a.append(xa)
        out.pre_b.append(xb)
        weights = None
        if k in encoder.csdw:
            xa, xb, weights = encoder.csdw[k](xa, xb)
        out.weights.append(weights)
        out.levels_a.append(xa)
        out.levels_b.append(xb)
    return out


def _as_image(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class CrossFpn:
    """Lateral 1x1 convs, per-branch top-down sums, 3x3 output convs."""

    def __init__(
        self,
        store: ParamStore,
        in_widths: tuple[int, ...],
        cfg: FpnConfig,
        rng: np.random.Generator,
        name: str = "fpn",
    ):
        self.cfg = cfg
        d = cfg.width
        self.lateral_a = [Conv(store, f"{name}.lateral{k}", cw, d, 1, rng=rng) for k, cw in enumerate(in_widths)]
        self.output_a = [Conv(store, f"{name}.output{k}", d, d, 3, rng=rng) for k in range(len(in_widths))]
        if cfg.shared:
            self.lateral_b, self.output_b = self.lateral_a, self.output_a
        else:
            self.lateral_b = [
                Conv(store, f"{name}.lateral{k}_b", cw, d, 1, rng=rng) for k, cw in enumerate(in_widths)
            ]
            self.output_b = [Conv(store, f"{name}.output{k}_b", d, d, 3, rng=rng) for k in range(len(in_widths))]

    def exchanges_at(self, level: int) -> bool:
        return self.cfg.exchange and level in self.cfg.exchange_levels

    def __call__(self, pyr: PyramidPair) -> PyramidPair:
        return fpn_exchange(pyr, self)


def fpn_single(levels: list[Tensor], lateral: list[Conv], output: list[Conv]) -> list[Tensor]:
    """Plain single-input FPN; the reference for the no-exchange configuration."""
    lat = [lateral[k](x) for k, x in enumerate(levels)]
    top = len(lat) - 1
    merged = [None] * len(lat)
    merged[top] = lat[top]
    for k in range(top - 1, -1, -1):
        merged[k] = lat[k] + T.upsample_bilinear(merged[k + 1], 2)
    return [output[k](m) for k, m in enumerate(merged)]


def fpn_exchange(pyr: PyramidPair, fpn: CrossFpn) -> PyramidPair:
    lat_a = [fpn.lateral_a[k](x) for k, x in enumerate(pyr.levels_a)]
    lat_b = [fpn.lateral_b[k](x) for k, x in enumerate(pyr.levels_b)]
    top = len(lat_a) - 1
    ma, mb = [None] * len(lat_a), [None] * len(lat_b)
    ma[top], mb[top] = lat_a[top], lat_b[top]
    for k in range(top - 1, -1, -1):
        src_a, src_b = (mb[k + 1], ma[k + 1]) if fpn.exchanges_at(k) else (ma[k + 1], mb[k + 1])
        ma[k] = lat_a[k] + T.upsample_bilinear(src_a, 2)
        mb[k] = lat_b[k] + T.upsample_bilinear(src_b, 2)
    return PyramidPair(
        [fpn.output_a[k](m) for k, m in enumerate(ma)],
        [fpn.output_b[k](m) for k, m in enumerate(mb)],
    )
