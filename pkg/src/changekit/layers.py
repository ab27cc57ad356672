"""Parameterised building blocks shared by the encoder, FPN and decoders."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor


class Conv:
    """Square-kernel convolution whose weight and bias live in a ParamStore."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        cin: int,
        cout: int,
        k: int = 3,
        stride: int = 1,
        padding: int | None = None,
        rng: np.random.Generator | None = None,
        gain: float = 1.0,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        std = gain / np.sqrt(cin * k * k)
        self.weight = store.add(f"{name}.weight", rng.standard_normal((cout, cin, k, k)) * std)
        self.bias = store.add(f"{name}.bias", np.zeros(cout))

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DoubleConv:
    """3x3 conv -> [group norm] -> ReLU -> 3x3 conv, channel preserving.

    ``norm`` is ``"none"`` (default) or ``"group"``.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        channels: int,
        rng: np.random.Generator,
        gain: float = 0.5,
        norm: str = "none",
    ):
        if norm not in ("none", "group"):
            raise ValueError(f"unknown norm {norm!r} (expected 'none' or 'group')")
        self.norm = norm
        self.groups = _group_count(channels)
        self.conv1 = Conv(store, f"{name}.conv1", channels, channels, 3, rng=rng, gain=np.sqrt(2.0))
        self.conv2 = Conv(store, f"{name}.conv2", channels, channels, 3, rng=rng, gain=gain)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(x)
        if self.norm == "group":
            h = T.group_norm(h, self.groups)
        return self.conv2(T.relu(h))


def _group_count(channels: int, target: int = 4) -> int:
    for g in range(min(target, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class ResidualBlock:
    """x + DoubleConv(x)."""

    def __init__(self, store: ParamStore, name: str, channels: int, rng: np.random.Generator, norm: str = "none"):
        self.body = DoubleConv(store, name, channels, rng, norm=norm)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.body(x)


class WindowAttentionBlock:
    """Single-head self-attention inside non-overlapping windows, then a pointwise MLP.

    Both sub-layers are residual.  Windows shrink to the feature-map size when
    the map is smaller than ``window``.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        channels: int,
        rng: np.random.Generator,
        window: int = 4,
        mlp_ratio: int = 2,
    ):
        self.window = window
        self.channels = channels
        self.qkv = Conv(store, f"{name}.qkv", channels, 3 * channels, 1, rng=rng, gain=0.5)
        self.proj = Conv(store, f"{name}.proj", channels, channels, 1, rng=rng, gain=0.5)
        self.fc1 = Conv(store, f"{name}.fc1", channels, mlp_ratio * channels, 1, rng=rng, gain=np.sqrt(2.0))
        self.fc2 = Conv(store, f"{name}.fc2", mlp_ratio * channels, channels, 1, rng=rng, gain=0.5)

    def _windows(self, x: Tensor, ws: int) -> Tensor:
        n, c, h, w = x.shape
        x = x.reshape(n, c, h // ws, ws, w // ws, ws)
        x = x.permute(0, 2, 4, 3, 5, 1)  # n, hb, wb, ws, ws, c
        return x.reshape(-1, ws * ws, c)

    def _merge(self, x: Tensor, shape, ws: int) -> Tensor:
        n, c, h, w = shape
        x = x.reshape(n, h // ws, w // ws, ws, ws, c)
        x = x.permute(0, 5, 1, 3, 2, 4)
        return x.reshape(n, c, h, w)

    def attend(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        ws = min(self.window, h, w)
        if h % ws or w % ws:
            raise T.ShapeError(f"feature map {h}x{w} is not divisible into {ws}x{ws} windows")
        qkv = self.qkv(x)
        q, k, v = (self._windows(T.channel_slice(qkv, i * c, (i + 1) * c), ws) for i in range(3))
        scores = T.matmul(q, T.permute(k, (0, 2, 1))) * (1.0 / np.sqrt(c))
        attn = T.softmax(scores, axis=-1)
        out = self._merge(T.matmul(attn, v), x.shape, ws)
        return self.proj(out)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attend(x)
        return x + self.fc2(T.relu(self.fc1(x)))


def make_refiner(kind: str, store: ParamStore, name: str, channels: int, rng: np.random.Generator, norm: str = "none"):
    if kind == "conv":
        return ResidualBlock(store, name, channels, rng, norm=norm)
    if kind in ("attention", "windowed-attention"):
        return WindowAttentionBlock(store, name, channels, rng)
    raise ValueError(f"unknown refinement block kind {kind!r} (expected 'conv' or 'attention')")
