"""Channel-spatial difference weighting between two temporal feature maps.

Two cosine similarities are measured between the feature maps ``f_a`` and
``f_b`` of shape (N, C, H, W):

* per pixel, between the two C-dim channel vectors  -> ``phi_c`` (N, H, W)
* per channel, between the two H*W-dim spatial maps -> ``phi_s`` (N, C)

Each similarity becomes a weight ``1 - sigmoid(phi)``, so agreeing features
are damped and disagreeing ones kept.  The product of both weights scales
each stream before a residual convolution block::

    out_i = conv_i(w * f_i) + f_i
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import DoubleConv
from .tensor import ParamStore, ShapeError, Tensor


@dataclass
class CsdwWeights:
    phi_c: Tensor  # (N, H, W)
    phi_s: Tensor  # (N, C)
    w_c: Tensor  # (N, 1, H, W)
    w_s: Tensor  # (N, C, 1, 1)
    w: Tensor  # (N, C, H, W)


def _check_pair(f_a: Tensor, f_b: Tensor) -> tuple[int, int, int, int]:
    if f_a.shape != f_b.shape or f_a.ndim != 4:
        raise ShapeError(f"bi-temporal features must share an (N, C, H, W) shape, got {f_a.shape} and {f_b.shape}")
    return f_a.shape


def channel_similarity_map(f_a: Tensor, f_b: Tensor, eps: float = T.COSINE_EPS) -> Tensor:
    """Cosine between the channel vectors at each pixel, shape (N, H, W)."""
    n, c, h, w = _check_pair(f_a, f_b)
    rows_a = T.permute_reshape(f_a, (0, 2, 3, 1), (-1, c))
    rows_b = T.permute_reshape(f_b, (0, 2, 3, 1), (-1, c))
    return T.row_cosine(rows_a, rows_b, eps).reshape(n, h, w)


def spatial_similarity_vector(f_a: Tensor, f_b: Tensor, eps: float = T.COSINE_EPS) -> Tensor:
    """Cosine between the flattened spatial maps of each channel, shape (N, C)."""
    n, c, h, w = _check_pair(f_a, f_b)
    rows_a = f_a.reshape(n * c, h * w)
    rows_b = f_b.reshape(n * c, h * w)
    return T.row_cosine(rows_a, rows_b, eps).reshape(n, c)


def change_weight(f_a: Tensor, f_b: Tensor, eps: float = T.COSINE_EPS) -> CsdwWeights:
    n, c, h, w = _check_pair(f_a, f_b)
    phi_c = channel_similarity_map(f_a, f_b, eps)
    phi_s = spatial_similarity_vector(f_a, f_b, eps)
    w_c = 1.0 - T.sigmoid(phi_c.reshape(n, 1, h, w))
    w_s = 1.0 - T.sigmoid(phi_s.reshape(n, c, 1, 1))
    return CsdwWeights(phi_c=phi_c, phi_s=phi_s, w_c=w_c, w_s=w_s, w=w_c * w_s)


class CsdwParams:
    """One convolution block per temporal branch (or a single tied block).

    Both blocks preserve channels and spatial size, which keeps the residual
    add shape-valid.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        channels: int,
        rng: np.random.Generator,
        shared: bool = False,
        norm: str = "none",
    ):
        self.channels = channels
        self.shared = shared
        self.conv_a = DoubleConv(store, f"{name}.conv_a", channels, rng, norm=norm)
        self.conv_b = self.conv_a if shared else DoubleConv(store, f"{name}.conv_b", channels, rng, norm=norm)


def csdw_forward(f_a: Tensor, f_b: Tensor, params: CsdwParams) -> tuple[Tensor, Tensor, CsdwWeights]:
    if f_a.shape[1] != params.channels:
        raise ShapeError(f"CSDW block built for {params.channels} channels, got features {f_a.shape}")
    weights = change_weight(f_a, f_b)
    out_a = params.conv_a(weights.w * f_a) + f_a
    out_b = params.conv_b(weights.w * f_b) + f_b
    return out_a, out_b, weights


class Csdw(CsdwParams):
    """Callable wrapper: ``Csdw(...)(f_a, f_b)`` runs :func:`csdw_forward`."""

    def __call__(self, f_a: Tensor, f_b: Tensor):
        return csdw_forward(f_a, f_b, self)
