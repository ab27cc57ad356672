"""Full change-detection network: Siamese encoder -> cross FPN -> decoder."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import CrossFpn, PyramidPair, SiameseEncoder
from .led import DecodeOutput, LayerExchangeDecoder, UpsampleDecoder, total_loss
from .tensor import ParamStore, Tensor


class ChangeDetector:
    """Parameters are created deterministically from ``seed``.

    ``csdw_enabled`` switches the encoder's per-level CSDW blocks;
    ``led_enabled`` selects the layer-exchange decoder over the plain
    upsampling baseline.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        cfg = cfg if cfg is not None else ModelConfig()
        enc_cfg = dataclasses.replace(cfg.encoder, csdw_per_level=cfg.encoder.csdw_per_level and cfg.csdw_enabled)
        self.cfg = cfg
        self.seed = seed
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        self.encoder = SiameseEncoder(self.store, enc_cfg, rng)
        self.fpn = CrossFpn(self.store, enc_cfg.widths, cfg.fpn, rng)
        dec_cls = LayerExchangeDecoder if cfg.led_enabled else UpsampleDecoder
        self.decoder = dec_cls(self.store, cfg.fpn.width, cfg.decoder, rng)

    @property
    def dtype(self):
        return self.store.dtype

    def to(self, dtype) -> "ChangeDetector":
        self.store.astype(dtype)
        return self

    def pyramid(self, img_a, img_b) -> PyramidPair:
        a = img_a if isinstance(img_a, Tensor) else Tensor(np.asarray(img_a, dtype=self.dtype))
        b = img_b if isinstance(img_b, Tensor) else Tensor(np.asarray(img_b, dtype=self.dtype))
        return self.fpn(self.encoder(a, b))

    def __call__(self, img_a, img_b) -> DecodeOutput:
        img_a = np.asarray(img_a.data if isinstance(img_a, Tensor) else img_a, dtype=self.dtype)
        out_size = img_a.shape[2:]
        return self.decoder(self.pyramid(img_a, img_b), out_size=out_size)

    def loss(self, img_a, img_b, target: np.ndarray) -> Tensor:
        return total_loss(self(img_a, img_b), target, self.cfg.decoder.aux_weight)

    def predict_proba(self, img_a: np.ndarray, img_b: np.ndarray) -> np.ndarray:
        """Softmax change probabilities (N, 2, H, W) without recording a graph."""
        with T.no_grad():
            logits = self(img_a, img_b).main_logits.data
        return T._softmax(logits, axis=1)

    def predict(self, img_a: np.ndarray, img_b: np.ndarray) -> np.ndarray:
        return self.predict_proba(img_a, img_b).argmax(axis=1).astype(np.uint8)
