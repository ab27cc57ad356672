"""Cosine-similarity analysis of a bi-temporal pair.

For each encoder level the per-pixel (channel-wise) similarity map and the
per-channel (spatial) similarity vector are taken from the stage outputs
*before* CSDW weighting.  The whole-image similarity flattens each RGB image
into a single vector.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .csdw import channel_similarity_map, spatial_similarity_vector
from .metrics import save_png
from .tensor import Tensor


@dataclass
class SimilarityReport:
    phi_c: list[np.ndarray]  # per level, (H_k, W_k)
    phi_s: list[np.ndarray]  # per level, (C_k,)
    rgb_cosine: float


def encode_gray(phi: np.ndarray) -> np.ndarray:
    """Map cosine values in [-1, 1] to uint8 grey levels [0, 255]."""
    return np.round((np.clip(phi, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def decode_gray(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 127.5 - 1.0


def rgb_cosine(img_a: np.ndarray, img_b: np.ndarray) -> float:
    a = Tensor(np.asarray(img_a, dtype=np.float64).reshape(1, -1))
    b = Tensor(np.asarray(img_b, dtype=np.float64).reshape(1, -1))
    return float(T.row_cosine(a, b).data[0])


def analyze_similarity(model, img_a: np.ndarray, img_b: np.ndarray, out_dir: str | Path | None = None):
    """Similarity maps for one (3, H, W) pair; optionally written under ``out_dir``.

    Files: ``level{k}_phic.png`` (grey map), ``level{k}_phis.csv`` (one row
    per channel) and ``summary.csv`` (RGB cosine and per-level means).
    """
    with T.no_grad():
        pyr = model.encoder(Tensor(img_a[None].astype(model.dtype)), Tensor(img_b[None].astype(model.dtype)))
        phi_c = [channel_similarity_map(a, b).data[0] for a, b in zip(pyr.pre_a, pyr.pre_b)]
        phi_s = [spatial_similarity_vector(a, b).data[0] for a, b in zip(pyr.pre_a, pyr.pre_b)]
    report = SimilarityReport(phi_c, phi_s, rgb_cosine(img_a, img_b))
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: SimilarityReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, (pc, ps) in enumerate(zip(report.phi_c, report.phi_s), start=1):
        save_png(out / f"level{k}_phic.png", encode_gray(pc))
        with open(out / f"level{k}_phis.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("channel", "phi_s"))
            w.writerows((c, f"{v:.6f}") for c, v in enumerate(ps))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("quantity", "value"))
        w.writerow(("rgb_cosine", f"{report.rgb_cosine:.6f}"))
        for k, (pc, ps) in enumerate(zip(report.phi_c, report.phi_s), start=1):
            w.writerow((f"level{k}_phic_mean", f"{float(pc.mean()):.6f}"))
            w.writerow((f"level{k}_phis_mean", f"{float(ps.mean()):.6f}"))
