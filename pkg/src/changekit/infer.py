"""Sliding-window inference over image pairs larger than the training patch."""

from __future__ import annotations

import numpy as np


def tile_starts(length: int, patch: int, stride: int) -> list[int]:
    """Window offsets along one axis; the last window is aligned to the far edge."""
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def slide_proba(
    model,
    img_a: np.ndarray,
    img_b: np.ndarray,
    patch: int,
    stride: int | None = None,
    batch: int = 8,
    pad: bool = False,
) -> np.ndarray:
    """Per-pixel class probabilities (2, H, W) averaged over overlapping tiles.

    ``model`` needs ``predict_proba(a, b) -> (N, 2, h, w)`` on batches of
    (N, 3, h, w) arrays.
    """
    stride = patch // 2 if stride is None else stride
    if patch % 32:
        raise ValueError(f"patch size {patch} must be a multiple of 32")
    if not 1 <= stride <= patch:
        raise ValueError(f"stride must lie in [1, patch], got {stride}")
    if img_a.shape != img_b.shape or img_a.ndim != 3:
        raise ValueError(f"expected two (3, H, W) images of equal shape, got {img_a.shape} and {img_b.shape}")
    _, h, w = img_a.shape
    if h < patch or w < patch:
        if not pad:
            raise ValueError(
                f"image {h}x{w} is smaller than the {patch}px patch; pass pad=True to reflect-pad it"
            )
        ph, pw = max(patch - h, 0), max(patch - w, 0)
        widths = ((0, 0), (0, ph), (0, pw))
        mode = "reflect" if ph < h and pw < w else "edge"
        full = slide_proba(
            model, np.pad(img_a, widths, mode=mode), np.pad(img_b, widths, mode=mode), patch, stride, batch
        )
        return full[:, :h, :w]

    windows = [(y, x) for y in tile_starts(h, patch, stride) for x in tile_starts(w, patch, stride)]
    acc = np.zeros((2, h, w), dtype=np.float64)
    hits = np.zeros((h, w), dtype=np.float64)
    for i in range(0, len(windows), batch):
        chunk = windows[i : i + batch]
        ta = np.stack([img_a[:, y : y + patch, x : x + patch] for y, x in chunk])
        tb = np.stack([img_b[:, y : y + patch, x : x + patch] for y, x in chunk])
        probs = model.predict_proba(ta, tb)
        for (y, x), p in zip(chunk, probs):
            acc[:, y : y + patch, x : x + patch] += p
            hits[y : y + patch, x : x + patch] += 1
    if len(windows) == 1:
        return probs[0]
    return acc / hits


def slide_infer(model, img_a, img_b, patch: int, stride: int | None = None, batch: int = 8, pad: bool = False):
    """Binary change mask (H, W) from averaged tile probabilities."""
    probs = slide_proba(model, img_a, img_b, patch, stride, batch, pad)
    return probs.argmax(axis=0).astype(np.uint8)
