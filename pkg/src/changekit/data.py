"""Synthetic bi-temporal pairs, augmentation and the on-disk dataset layout.

On disk a split is three folders of PNGs sharing file stems::

    A/<id>.png      image at time 1 (RGB)
    B/<id>.png      image at time 2 (RGB)
    label/<id>.png  0 = unchanged, 255 = change

Images are held in memory as float32 (3, H, W) arrays in [0, 1] and masks as
uint8 (H, W) arrays in {0, 1}.  Generated images are quantised to 8 bits so
a save/load round trip is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .tensor import bilinear_matrix


@dataclass
class SamplePair:
    img_a: np.ndarray
    img_b: np.ndarray
    mask: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.img_a.shape != self.img_b.shape or self.img_a.ndim != 3 or self.img_a.shape[0] != 3:
            raise ValueError(f"images must share a (3, H, W) shape, got {self.img_a.shape} and {self.img_b.shape}")
        if self.mask.shape != self.img_a.shape[1:]:
            raise ValueError(f"mask shape {self.mask.shape} does not match images {self.img_a.shape}")
        if self.mask.size and not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be binary (0/1)")


def stack(samples: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays (N,3,H,W), (N,3,H,W), (N,H,W)."""
    a = np.stack([s.img_a for s in samples]).astype(np.float32)
    b = np.stack([s.img_b for s in samples]).astype(np.float32)
    m = np.stack([s.mask for s in samples]).astype(np.int64)
    return a, b, m


# ---------------------------------------------------------------------------
# generation


def _quantise(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255) / 255).astype(np.float32)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = max(size // 8, 2)
    low = rng.random((3, coarse, coarse))
    up = bilinear_matrix(coarse, size)
    smooth = up @ low @ up.T
    base = rng.uniform(0.2, 0.6, size=(3, 1, 1))
    return base + 0.35 * (smooth - 0.5) + rng.normal(0.0, 0.02, size=(3, size, size))


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    h, w = rng.integers(size // 8, size // 3 + 1, size=2)
    cy, cx = rng.integers(0, size, size=2)
    if rng.random() < 0.5:
        return (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
    return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0


def _paint(img: np.ndarray, region: np.ndarray, rng: np.random.Generator) -> None:
    color = rng.uniform(0.0, 1.0, size=3)
    # keep fills away from the background mean so changes are visible
    if np.abs(color - img[:, region].mean(axis=1)).max() < 0.3:
        color = 1.0 - color
    grain = rng.normal(0.0, 0.03, size=(3, int(region.sum())))
    img[:, region] = color[:, None] + grain


def _photometric_jitter(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    gain = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-0.05, 0.05)
    return img * gain + shift


def gen_sample(
    rng: np.random.Generator,
    size: int,
    sample_id: str = "",
    max_shapes: int = 4,
    min_change: float = 0.05,
    max_change: float = 0.30,
    max_tries: int = 200,
) -> SamplePair:
    """One pair: shared background and distractors, shapes added or removed in B."""
    background = _texture(rng, size)
    img_a = background.copy()
    for _ in range(rng.integers(0, 3)):
        _paint(img_a, _shape_mask(rng, size), rng)
    img_b = img_a.copy()
    mask = np.zeros((size, size), dtype=bool)

    if max_shapes > 0:
        for _ in range(max_tries):
            regions = [_shape_mask(rng, size) for _ in range(rng.integers(1, max_shapes + 1))]
            changed = np.logical_or.reduce(regions)
            if min_change <= changed.mean() <= max_change:
                break
        else:
            raise RuntimeError(f"could not draw a change mask within [{min_change}, {max_change}]")
        for region in regions:
            if rng.random() < 0.6:  # object appears in B
                _paint(img_b, region, rng)
            else:  # object present in A is gone in B
                _paint(img_a, region, rng)
                img_b[:, region] = background[:, region]
        mask = changed

    img_a = _quantise(_photometric_jitter(img_a, rng))
    img_b = _quantise(_photometric_jitter(img_b, rng))
    return SamplePair(img_a, img_b, mask.astype(np.uint8), sample_id)


def gen_synthetic(
    seed: int,
    count: int,
    size: int = 64,
    max_shapes: int = 4,
    min_change: float = 0.05,
    max_change: float = 0.30,
    prefix: str = "",
) -> list[SamplePair]:
    """``count`` pairs, fully determined by ``seed`` (each sample has its own stream)."""
    if size <= 0 or size % 32:
        raise ValueError(f"image size must be a positive multiple of 32, got {size}")
    if count < 1:
        raise ValueError("count must be >= 1")
    return [
        gen_sample(
            np.random.default_rng([seed, i]),
            size,
            f"{prefix}{i:05d}",
            max_shapes=max_shapes,
            min_change=min_change,
            max_change=max_change,
        )
        for i in range(count)
    ]


def synthetic_splits(seed: int, train: int, val: int, test: int = 0, size: int = 64, **kw) -> dict[str, list]:
    """Disjoint train/val/test draws; each split has its own seed stream."""
    splits = {"train": gen_synthetic(seed, train, size, prefix="train_", **kw)}
    splits["val"] = gen_synthetic(seed + 1_000_003, val, size, prefix="val_", **kw)
    if test:
        splits["test"] = gen_synthetic(seed + 2_000_006, test, size, prefix="test_", **kw)
    return splits


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class PhotoParams:
    order: tuple[str, ...]
    brightness: float
    contrast: float
    saturation: float


@dataclass(frozen=True)
class AugmentParams:
    rot90: int
    hflip: bool
    vflip: bool
    photo_a: PhotoParams
    photo_b: PhotoParams


def _draw_photo(rng: np.random.Generator, prob: float) -> PhotoParams:
    order = tuple(str(s) for s in rng.permutation(["brightness", "contrast", "saturation"]))
    brightness = float(rng.uniform(-0.2, 0.2))
    contrast = float(np.exp(rng.uniform(np.log(0.8), np.log(1.25))))
    saturation = float(np.exp(rng.uniform(np.log(0.8), np.log(1.25))))
    # each op fires independently; a skipped op keeps its identity value
    on = rng.random(3) < prob
    return PhotoParams(
        order=order,
        brightness=brightness if on[0] else 0.0,
        contrast=contrast if on[1] else 1.0,
        saturation=saturation if on[2] else 1.0,
    )


def draw_augment_params(rng: np.random.Generator, photo_prob: float = 0.5) -> AugmentParams:
    if not 0.0 <= photo_prob <= 1.0:
        raise ValueError(f"photo_prob must lie in [0, 1], got {photo_prob}")
    return AugmentParams(
        rot90=int(rng.integers(0, 4)),
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        photo_a=_draw_photo(rng, photo_prob),
        photo_b=_draw_photo(rng, photo_prob),
    )


def photometric(img: np.ndarray, p: PhotoParams) -> np.ndarray:
    out = img.astype(np.float32)
    identity = {"brightness": 0.0, "contrast": 1.0, "saturation": 1.0}
    for op in p.order:
        if getattr(p, op) == identity[op]:
            continue
        if op == "brightness":
            out = out + p.brightness
        elif op == "contrast":
            mean = out.mean()
            out = (out - mean) * p.contrast + mean
        elif op == "saturation":
            gray = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2])[None]
            out = gray + (out - gray) * p.saturation
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def geometric(x: np.ndarray, p: AugmentParams) -> np.ndarray:
    """Apply the rotation and flips to the trailing (H, W) axes."""
    x = np.rot90(x, p.rot90, axes=(-2, -1))
    if p.hflip:
        x = x[..., ::-1]
    if p.vflip:
        x = x[..., ::-1, :]
    return np.ascontiguousarray(x)


def apply_augment(s: SamplePair, p: AugmentParams) -> SamplePair:
    return replace(
        s,
        img_a=photometric(geometric(s.img_a, p), p.photo_a),
        img_b=photometric(geometric(s.img_b, p), p.photo_b),
        mask=geometric(s.mask, p),
    )


def augment(s: SamplePair, seed, photo_prob: float = 0.5) -> SamplePair:
    """Random rotation/flip shared by both images and the mask; photometric
    distortion drawn separately for each image, never applied to the mask.

    Brightness, contrast and saturation each fire with ``photo_prob``.
    """
    return apply_augment(s, draw_augment_params(np.random.default_rng(seed), photo_prob))


# ---------------------------------------------------------------------------
# disk format


def save_dataset(samples: Sequence[SamplePair], root: str | Path) -> None:
    root = Path(root)
    for sub in ("A", "B", "label"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(_to_uint8(s.img_a)).save(root / "A" / f"{s.id}.png")
        Image.fromarray(_to_uint8(s.img_b)).save(root / "B" / f"{s.id}.png")
        Image.fromarray((s.mask * 255).astype(np.uint8)).save(root / "label" / f"{s.id}.png")


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def read_image(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_mask(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


def load_dataset(root: str | Path, require_labels: bool = True) -> list[SamplePair]:
    """Read a split directory; samples are ordered by id."""
    root = Path(root)
    if not (root / "A").is_dir() or not (root / "B").is_dir():
        raise FileNotFoundError(f"{root} must contain A/ and B/ folders")
    samples = []
    for pa in sorted((root / "A").glob("*.png")):
        pb = root / "B" / pa.name
        if not pb.exists():
            raise FileNotFoundError(f"missing B image for {pa.stem}")
        pl = root / "label" / pa.name
        img_a = read_image(pa)
        if pl.exists():
            mask = read_mask(pl)
        elif require_labels:
            raise FileNotFoundError(f"missing label for {pa.stem}")
        else:
            mask = np.zeros(img_a.shape[1:], dtype=np.uint8)
        samples.append(SamplePair(img_a, read_image(pb), mask, pa.stem))
    if not samples:
        raise FileNotFoundError(f"no PNG images found under {root / 'A'}")
    return samples
