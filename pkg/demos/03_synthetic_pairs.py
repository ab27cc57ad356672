"""
Synthetic change pairs
======================

Each pair shares a textured background.  Image B gets a global photometric
shift plus a few shapes added or removed, and those shapes form the change
mask.  Augmentation applies one geometric draw to the whole pair and an
independent colour jitter to each image.
"""

import sys
import tempfile
from pathlib import Path

from changekit.data import augment, gen_synthetic, load_dataset, save_dataset

pairs = gen_synthetic(seed=0, count=4, size=64)
for p in pairs:
    print(p.id, "changed fraction", round(float(p.mask.mean()), 3))

aug = augment(pairs[0], seed=(0, 0, 0))
print("mask pixels before/after augmentation:", int(pairs[0].mask.sum()), int(aug.mask.sum()))

# Pairs are stored as A/, B/ and label/ PNGs, the usual change-detection layout.
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
save_dataset(pairs, out)
print("wrote", sorted(q.name for q in out.iterdir()), "under", out)
print("reloaded", len(load_dataset(out)), "pairs")
