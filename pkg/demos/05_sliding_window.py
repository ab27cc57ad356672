"""
Tiled inference on a large scene
================================

The network sees fixed-size patches.  A larger scene is covered by
overlapping windows, the change probabilities are averaged where windows
overlap, and the argmax gives the final mask.
"""

import numpy as np

from changekit.config import desk_config
from changekit.infer import slide_infer, slide_proba, tile_starts
from changekit.model import ChangeDetector

model = ChangeDetector(desk_config().model, seed=0)
rng = np.random.default_rng(0)
a, b = rng.random((2, 3, 160, 224), dtype=np.float32)

print("row starts:", tile_starts(160, 64, 32))
print("column starts:", tile_starts(224, 64, 32))

proba = slide_proba(model, a, b, patch=64, stride=32)
mask = slide_infer(model, a, b, patch=64, stride=32)
print("probabilities", proba.shape, "mask", mask.shape, "changed fraction", round(float(mask.mean()), 3))

# With the window equal to the image, tiling is a single forward pass.
small_a, small_b = a[:, :64, :64], b[:, :64, :64]
same = np.array_equal(slide_infer(model, small_a, small_b, 64), model.predict(small_a[None], small_b[None])[0])
print("one window equals one forward pass:", same)
