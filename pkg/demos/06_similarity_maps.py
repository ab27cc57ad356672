"""
Where the encoder sees change
=============================

Cosine similarity between the two streams at each encoder level, before
any weighting.  Values near 1 mean the streams agree.  The grey maps
store -1 as black and 1 as white.
"""

import tempfile
from pathlib import Path

from changekit.analysis import analyze_similarity
from changekit.config import desk_config
from changekit.data import gen_synthetic
from changekit.model import ChangeDetector

model = ChangeDetector(desk_config().model, seed=0)
pair = gen_synthetic(seed=3, count=1, size=64)[0]
out = Path(tempfile.mkdtemp())
report = analyze_similarity(model, pair.img_a, pair.img_b, out)

print("whole-image RGB cosine:", round(report.rgb_cosine, 4))
for k, (pc, ps) in enumerate(zip(report.phi_c, report.phi_s), start=1):
    print(f"level {k}: pixel map {pc.shape}, mean {pc.mean():.3f} | channel vector {ps.shape}, mean {ps.mean():.3f}")
print("files:", sorted(p.name for p in out.iterdir())[:4], "...")
