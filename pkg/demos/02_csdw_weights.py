"""
Change weights from cosine similarity
=====================================

Two feature maps are compared twice: channel vectors per pixel give a map,
spatial maps per channel give a vector.  Each similarity passes through
``1 - sigmoid`` and the two factors multiply into one weight per element.
Similar inputs are damped and dissimilar ones are kept.
"""

import numpy as np

from changekit import tensor as T
from changekit.csdw import change_weight
from changekit.tensor import Tensor

rng = np.random.default_rng(1)
f = rng.standard_normal((1, 8, 6, 6))

with T.no_grad():
    for name, g in [("identical", f), ("scaled by 5", 5 * f), ("negated", -f), ("unrelated", rng.standard_normal(f.shape))]:
        out = change_weight(Tensor(f), Tensor(g))
        print(f"{name:12s} mean weight {out.w.data.mean():.6f}")

# The two bounds: (1 - sigmoid(1))^2 for identical inputs, (1 - sigmoid(-1))^2 for opposite ones.
s = 1 / (1 + np.exp(-1.0))
print("bounds:", round((1 - s) ** 2, 6), round(s**2, 6))

# A local edit only raises the channel-map weight where the edit is.
g = f.copy()
g[:, :, 2:4, 2:4] = rng.standard_normal((1, 8, 2, 2))
with T.no_grad():
    w_c = change_weight(Tensor(f), Tensor(g)).w_c.data[0, 0]
print(np.round(w_c, 2))
