"""
Reverse-mode gradients on a small tape
======================================

Every ``Tensor`` operation records how to push a gradient back to its
inputs.  Calling ``backward`` on a scalar walks that record in reverse.
"""

import numpy as np

from changekit import tensor as T
from changekit.tensor import Tensor, grad_check

rng = np.random.default_rng(0)

# A tiny convolution followed by a ReLU and a sum gives a scalar to differentiate.
x = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)


def f():
    return T.tsum(T.relu(T.conv2d(x, w, b, stride=1, padding=1)))


out = f()
out.backward()
print("value:", round(out.item(), 6))
print("dL/dw has shape", w.grad.shape, "and norm", round(float(np.linalg.norm(w.grad)), 6))

# The analytic gradient should agree with central differences.
print("grad check (max relative error):", grad_check(f, [x, w, b], step=1e-6))

# Inside no_grad nothing is recorded, which is how inference runs.
with T.no_grad():
    y = T.conv2d(x, w, b, padding=1)
print("recorded under no_grad:", y.requires_grad)
