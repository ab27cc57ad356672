"""Graph-free reference implementations used as test oracles.

Nothing here imports the package's tensor ops: every quantity is rebuilt
from explicit loops or plain numpy so that agreement is evidence, not
tautology.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def conv2d_loop(x, w, b=None, stride=1, padding=0):
    """Direct cross-correlation by nested loops over output positions."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    if b is not None:
        out += np.asarray(b)[None, :, None, None]
    return out


def cosine(u, v, eps=1e-8) -> float:
    u = [float(t) for t in np.ravel(u)]
    v = [float(t) for t in np.ravel(v)]
    dot = sum(a * b for a, b in zip(u, v))
    nu = max(math.sqrt(sum(a * a for a in u)), eps)
    nv = max(math.sqrt(sum(b * b for b in v)), eps)
    return dot / (nu * nv)


def phi_c(fa, fb):
    n, c, h, w = fa.shape
    out = np.zeros((n, h, w))
    for i in range(n):
        for y in range(h):
            for x in range(w):
                out[i, y, x] = cosine(fa[i, :, y, x], fb[i, :, y, x])
    return out


def phi_s(fa, fb):
    n, c = fa.shape[:2]
    out = np.zeros((n, c))
    for i in range(n):
        for k in range(c):
            out[i, k] = cosine(fa[i, k], fb[i, k])
    return out


def csdw_weight(fa, fb):
    """w[n, c, y, x] = (1 - sig(phi_c[n, y, x])) * (1 - sig(phi_s[n, c]))."""
    pc, ps = phi_c(fa, fb), phi_s(fa, fb)
    n, c, h, w = fa.shape
    out = np.zeros(fa.shape)
    for i in range(n):
        for k in range(c):
            for y in range(h):
                for x in range(w):
                    out[i, k, y, x] = (1 - sigmoid(pc[i, y, x])) * (1 - sigmoid(ps[i, k]))
    return out


def double_conv(x, w1, b1, w2, b2):
    h = np.maximum(conv2d_loop(x, w1, b1, padding=1), 0.0)
    return conv2d_loop(h, w2, b2, padding=1)


def csdw_forward(fa, fb, conv_a, conv_b):
    """``conv_*`` are (w1, b1, w2, b2) tuples for the two residual blocks."""
    w = csdw_weight(fa, fb)
    return double_conv(w * fa, *conv_a) + fa, double_conv(w * fb, *conv_b) + fb


def pointwise(x, w, b):
    """1x1 convolution as an explicit channel mix per pixel."""
    n, cin, h, wd = x.shape
    out = np.zeros((n, w.shape[0], h, wd))
    for o in range(w.shape[0]):
        out[:, o] = b[o] + sum(w[o, i, 0, 0] * x[:, i] for i in range(cin))
    return out


def channel_attention(x, w1, b1, w2, b2):
    gap = x.mean(axis=(2, 3))  # (N, C)
    hidden = np.maximum(gap @ w1[:, :, 0, 0].T + b1, 0.0)
    gate = 1.0 / (1.0 + np.exp(-(hidden @ w2[:, :, 0, 0].T + b2)))
    return gate[:, :, None, None] * x


def fuse(x, prev_other, w, b):
    return pointwise(np.concatenate([x, prev_other], axis=1), w, b)


def bilinear_1d(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel (align-corners false) interpolation weights, built per output sample."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(math.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1 - frac
        m[i, hi] += frac
    return m


def cross_entropy(logits, target) -> float:
    n, _, h, w = logits.shape
    total = 0.0
    for i in range(n):
        for y in range(h):
            for x in range(w):
                z = logits[i, :, y, x]
                zmax = max(z)
                lse = zmax + math.log(sum(math.exp(v - zmax) for v in z))
                total += lse - z[int(target[i, y, x])]
    return total / (n * h * w)


def confusion_loop(pred, gt):
    tp = tn = fp = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def metrics_exact(tp, tn, fp, fn):
    """Exact rationals; a zero denominator gives 0."""

    def r(a, b):
        return Fraction(a, b) if b else Fraction(0)

    prec, rec = r(tp, tp + fp), r(tp, tp + fn)
    return {
        "iou": r(tp, tp + fp + fn),
        "prec": prec,
        "rec": rec,
        "f1": r(2 * prec * rec, 1) / (prec + rec) if prec + rec else Fraction(0),
        "oa": r(tp + tn, tp + tn + fp + fn),
    }


def render_loop(pred, gt):
    colors = {(1, 1): (255, 255, 255), (0, 0): (0, 0, 0), (1, 0): (0, 255, 0), (0, 1): (255, 0, 0)}
    out = np.zeros(np.shape(pred) + (3,), dtype=np.uint8)
    for y in range(out.shape[0]):
        for x in range(out.shape[1]):
            out[y, x] = colors[(int(pred[y, x]), int(gt[y, x]))]
    return out
