"""Dense tensors with tape-based reverse-mode differentiation.

Every op in this module records a backward closure on its output when any
input requires a gradient.  ``Tensor.backward`` walks the recorded graph in
reverse topological order and accumulates gradients into leaf tensors.

Feature maps use the (N, C, H, W) layout throughout.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

COSINE_EPS = 1e-8

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an op."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph (inference)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(shape, g / n, dtype=x.dtype),),
    )


# ---------------------------------------------------------------------------
# layout


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = int(np.prod([s for s in shape if s != -1]))
    if shape.count(-1) > 1 or (-1 not in shape and known != x.size) or (known == 0 or x.size % known):
        raise ShapeError(f"cannot reshape tensor of shape {x.shape} into {shape}")
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"{axes} is not a permutation of the axes of shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),))


def permute_reshape(x: Tensor, perm: Sequence[int], new_shape: Sequence[int]) -> Tensor:
    """Axis permutation followed by a row-major reshape."""
    return reshape(permute(x, perm), new_shape)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels [start, stop) of an (N, C, H, W) tensor."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[:, start:stop]), (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=1)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g * scale, x.shape).astype(x.dtype),)

    return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel-group) to zero mean, unit variance; no affine."""
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"{c} channels cannot be split into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True) + eps)
    xhat = xc * inv
    m = xg.shape[2]

    def backward(g):
        g = g.reshape(n, groups, m)
        gx = inv * (g - g.mean(axis=2, keepdims=True) - xhat * (g * xhat).mean(axis=2, keepdims=True))
        return (gx.reshape(x.shape).astype(x.dtype),)

    return _result(xhat.reshape(x.shape).astype(x.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over (N, C, H, W) input with square kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if k != k2 or k < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"invalid conv2d geometry: kernel {weight.shape[2:]}, stride {stride}, padding {padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and kernel {k} (padding {padding})")

    pointwise = k == 1 and stride == 1 and padding == 0
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = xp.reshape(n, cin, h * w) if pointwise else _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, ho, wo)
    padded_shape = xp.shape

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gx = _col2im(gcols, padded_shape, k, stride, ho, wo)
                if padding:
                    gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# resampling


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix M with ``out = M @ in`` (half-pixel centres, edges clamped)."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, factor: int | None = None, size: tuple[int, int] | None = None) -> Tensor:
    """Bilinear resize of the two trailing axes, align-corners off."""
    n, c, h, w = x.shape
    if size is None:
        if factor is None or int(factor) != factor or factor < 1:
            raise ShapeError(f"upsample factor must be a positive integer, got {factor}")
        size = (h * int(factor), w * int(factor))
    mh = bilinear_matrix(h, size[0], x.dtype)
    mw = bilinear_matrix(w, size[1], x.dtype)
    out = mh @ x.data @ mw.T

    def backward(g):
        return (mh.T @ g @ mw,)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# probabilities and losses


def _softmax(d: np.ndarray, axis: int) -> np.ndarray:
    z = d - d.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = _softmax(x.data, axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward)


def softmax_channels(x: Tensor) -> Tensor:
    return softmax(x, axis=1)


def check_binary_target(target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if target.size and not np.isin(target, (0, 1)).all():
        bad = np.unique(target[~np.isin(target, (0, 1))])[:5]
        raise ValueError(f"target must be binary (0/1), found values {bad.tolist()}")
    return target.astype(np.int64)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target]; logits (N,2,H,W), target (N,H,W)."""
    target = check_binary_target(target)
    n, k, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    d = logits.data
    z = d - d.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    onehot = np.zeros_like(d)
    np.put_along_axis(onehot, target[:, None], 1.0, axis=1)
    count = n * h * w
    loss = -(logp * onehot).sum() / count

    def backward(g):
        return ((np.exp(logp) - onehot) * (g / count),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def row_cosine(x: Tensor, y: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Row-wise cosine <x,y> / (max(|x|,eps) * max(|y|,eps)) for (R, D) inputs."""
    if x.shape != y.shape or x.ndim != 2:
        raise ShapeError(f"row_cosine needs matching (R, D) inputs, got {x.shape} and {y.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd, yd = x.data, y.data
    dot = (xd * yd).sum(axis=1)
    nx = np.sqrt((xd * xd).sum(axis=1))
    ny = np.sqrt((yd * yd).sum(axis=1))
    dx = np.maximum(nx, eps)
    dy = np.maximum(ny, eps)
    cos = dot / (dx * dy)

    def backward(g):
        gx = gy = None
        if x.requires_grad:
            # the clamp is constant below eps, so the norm term drops out there
            coef = np.where(nx > eps, cos / (dx * dx), 0.0)
            gx = (g / (dx * dy))[:, None] * yd - (g * coef)[:, None] * xd
        if y.requires_grad:
            coef = np.where(ny > eps, cos / (dy * dy), 0.0)
            gy = (g / (dx * dy))[:, None] * xd - (g * coef)[:, None] * yd
        return gx, gy

    return _result(cos.astype(x.dtype), (x, y), backward)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameters in insertion order, plus per-parameter optimizer slots."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.ascontiguousarray(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def values(self) -> Iterable[Tensor]:
        return self._params.values()

    def num_elements(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        """Convert every parameter in place (e.g. to float64 for gradient checks)."""
        self.dtype = np.dtype(dtype)
        for t in self._params.values():
            t.data = t.data.astype(self.dtype)
            t.grad = None
        for slots in self.state.values():
            for key, arr in slots.items():
                slots[key] = arr.astype(self.dtype)
        return self

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, t in self._params.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"parameter {name!r}: stored shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=self.dtype)


# ---------------------------------------------------------------------------
# verification oracle


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Largest |analytic - numeric| / max(1, |numeric|) over the checked entries.

    ``numeric`` is the central difference (f(p+h) - f(p-h)) / 2h.  With
    ``max_entries`` set, that many entries per tensor are sampled at random
    instead of checking every one.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * step)
                err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
