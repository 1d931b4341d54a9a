"""A small reverse-mode gradient engine over numpy arrays.

Only the operations needed by the codec networks are provided. Every op
records a closure that maps the output gradient to input gradients; calling
``Tensor.backward`` walks the graph in reverse topological order.

Arrays are NCHW. Reductions happen in a fixed order for a given shape, so
two evaluations of the same graph on the same inputs are bitwise equal.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ConfigurationError(ValueError):
    """Raised when tensor shapes or layer settings are inconsistent."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ConfigurationError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def relu_power(a: Tensor, exponent: float) -> Tensor:
    """max(a, 0) ** exponent; the gradient is zero where a <= 0."""
    pos = a.data > 0
    base = np.where(pos, a.data, 0).astype(a.dtype)
    out = base**exponent

    def backward(g):
        safe = np.where(pos, a.data, 1).astype(a.dtype)
        return (np.where(pos, g * exponent * safe ** (exponent - 1), 0).astype(a.dtype),)

    return _make(out, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    out = np.where(pos, a.data, a.data * slope).astype(a.dtype)
    return _make(out, (a,), lambda g: (np.where(pos, g, g * slope).astype(a.dtype),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes strictly inside, zero when saturated."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _make(out, (a,), lambda g: (np.where(inside, g, 0).astype(g.dtype),))


# ---------------------------------------------------------------------------
# shape and reduction


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[ax] for ax in axes)
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            parts.append(g[tuple(index)])
        return parts

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def crop(a: Tensor, height: int, width: int) -> Tensor:
    out = a.data[:, :, :height, :width]

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, :, :height, :width] = g
        return (full,)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# convolution and resampling


def _as_batch(x):
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.data.ndim != 4:
        raise ConfigurationError(f"expected a (C, H, W) or (B, C, H, W) tensor, got {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``weight`` is (out_channels, in_channels, k, k). Each output element is
    the im2col row (ordered channel, kernel row, kernel column) dotted with the
    flattened kernel, so the accumulation order depends only on the shape.
    """
    x, squeeze = _as_batch(as_tensor(x))
    weight = as_tensor(weight)
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ConfigurationError(f"kernel must be (O, C, k, k), got {weight.shape}")
    out_ch, in_ch, k, _ = weight.shape
    batch, channels, height, width = x.shape
    if in_ch != channels:
        raise ConfigurationError(f"kernel expects {in_ch} input channels, input has {channels}")
    ho = (height + 2 * pad - k) // stride + 1
    wo = (width + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"kernel {k} too large for input {height}x{width} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(batch * ho * wo, in_ch * k * k)
    flat_w = weight.data.reshape(out_ch, in_ch * k * k)
    out = cols @ flat_w.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(batch, ho, wo, out_ch).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(batch * ho * wo, out_ch)
        gw = (g2.T @ cols).reshape(weight.shape) if _needs_grad(weight) else None
        gx = None
        if _needs_grad(x):
            gcols = (g2 @ flat_w).reshape(batch, ho, wo, in_ch, k, k)
            gxp = np.zeros_like(xp)
            for ky in range(k):
                for kx in range(k):
                    gxp[:, :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride] += (
                        gcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad : pad + height, pad : pad + width] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    result = _make(out, parents, backward)
    if squeeze:
        result = reshape(result, result.shape[1:])
    return result


def unpool_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling: out[c, y, x] = in[c, y // f, x // f]."""
    x = as_tensor(x)
    if factor < 1:
        raise ConfigurationError("unpool factor must be >= 1")
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def backward(g):
        *lead, h, w = x.shape
        return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)

    return _make(out, (x,), backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling; a trailing odd row/column is dropped."""
    x = as_tensor(x)
    *lead, h, w = x.shape
    h2, w2 = h // 2, w // 2
    core = x.data[..., : 2 * h2, : 2 * w2]
    out = core.reshape(*lead, h2, 2, w2, 2).mean(axis=(-3, -1))

    def backward(g):
        full = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g * 0.25, 2, axis=-2), 2, axis=-1)
        full[..., : 2 * h2, : 2 * w2] = spread
        return (full,)

    return _make(out, (x,), backward)


def separable_filter_valid(x: Tensor, taps: np.ndarray) -> Tensor:
    """Depthwise 'valid' filtering of the last two axes with the same 1-D taps."""
    x = as_tensor(x)
    taps = np.asarray(taps, dtype=x.dtype)
    k = taps.size
    *lead, h, w = x.shape
    if h < k or w < k:
        raise ConfigurationError(f"filter of size {k} does not fit {h}x{w}")
    ho, wo = h - k + 1, w - k + 1
    rows = np.zeros((*lead, ho, w), dtype=x.dtype)
    for i in range(k):
        rows += taps[i] * x.data[..., i : i + ho, :]
    out = np.zeros((*lead, ho, wo), dtype=x.dtype)
    for j in range(k):
        out += taps[j] * rows[..., :, j : j + wo]

    def backward(g):
        grows = np.zeros((*lead, ho, w), dtype=g.dtype)
        for j in range(k):
            grows[..., :, j : j + wo] += taps[j] * g
        gx = np.zeros((*lead, h, w), dtype=g.dtype)
        for i in range(k):
            gx[..., i : i + ho, :] += taps[i] * grows
        return (gx,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy_bits(logits: Tensor, targets: np.ndarray, weight: np.ndarray, axis: int = 2) -> Tensor:
    """Sum of ``-log2 softmax(logits)[target]`` over elements where ``weight`` is set.

    ``logits`` carries the class axis at ``axis``; ``targets`` and ``weight``
    have the logits shape with that axis removed.
    """
    z = logits.data
    shifted = z - z.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - log_norm
    idx = np.expand_dims(targets, axis)
    picked = np.take_along_axis(logp, idx, axis=axis).squeeze(axis)
    w = weight.astype(z.dtype)
    total = -(picked * w).sum() / math.log(2)

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, idx, 1.0, axis=axis)
        return ((p - onehot) * np.expand_dims(w, axis) * (g / math.log(2)),)

    return _make(np.asarray(total, dtype=z.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# parameters and checks


class Parameter(Tensor):
    """A trainable tensor. Gradients accumulate in ``grad`` until cleared."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data), requires_grad=True, name=name)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    fan_in = math.prod(shape[1:])
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` re-evaluates the scalar loss from the current parameter values.
    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    When ``max_coords`` is set, that many coordinates are sampled per parameter.
    """
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = abs(a.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
