"""Differentiable primitives.

Every function takes and returns :class:`~lesionforge.tensor.Tensor` values.
When a tape is active and an input requires gradients, the op records a
closure mapping the output gradient to one gradient per input.
Convolution is cross-correlation (no kernel flip) over N,C,H,W arrays.
"""
from __future__ import annotations

import threading
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateBatchError, DimensionError, NumericError
from .tensor import Tensor, active_tape

_monitor = threading.local()


class KinkMonitor:
    """Tracks the smallest distance of any ReLU input from 0 and of any
    max-pool winner from its runner-up while active (``with KinkMonitor() as m``).

    ``patterns`` collects every ReLU sign mask and max-pool argmax seen, so two
    passes can be compared for a change of linear piece.
    """

    def __init__(self):
        self.margin = np.inf
        self.patterns: list[np.ndarray] = []

    def __enter__(self):
        self._prev = getattr(_monitor, "active", None)
        _monitor.active = self
        return self

    def __exit__(self, *exc):
        _monitor.active = self._prev

    def observe(self, margin: float, pattern: np.ndarray | None = None) -> None:
        self.margin = min(self.margin, float(margin))
        if pattern is not None:
            self.patterns.append(pattern)

    def same_piece(self, other: "KinkMonitor") -> bool:
        return len(self.patterns) == len(other.patterns) and all(
            np.array_equal(a, b) for a, b in zip(self.patterns, other.patterns))


def _observe(margin_fn, pattern_fn=None) -> None:
    mon = getattr(_monitor, "active", None)
    if mon is not None:
        mon.observe(margin_fn(), pattern_fn() if pattern_fn is not None else None)


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=tracked)
    if tracked:
        tape.record(op, inputs, result, backward)
    return result


def _tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _tensor(a)
    b = _tensor(b, a)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _tensor(a)
    b = _tensor(b, a)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _tensor(a)
    b = _tensor(b, a)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    _observe(lambda: np.abs(x.data).min(), lambda: mask)
    return _emit("relu", np.where(mask, x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


# ----------------------------------------------------------------- reductions

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _emit("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _emit("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ----------------------------------------------------------------- dense

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``x`` [N, D] and ``weight`` [K, D]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape} (axis 1)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _emit("dense", out, inputs, back)


# ----------------------------------------------------------------- convolution

def _pad(x: np.ndarray, padding: int, value=0.0) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="constant", constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of shape [N, C, ho, wo, kh, kw] over a padded input."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _fold(cols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: scatter-add [N, C, ho, wo, kh, kw] back to [N, C, H, W]."""
    n, c, h, w = shape
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[..., i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``x`` [N,C,H,W] with ``kernel`` [F,C,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: kernel channel axis 1 ({kc}) != input channel axis 1 ({c})")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel spatial axes 2,3 ({kh}x{kw}) exceed padded input axes 2,3 "
            f"({h + 2 * padding}x{w + 2 * padding})")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({f},)")
    if not x.is_finite():
        raise NumericError("conv2d: input contains NaN or Inf")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = _pad(x.data, padding)
    cols = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gmat.T @ cols).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gx = _fold(gcols, x.shape, kh, kw, stride, padding)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _emit("conv2d", out, inputs, back)


conv2d_forward = conv2d


# ----------------------------------------------------------------- pooling / resampling

def max_pool2d(x: Tensor, size: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling; ties route the gradient to the first index in scan order."""
    stride = stride or size
    n, c, h, w = x.shape
    if size > h + 2 * padding or size > w + 2 * padding:
        raise DimensionError(f"max_pool2d: window {size} exceeds padded input {x.shape[2:]}")
    ho = conv_output_size(h, size, stride, padding)
    wo = conv_output_size(w, size, stride, padding)
    xp = _pad(x.data, padding, value=-np.inf)
    win = _windows(xp, size, size, stride, ho, wo).reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    _observe(lambda: _pool_margin(win), lambda: arg)

    def back(g):
        cols = np.zeros((n, c, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(cols, arg[..., None], g[..., None], axis=-1)
        return (_fold(cols.reshape(n, c, ho, wo, size, size), x.shape, size, size, stride, padding),)

    return _emit("max_pool2d", np.ascontiguousarray(out), (x,), back)


def _pool_margin(win: np.ndarray) -> float:
    top2 = -np.sort(-win, axis=-1)[..., :2]
    gap = top2[..., 0] - top2[..., 1]
    # windows tied at an exact zero come from inactive ReLUs and stay put under small perturbations
    gap = gap[~((top2[..., 0] == 0) & (top2[..., 1] == 0))]
    return float(gap.min()) if gap.size else np.inf


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    area = h * w
    out = x.data.mean(axis=(2, 3))
    return _emit("global_avg_pool", out, (x,),
                 lambda g: (np.broadcast_to((g / area)[:, :, None, None], x.shape).astype(x.dtype),))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, factor, w, factor)).reshape(n, c, h * factor, w * factor)

    def back(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _emit("upsample_nearest", np.ascontiguousarray(out), (x,), back)


# ----------------------------------------------------------------- normalization

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, *, eps: float = 1e-5,
               running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None):
    """Per-channel batch normalization of ``x`` [N,C,H,W].

    With ``running_mean``/``running_var`` given the op normalizes with those
    (eval mode) and returns just the output. Otherwise it uses biased batch
    statistics and returns ``(output, batch_mean, batch_var)``.
    """
    n, c, h, w = x.shape
    shape = (1, c, 1, 1)
    g_ = gamma.data.reshape(shape)
    if running_mean is not None:
        inv_std = (1.0 / np.sqrt(running_var.astype(x.dtype) + eps)).reshape(shape)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(shape)) * inv_std
        out = g_ * xhat + beta.data.reshape(shape)

        def back_eval(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _emit("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), back_eval)

    m = n * h * w
    if m < 2:
        raise DegenerateBatchError(f"batch_norm in train mode needs N*H*W >= 2 per channel, got {m}")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std
    out = g_ * xhat + beta.data.reshape(shape)

    def back(g):
        dxhat = g * g_
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = inv_std * (dxhat - s1 / m - xhat * (s2 / m))
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    result = _emit("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), back)
    return result, mu.reshape(c), var.reshape(c)


# ----------------------------------------------------------------- losses

def softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    s = softmax_array(x.data)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", s, (x,), back)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def back(g):
        probs = softmax_array(logits.data)
        probs[np.arange(n), labels] -= 1
        return (probs * (g / n),)

    return _emit("softmax_cross_entropy", loss, (logits,), back)


def squared_error(y: Tensor, x: Tensor, scale_by: float = 1.0) -> Tensor:
    """``scale_by * 0.5 * ||y - x||^2`` summed over every element."""
    if y.shape != x.shape:
        raise DimensionError(f"squared_error: output shape {y.shape} != input shape {x.shape}")
    diff = y.data - x.data
    c = y.dtype.type(scale_by)
    loss = np.asarray(c * 0.5 * np.vdot(diff, diff), dtype=y.dtype)

    def back(g):
        gy = diff * (g * c)
        return gy, -gy

    return _emit("squared_error", loss, (y, x), back)
