"""Differentiable kernels on :class:`~paratranscnn.tensor.Tensor`.

Every function computes its forward result with numpy and, when gradients
are enabled and an input requires one, records a closure on the tape that
maps the output gradient to one gradient per input.

Layouts: images are NCHW, token sequences B x N x D. Convolution weights are
``Cout x Cin x kh x kw``; transposed-convolution weights are
``Cin x Cout x kh x kw`` so that the same array serves as the adjoint.
"""
from __future__ import annotations

import builtins
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from .tensor import Tensor, get_tape, is_grad_enabled

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_state = threading.local()


class ShapeError(ValueError):
    """Raised for incompatible operand shapes or convolution geometry."""


# ---------------------------------------------------------------------------
# bookkeeping


def _needs_grad(*xs) -> bool:
    return is_grad_enabled() and builtins.any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _result(data: np.ndarray, inputs, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _needs_grad(*inputs):
        get_tape().record(op, inputs, out, backward_fn)
    return out


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


@contextmanager
def count_flops():
    """Collect multiply-accumulate based FLOP counts (2 per MAC) of conv/matmul ops."""
    prev = getattr(_state, "flops", None)
    counter = [0]
    _state.flops = counter
    try:
        yield counter
    finally:
        _state.flops = prev


def _add_flops(n: int) -> None:
    counter = getattr(_state, "flops", None)
    if counter is not None:
        counter[0] += int(n)


class _KinkLog:
    def __init__(self, mode: str):
        self.mode = mode
        self.entries: list = []
        self.pos = 0

    def next(self):
        e = self.entries[self.pos]
        self.pos += 1
        return e


@contextmanager
def record_kinks():
    """Record the active set of every ReLU and max-pool evaluated inside."""
    prev = getattr(_state, "kinks", None)
    log = _KinkLog("record")
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


@contextmanager
def replay_kinks(log: _KinkLog):
    """Re-evaluate with the ReLU masks and max-pool winners frozen to ``log``.

    Used by finite-difference checks so perturbations cannot hop across a kink.
    """
    prev = getattr(_state, "kinks", None)
    replay = _KinkLog("replay")
    replay.entries = log.entries
    _state.kinks = replay
    try:
        yield replay
    finally:
        _state.kinks = prev


def _kink(compute):
    log = getattr(_state, "kinks", None)
    if log is None:
        return compute()
    if log.mode == "record":
        value = compute()
        log.entries.append(value)
        return value
    return log.next()


# ---------------------------------------------------------------------------
# elementwise and broadcasting


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(x: Tensor) -> Tensor:
    mask = _kink(lambda: x.data > 0)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = (0.5 * (1.0 + erf(xd / _SQRT2))).astype(xd.dtype, copy=False)
    pdf = (_INV_SQRT_2PI * np.exp(-0.5 * xd * xd)).astype(xd.dtype, copy=False)
    return _result(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return _result(np.asarray(out), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or builtins.any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {[t.shape for t in tensors]} disagree off-axis")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    _add_flops(2 * out.size * ad.shape[-1])

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as in_features x out_features."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # in place after the shift: attention score maps are the largest arrays in a forward pass
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def global_avg_pool2d(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# convolution family


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _windows(xp: np.ndarray, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    """Strided view B x C x ho x wo x kh x kw over a padded input."""
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, (xp.shape[0], xp.shape[1], ho, wo, kh, kw), (s0, s1, s2 * sh, s3 * sw, s2, s3),
                      writeable=False)


def _pad2d(x: np.ndarray, ph: int, pw: int, value=0.0) -> np.ndarray:
    if not (ph or pw):
        return x
    b, c, h, w = x.shape
    out = np.full((b, c, h + 2 * ph, w + 2 * pw), value, dtype=x.dtype)
    out[:, :, ph : ph + h, pw : pw + w] = x
    return out


def _col2im(cols: np.ndarray, out_shape, kh, kw, sh, sw) -> np.ndarray:
    """Adjoint of :func:`_windows`: scatter-add B x C x ho x wo x kh x kw into ``out_shape``."""
    out = np.zeros(out_shape, dtype=cols.dtype)
    ho, wo = cols.shape[2], cols.shape[3]
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += cols[:, :, :, :, i, j]
    return out


def _conv_out(n, k, s, p) -> int:
    return (n + 2 * p - k) // s + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and w, got x{x.shape} w{w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input has Cin={cin}, weight expects Cin={cin_w}")
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{wd + 2 * pw}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    ho, wo = _conv_out(h, kh, sh, ph), _conv_out(wd, kw, sw, pw)
    xp = _pad2d(x.data, ph, pw)
    if (kh, kw) == (1, 1) and (sh, sw) == (1, 1):
        cols = xp.transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        win = _windows(xp, kh, kw, sh, sw, ho, wo)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, cin * kh * kw)
    wm = w.data.reshape(cout, -1)
    # one GEMM per sample keeps each sample's result independent of the batch size
    out = (cols.reshape(bsz, ho * wo, -1) @ wm.T).reshape(-1, cout)
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))
    _add_flops(2 * bsz * ho * wo * cout * cin * kh * kw)
    xp_shape = xp.shape

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wm).reshape(bsz, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = _col2im(dcols, xp_shape, kh, kw, sh, sw)
            gx = gxp[:, :, ph : ph + h, pw : pw + wd]
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Transposed convolution; output extent is ``(H - 1) * stride - 2 * pad + k``."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d x and w, got x{x.shape} w{w.shape}")
    bsz, cin, h, wd = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has Cin={cin}, weight expects Cin={cin_w}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv_transpose2d bias shape {b.shape} != ({cout},)")
    hf, wf = (h - 1) * sh + kh, (wd - 1) * sw + kw
    ho, wo = hf - 2 * ph, wf - 2 * pw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d padding {padding} leaves no output for input {h}x{wd}")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wm = w.data.reshape(cin, -1)
    cols = (x2.reshape(bsz, h * wd, cin) @ wm).reshape(bsz, h, wd, cout, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    full = _col2im(cols, (bsz, cout, hf, wf), kh, kw, sh, sw)
    out = np.ascontiguousarray(full[:, :, ph : ph + ho, pw : pw + wo])
    if b is not None:
        out += b.data[None, :, None, None]
    _add_flops(2 * bsz * h * wd * cin * cout * kh * kw)

    def bw(g):
        gfull = _pad2d(np.ascontiguousarray(g), ph, pw)
        win = _windows(gfull, kh, kw, sh, sw, h, wd)
        gcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, cout * kh * kw)
        gx = (gcols @ wm.T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (x2.T @ gcols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, bw, "conv_transpose2d")


def max_pool2d(x: Tensor, kernel=3, stride=2, padding=1) -> Tensor:
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    bsz, c, h, wd = x.shape
    ho, wo = _conv_out(h, kh, sh, ph), _conv_out(wd, kw, sw, pw)
    xp = _pad2d(x.data, ph, pw, -np.inf)
    win = _windows(xp, kh, kw, sh, sw, ho, wo).reshape(bsz, c, ho, wo, kh * kw)
    idx = _kink(lambda: win.argmax(axis=-1)[..., None])
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]
    xp_shape = xp.shape

    def bw(g):
        dcols = np.zeros((bsz, c, ho, wo, kh * kw), dtype=g.dtype)
        np.put_along_axis(dcols, idx, g[..., None], axis=-1)
        gxp = _col2im(dcols.reshape(bsz, c, ho, wo, kh, kw), xp_shape, kh, kw, sh, sw)
        return (gxp[:, :, ph : ph + h, pw : pw + wd],)

    return _result(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


# ---------------------------------------------------------------------------
# normalization


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running buffers are updated in place with an
    exponential moving average (unbiased variance, as is conventional).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: gamma/beta must have length {c}, got {gamma.shape}/{beta.shape}")
    xd = x.data
    shp = (1, c, 1, 1)
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if n < 2:
            raise ValueError("batch_norm2d: a single value per channel in train mode gives degenerate variance")
        mu = xd.sum(axis=(0, 2, 3)) / n
        centered = xd - mu.reshape(shp)
        var = np.einsum("bchw,bchw->c", centered, centered) / n
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        n = None
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype, copy=False)
    xhat = (xd - mu.reshape(shp).astype(xd.dtype, copy=False)) * inv.reshape(shp)
    gd = gamma.data.reshape(shp)
    out = xhat * gd + beta.data.reshape(shp)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv.reshape(shp) / n * (n * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv.reshape(shp)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bw, "batch_norm2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have length {d}, got {gamma.shape}/{beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        gx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# losses needing a fused kernel


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[true class]`` via log-sum-exp."""
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(z, labels[:, None].astype(np.intp), axis=1)
    npix = labels.size
    loss = np.asarray((lse - picked).sum() / npix, dtype=z.dtype)

    def bw(g):
        p = np.exp(z - lse)
        np.put_along_axis(p, labels[:, None].astype(np.intp), np.take_along_axis(p, labels[:, None].astype(np.intp), 1) - 1, axis=1)
        return (p * (g / npix),)

    return _result(loss, (logits,), bw, "cross_entropy")
