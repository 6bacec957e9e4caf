"""Differentiable neural-network ops built on :class:`Tensor`."""
from __future__ import annotations

import functools
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, _as_tensor, matmul, tsum, where

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# -- convolution core -----------------------------------------------------
def _tuple(v, n):
    if isinstance(v, int):
        return (v,) * n
    v = tuple(v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def conv_output_shape(size, kernel, stride, padding):
    return tuple((s + 2 * p - k) // st + 1 for s, k, st, p in zip(size, kernel, stride, padding))


def _check_conv(x_shape, w_shape, stride, padding, names):
    nd = len(names)
    if len(x_shape) != nd + 2:
        raise ValueError(f"input must have {nd + 2} dims (N, C, {', '.join(names)}), got {x_shape}")
    if x_shape[1] != w_shape[1]:
        raise ValueError(f"channel axis mismatch: input has {x_shape[1]}, weight expects {w_shape[1]}")
    for name, s, k, st, p in zip(names, x_shape[2:], w_shape[2:], stride, padding):
        if st < 1:
            raise ValueError(f"stride along axis {name} must be >= 1")
        if s + 2 * p < k:
            raise ValueError(f"kernel {k} does not fit padded input {s + 2 * p} along axis {name}")


def _pad_last(xl, padding):
    """Pad the spatial axes of a channels-last array (N, *S, C)."""
    if not any(padding):
        return xl
    return np.pad(xl, [(0, 0)] + [(p, p) for p in padding] + [(0, 0)])


def _channels_last(x):
    return np.ascontiguousarray(np.moveaxis(x, 1, -1))


def _im2col(xl, kernel, stride, out):
    """Padded channels-last (N, *S, C) -> patch matrix (N * prod(out), prod(kernel) * C).

    Columns are kernel-offset major with channels innermost, so the copy
    moves contiguous channel runs.
    """
    nd = len(kernel)
    win = sliding_window_view(xl, kernel, axis=tuple(range(1, 1 + nd)))  # (N, *S', C, *k)
    win = win[(slice(None),) + tuple(slice(0, o * s, s) for o, s in zip(out, stride))]
    perm = (0,) + tuple(range(1, 1 + nd)) + tuple(range(2 + nd, 2 + 2 * nd)) + (1 + nd,)
    c = xl.shape[-1]
    return win.transpose(perm).reshape(xl.shape[0] * int(np.prod(out)), int(np.prod(kernel)) * c)


def _col2im(cols, n, spatial, c, kernel, stride, padding, out):
    """Adjoint of :func:`_im2col` plus un-padding; returns channels-last (N, *S, C)."""
    padded = tuple(s + 2 * p for s, p in zip(spatial, padding))
    xl = np.zeros((n,) + padded + (c,), dtype=cols.dtype)
    cols = cols.reshape((n,) + tuple(out) + (int(np.prod(kernel)), c))
    for j, offs in enumerate(itertools.product(*(range(k) for k in kernel))):
        sl = (slice(None),) + tuple(slice(o, o + st * (sz - 1) + 1, st) for o, st, sz in zip(offs, stride, out))
        xl[sl] += cols[..., j, :]
    crop = (slice(None),) + tuple(slice(p, p + s) for p, s in zip(padding, spatial))
    return xl[crop]


def _wmat(w):
    """(Cout, Cin, *k) -> (Cout, prod(k) * Cin) matching the im2col column order."""
    return np.ascontiguousarray(np.moveaxis(w, 1, -1)).reshape(w.shape[0], -1)


def _conv_fwd(x, w, stride, padding):
    """Channels-first in and out; the result is channels-last in memory."""
    kernel = w.shape[2:]
    out = conv_output_shape(x.shape[2:], kernel, stride, padding)
    cols = _im2col(_pad_last(_channels_last(x), padding), kernel, stride, out)
    y = cols @ _wmat(w).T
    y = y.reshape((x.shape[0],) + tuple(out) + (w.shape[0],))
    return np.moveaxis(y, -1, 1), cols, out


def _conv_input_grad(g, w, x_shape, stride, padding):
    """Vector-Jacobian product of the conv with respect to its input."""
    kernel = w.shape[2:]
    nd = len(kernel)
    if all(st == 1 for st in stride) and all(p <= k - 1 for p, k in zip(padding, kernel)):
        # stride 1: correlate the gradient with the flipped, channel-swapped kernel
        wf = np.flip(w, axis=tuple(range(2, 2 + nd))).swapaxes(0, 1)
        full = tuple(k - 1 - p for k, p in zip(kernel, padding))
        gx, _, _ = _conv_fwd(g, wf, stride, full)
        return gx
    out = g.shape[2:]
    gl = _channels_last(g).reshape(-1, w.shape[0])
    cols = gl @ _wmat(w)
    xl = _col2im(cols, x_shape[0], x_shape[2:], x_shape[1], kernel, stride, padding, out)
    return np.moveaxis(xl, -1, 1)


def _conv_weight_grad(g, cols, w_shape):
    gl = _channels_last(g).reshape(-1, w_shape[0])
    gw = (cols.T @ gl).T  # (Cout, prod(k) * Cin)
    k = w_shape[2:]
    return np.moveaxis(gw.reshape((w_shape[0],) + tuple(k) + (w_shape[1],)), -1, 1)


# Inputs this small are convolved as one dense (C*S, Cout*O) matrix built from
# the kernel; a tiny-channel im2col would spend its time copying patches.
DENSE_LIMIT = 4_000_000


@functools.lru_cache(maxsize=32)
def _dense_index(in_shape, w_shape, stride, padding):
    """Index into ``[w.ravel(), 0]`` for every (input unit, output unit) pair."""
    c_out, c_in, *kernel = w_shape
    out = conv_output_shape(in_shape[1:], kernel, stride, padding)
    n_w = int(np.prod(w_shape))
    idx = np.full((int(np.prod(in_shape)), c_out * int(np.prod(out))), n_w, dtype=np.int64)
    o_grid = np.stack(np.meshgrid(*(np.arange(o) for o in out), indexing="ij"), -1).reshape(-1, len(out))
    o_flat = np.arange(len(o_grid))
    w_index = np.arange(n_w).reshape(w_shape)
    for offs in itertools.product(*(range(k) for k in kernel)):
        pos = o_grid * np.array(stride) - np.array(padding) + np.array(offs)
        ok = np.all((pos >= 0) & (pos < np.array(in_shape[1:])), axis=1)
        in_sp = np.ravel_multi_index(tuple(pos[ok].T), in_shape[1:])
        for ci in range(c_in):
            rows = ci * int(np.prod(in_shape[1:])) + in_sp
            for co in range(c_out):
                idx[rows, co * len(o_grid) + o_flat[ok]] = w_index[(co, ci) + offs]
    idx.flags.writeable = False
    return idx, out


def _convnd_dense(x, weight, stride, padding):
    n = x.shape[0]
    idx, out = _dense_index(tuple(x.shape[1:]), tuple(weight.shape), stride, padding)
    mat = np.append(weight.data.ravel(), 0).astype(weight.dtype)[idx]
    xf = x.data.reshape(n, -1)
    y = (xf @ mat).reshape((n, weight.shape[0]) + tuple(out))

    def bw(g):
        gf = g.reshape(n, -1)
        gx = (gf @ mat.T).reshape(x.shape) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gm = xf.T @ gf
            gw = np.bincount(idx.ravel(), weights=gm.ravel(), minlength=weight.size + 1)[:-1]
            gw = gw.reshape(weight.shape).astype(weight.dtype)
        return gx, gw

    return y, bw


def _convnd(x, weight, bias, stride, padding, names):
    x = _as_tensor(x)
    nd = len(names)
    stride, padding = _tuple(stride, nd), _tuple(padding, nd)
    _check_conv(x.shape, weight.shape, stride, padding, names)
    out = conv_output_shape(x.shape[2:], weight.shape[2:], stride, padding)
    n_in, n_out = int(np.prod(x.shape[1:])), weight.shape[0] * int(np.prod(out))
    if n_in * n_out <= DENSE_LIMIT:
        y, dense_bw = _convnd_dense(x, weight, stride, padding)
        if bias is not None:
            y = y + bias.data.reshape((1, -1) + (1,) * nd)

        def bw_dense(g):
            gx, gw = dense_bw(g)
            if bias is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0,) + tuple(range(2, 2 + nd)))

        parents = (x, weight) if bias is None else (x, weight, bias)
        return Tensor._from_op(y, parents, bw_dense)
    y, cols, _ = _conv_fwd(x.data, weight.data, stride, padding)
    bshape = (1, -1) + (1,) * nd
    if bias is not None:
        y = y + bias.data.reshape(bshape)

    def bw(g):
        gx = _conv_input_grad(g, weight.data, x.shape, stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(g, cols, weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0,) + tuple(range(2, 2 + nd)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(y, parents, bw)


def conv3d(x, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation over (depth, height, width); x is (N, Cin, D, H, W), weight (Cout, Cin, kd, kh, kw)."""
    return _convnd(x, weight, bias, stride, padding, ("depth", "height", "width"))


def conv2d(x, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    return _convnd(x, weight, bias, stride, padding, ("height", "width"))


def conv_transpose_output_shape(size, kernel, stride, padding):
    return tuple((s - 1) * st - 2 * p + k for s, k, st, p in zip(size, kernel, stride, padding))


def conv2d_transposed(x, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Transposed 2D convolution, the adjoint of :func:`conv2d` in its input.

    ``weight`` has shape (Cin, Cout, kh, kw); the output spatial size per
    axis is ``(in - 1) * stride - 2 * padding + k``.
    """
    x = _as_tensor(x)
    stride, padding = _tuple(stride, 2), _tuple(padding, 2)
    if x.ndim != 4:
        raise ValueError(f"input must have 4 dims (N, C, height, width), got {x.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"channel axis mismatch: input has {x.shape[1]}, weight expects {weight.shape[0]}")
    out_sp = conv_transpose_output_shape(x.shape[2:], weight.shape[2:], stride, padding)
    for name, o in zip(("height", "width"), out_sp):
        if o < 1:
            raise ValueError(f"transposed conv produces empty output along axis {name}")
    y_shape = (x.shape[0], weight.shape[1]) + out_sp
    y = _conv_input_grad(x.data, weight.data, y_shape, stride, padding)
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gx, _, _ = _conv_fwd(g, weight.data, stride, padding)
        if weight.requires_grad:
            out = x.shape[2:]
            cols = _im2col(_pad_last(_channels_last(g), padding), weight.shape[2:], stride, out)
            gw = _conv_weight_grad(x.data, cols, weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(y, parents, bw)


# -- dense layers ---------------------------------------------------------
def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    x = _as_tensor(x)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"feature axis mismatch: input has {x.shape[-1]}, weight expects {weight.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[1])
    y = x2 @ weight.data.T
    if bias is not None:
        y = y + bias.data

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(y.reshape(lead + (weight.shape[0],)), parents, bw)


def layer_norm(x, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    n = x.shape[-1]

    def bw(g):
        red = tuple(range(g.ndim - 1))
        gg = g * gamma.data if gamma is not None else g
        gx = inv / n * (n * gg - gg.sum(-1, keepdims=True) - xhat * (gg * xhat).sum(-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    return Tensor._from_op(y.astype(x.dtype, copy=False), parents, bw)


# -- activations ----------------------------------------------------------
def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = (x.data * cdf).astype(x.dtype)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return Tensor._from_op(out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("softmax over a zero-length axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over a zero-length axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), bw)


def max_pool_over_axis(x, axis: int) -> Tensor:
    """Max across an entire axis (the axis is removed)."""
    return _as_tensor(x).max(axis)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    x = _as_tensor(x)
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = _as_tensor(x)
    norm = (tsum(x * x, axis=axis, keepdims=True) + eps).sqrt()
    return x / norm


# -- attention ------------------------------------------------------------
def multi_head_attention(q, k, v, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention split across ``heads``.

    q is (N, Lq, model_dim); k and v are (N, Lk, model_dim). Projections
    are the caller's job. ``mask`` (broadcastable to N, heads, Lq, Lk) is
    True where attention is allowed.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    n, lq, dim = q.shape
    lk = k.shape[1]
    if dim % heads:
        raise ValueError(f"model_dim {dim} is not divisible by heads {heads}")
    hd = dim // heads
    qh = q.reshape(n, lq, heads, hd).transpose(0, 2, 1, 3)
    kh = k.reshape(n, lk, heads, hd).transpose(0, 2, 3, 1)
    vh = v.reshape(n, lk, heads, hd).transpose(0, 2, 1, 3)
    scores = matmul(qh, kh) * (1.0 / np.sqrt(hd))
    if mask is not None:
        scores = where(mask, scores, np.asarray(-1e9, dtype=scores.dtype))
    attn = softmax(scores, axis=-1)
    out = matmul(attn, vh)
    return out.transpose(0, 2, 1, 3).reshape(n, lq, dim)


# -- losses ---------------------------------------------------------------
def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss, quadratic below ``beta`` and linear above."""
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred.dtype)
    d = pred.data - target.data
    ad = np.abs(d)
    quad = ad < beta
    val = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    out = np.asarray(val.mean(), dtype=pred.dtype)
    n = d.size

    def bw(g):
        gd = np.where(quad, d / beta, np.sign(d)) * (g / n)
        return gd.astype(pred.dtype), (-gd).astype(pred.dtype)

    return Tensor._from_op(out, (pred, target), bw)


def cross_entropy(logits, targets, weights=None, class_weights=None) -> Tensor:
    """Mean cross-entropy over the leading axes of ``logits`` (..., C).

    ``weights`` scales each item; ``class_weights`` scales by target class.
    The mean divides by the summed weights, as in weighted CE.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    c = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target id outside [0, {c})")
    lp = log_softmax(logits, axis=-1).reshape(-1, c)
    flat = targets.reshape(-1)
    picked = lp[np.arange(flat.size), flat]
    w = np.ones(flat.size, dtype=logits.dtype)
    if weights is not None:
        w = w * np.asarray(weights, dtype=logits.dtype).reshape(-1)
    if class_weights is not None:
        w = w * np.asarray(class_weights, dtype=logits.dtype)[flat]
    return -(picked * w).sum() / float(w.sum())


def kl_to_uniform(logits, axis: int = -1) -> Tensor:
    """KL(softmax(logits) || Uniform) per row."""
    logits = _as_tensor(logits)
    t = logits.shape[axis]
    lp = log_softmax(logits, axis=axis)
    p = softmax(logits, axis=axis)
    # log t in the logits' dtype matches log_softmax's own log-sum-exp, so a uniform row gives exactly 0
    return tsum(p * (lp + np.log(np.asarray(t, dtype=lp.dtype))), axis=axis)
