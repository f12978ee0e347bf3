"""Differentiable primitives.

Arrays are float64 throughout. Convolutions are cross-correlations (no kernel
flip) on NCW / NCHW layouts.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DimensionError
from .tensor import Primitive, Tensor, apply, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def _add_fwd(a, b):
    _check_broadcast(a, b, "add")
    return a + b, None


def _add_bwd(g, saved, arrays, attrs):
    a, b = arrays
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _check_broadcast(a, b, "sub")
    return a - b, None


def _sub_bwd(g, saved, arrays, attrs):
    a, b = arrays
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _mul_fwd(a, b):
    _check_broadcast(a, b, "mul")
    return a * b, None


def _mul_bwd(g, saved, arrays, attrs):
    a, b = arrays
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(a, *, factor):
    return a * factor, None


def _scale_bwd(g, saved, arrays, attrs):
    return (g * attrs["factor"],)


def _exp_fwd(a):
    out = np.exp(a)
    return out, out


def _exp_bwd(g, saved, arrays, attrs):
    return (g * saved,)


def _square_fwd(a):
    return a * a, None


def _square_bwd(g, saved, arrays, attrs):
    return (2.0 * arrays[0] * g,)


def _clip_fwd(a, *, lo, hi):
    return np.clip(a, lo, hi), None


def _clip_bwd(g, saved, arrays, attrs):
    a = arrays[0]
    inside = (a > attrs["lo"]) & (a < attrs["hi"])
    return (g * inside,)


ADD = Primitive("add", _add_fwd, _add_bwd)
SUB = Primitive("sub", _sub_fwd, _sub_bwd)
MUL = Primitive("mul", _mul_fwd, _mul_bwd)
SCALE = Primitive("scale", _scale_fwd, _scale_bwd)
EXP = Primitive("exp", _exp_fwd, _exp_bwd)
SQUARE = Primitive("square", _square_fwd, _square_bwd)
CLIP = Primitive("clip", _clip_fwd, _clip_bwd)


def add(a, b) -> Tensor:
    return apply(ADD, (a, b))


def sub(a, b) -> Tensor:
    return apply(SUB, (a, b))


def mul(a, b) -> Tensor:
    return apply(MUL, (a, b))


def scale(a, factor: float) -> Tensor:
    return apply(SCALE, (a,), factor=float(factor))


def exp(a) -> Tensor:
    return apply(EXP, (a,))


def square(a) -> Tensor:
    return apply(SQUARE, (a,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    return apply(CLIP, (a,), lo=float(lo), hi=float(hi))


# ---------------------------------------------------------------- activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _act_fwd(a, *, kind):
    if kind == "relu":
        out = np.maximum(a, 0.0)
    elif kind == "tanh":
        out = np.tanh(a)
    elif kind == "sigmoid":
        out = _sigmoid(a)
    else:
        raise ConfigurationError(f"unknown activation {kind!r}")
    return out, out


def _act_bwd(g, out, arrays, attrs):
    kind = attrs["kind"]
    if kind == "relu":
        # subgradient at 0 is 0
        return (g * (arrays[0] > 0.0),)
    if kind == "tanh":
        return (g * (1.0 - out * out),)
    return (g * out * (1.0 - out),)


ACTIVATION = Primitive("activation", _act_fwd, _act_bwd)


def activation(a, kind: str) -> Tensor:
    return apply(ACTIVATION, (a,), kind=kind)


def relu(a) -> Tensor:
    return activation(a, "relu")


def tanh(a) -> Tensor:
    return activation(a, "tanh")


def sigmoid(a) -> Tensor:
    return activation(a, "sigmoid")


# ---------------------------------------------------------------- reductions and shape


def _sum_fwd(a, *, axis, keepdims):
    return np.sum(a, axis=axis, keepdims=keepdims), None


def _sum_bwd(g, saved, arrays, attrs):
    a = arrays[0]
    axis = attrs["axis"]
    if axis is not None and not attrs["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _reshape_fwd(a, *, shape):
    try:
        return a.reshape(shape), None
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None


def _reshape_bwd(g, saved, arrays, attrs):
    return (g.reshape(arrays[0].shape),)


def _concat_fwd(*arrays, axis):
    try:
        return np.concatenate(arrays, axis=axis), None
    except ValueError:
        shapes = [a.shape for a in arrays]
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None


def _concat_bwd(g, saved, arrays, attrs):
    cuts = np.cumsum([a.shape[attrs["axis"]] for a in arrays])[:-1]
    return tuple(np.split(g, cuts, axis=attrs["axis"]))


def _take_fwd(a, *, index):
    return a[index], None


def _take_bwd(g, saved, arrays, attrs):
    out = np.zeros_like(arrays[0])
    np.add.at(out, attrs["index"], g)
    return (out,)


SUM = Primitive("sum", _sum_fwd, _sum_bwd)
RESHAPE = Primitive("reshape", _reshape_fwd, _reshape_bwd)
CONCAT = Primitive("concat", _concat_fwd, _concat_bwd)
TAKE = Primitive("take", _take_fwd, _take_bwd)


def sum(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply(SUM, (a,), axis=axis, keepdims=keepdims)


def mean(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return apply(RESHAPE, (a,), shape=tuple(shape))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    return apply(CONCAT, tuple(tensors), axis=axis)


def take(a, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    return apply(TAKE, (a,), index=index)


# ---------------------------------------------------------------- dense


def _dense_fwd(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(
            f"dense: input {x.shape} and weight {w.shape} (bias {b.shape}) do not conform"
        )
    return x @ w + b, None


def _dense_bwd(g, saved, arrays, attrs):
    x, w, _ = arrays
    return g @ w.T, x.T @ g, g.sum(axis=0)


DENSE = Primitive("dense", _dense_fwd, _dense_bwd)


def dense(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for x of shape (b, p), weight (p, q), bias (q,)."""
    return apply(DENSE, (x, weight, bias))


# ---------------------------------------------------------------- convolution


def _conv1d_fwd(x, k, *bias, stride, padding):
    if x.ndim != 3 or k.ndim != 3 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} and kernel {k.shape} do not conform")
    if stride < 1:
        raise ConfigurationError("conv1d: stride must be >= 1")
    n, cin, w = x.shape
    cout, _, kw = k.shape
    if kw > w + 2 * padding:
        raise DimensionError(f"conv1d: kernel width {kw} exceeds padded input width {w + 2 * padding}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    wout = (w + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, kw, axis=2)[:, :, ::stride][:, :, :wout]  # n, cin, wout, kw
    cols = win.transpose(0, 2, 1, 3).reshape(n * wout, cin * kw)
    out = cols @ k.reshape(cout, cin * kw).T
    if bias:
        out = out + bias[0]
    out = out.reshape(n, wout, cout).transpose(0, 2, 1)
    return np.ascontiguousarray(out), cols


def _conv1d_bwd(g, cols, arrays, attrs):
    x, k = arrays[0], arrays[1]
    stride, padding = attrs["stride"], attrs["padding"]
    n, cin, w = x.shape
    cout, _, kw = k.shape
    wout = g.shape[2]
    g2 = g.transpose(0, 2, 1).reshape(n * wout, cout)
    dk = (g2.T @ cols).reshape(k.shape)
    dcols = (g2 @ k.reshape(cout, cin * kw)).reshape(n, wout, cin, kw)
    dxp = np.zeros((n, cin, w + 2 * padding))
    span = stride * (wout - 1) + 1
    for j in range(kw):
        dxp[:, :, j : j + span : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
    dx = dxp[:, :, padding : padding + w] if padding else dxp
    grads = [dx, dk]
    if len(arrays) == 3:
        grads.append(g2.sum(axis=0))
    return grads


def _conv2d_fwd(x, k, *bias, stride, padding):
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1] or k.shape[2] != k.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {k.shape} do not conform")
    if stride < 1:
        raise ConfigurationError("conv2d: stride must be >= 1")
    n, cin, h, w = x.shape
    cout, _, kk, _ = k.shape
    if kk > h + 2 * padding or kk > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kk}x{kk} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    hout = (h + 2 * padding - kk) // stride + 1
    wout = (w + 2 * padding - kk) // stride + 1
    win = sliding_window_view(xp, (kk, kk), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :hout, :wout]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * hout * wout, cin * kk * kk)
    out = cols @ k.reshape(cout, -1).T
    if bias:
        out = out + bias[0]
    out = out.reshape(n, hout, wout, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv2d_bwd(g, cols, arrays, attrs):
    x, k = arrays[0], arrays[1]
    stride, padding = attrs["stride"], attrs["padding"]
    n, cin, h, w = x.shape
    cout, _, kk, _ = k.shape
    hout, wout = g.shape[2], g.shape[3]
    g2 = g.transpose(0, 2, 3, 1).reshape(n * hout * wout, cout)
    dk = (g2.T @ cols).reshape(k.shape)
    dcols = (g2 @ k.reshape(cout, -1)).reshape(n, hout, wout, cin, kk, kk)
    dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
    hspan = stride * (hout - 1) + 1
    wspan = stride * (wout - 1) + 1
    for a in range(kk):
        for b in range(kk):
            dxp[:, :, a : a + hspan : stride, b : b + wspan : stride] += dcols[..., a, b].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
    grads = [dx, dk]
    if len(arrays) == 3:
        grads.append(g2.sum(axis=0))
    return grads


CONV1D = Primitive("conv1d", _conv1d_fwd, _conv1d_bwd)
CONV2D = Primitive("conv2d", _conv2d_fwd, _conv2d_bwd)


def conv1d(x, kernel, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Cross-correlate (b, c_in, w) with kernel (c_out, c_in, k)."""
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return apply(CONV1D, inputs, stride=int(stride), padding=int(padding))


def conv2d(x, kernel, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Cross-correlate (b, c_in, h, w) with kernel (c_out, c_in, k, k)."""
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return apply(CONV2D, inputs, stride=int(stride), padding=int(padding))


def _upsample_fwd(x, *, factor):
    out = x
    for axis in range(2, x.ndim):
        out = np.repeat(out, factor, axis=axis)
    return out, None


def _upsample_bwd(g, saved, arrays, attrs):
    x = arrays[0]
    f = attrs["factor"]
    shape = list(x.shape[:2])
    for s in x.shape[2:]:
        shape += [s, f]
    g = g.reshape(shape)
    return (g.sum(axis=tuple(range(3, len(shape), 2))),)


UPSAMPLE = Primitive("upsample", _upsample_fwd, _upsample_bwd)


def upsample(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of every spatial axis (axes 2 and up)."""
    return apply(UPSAMPLE, (x,), factor=int(factor))


# ---------------------------------------------------------------- group norm


def _gn_fwd(x, gamma, beta, *, groups, eps):
    n, c = x.shape[:2]
    if c % groups:
        raise ConfigurationError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm: affine shapes {gamma.shape}, {beta.shape} for {c} channels")
    xg = x.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out, (xhat, inv)


def _gn_bwd(g, saved, arrays, attrs):
    x, gamma, _ = arrays
    xhat, inv = saved
    n, c = x.shape[:2]
    groups = attrs["groups"]
    red = (0,) + tuple(range(2, x.ndim))
    dgamma = (g * xhat).sum(axis=red)
    dbeta = g.sum(axis=red)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    dxhat = (g * gamma.reshape(bshape)).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    m = dxhat.shape[2]
    dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).sum(axis=2, keepdims=True) / m)
    return dx.reshape(x.shape), dgamma, dbeta


GROUP_NORM = Primitive("group_norm", _gn_fwd, _gn_bwd)


def group_norm(x, groups: int, gamma, beta_shift, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group standardisation followed by a channel affine map."""
    if eps <= 0:
        raise ConfigurationError("group_norm: eps must be positive")
    return apply(GROUP_NORM, (x, gamma, beta_shift), groups=int(groups), eps=float(eps))


# ---------------------------------------------------------------- LSTM

# Gate layout along the 4q axis: input, forget, candidate, output.


def _lstm_gates(x, h, w_ih, w_hh, b):
    q = h.shape[1]
    z = x @ w_ih + h @ w_hh + b
    i = _sigmoid(z[:, :q])
    f = _sigmoid(z[:, q : 2 * q])
    gg = np.tanh(z[:, 2 * q : 3 * q])
    o = _sigmoid(z[:, 3 * q :])
    return i, f, gg, o


def _check_lstm(x, h, c, w_ih, w_hh, b):
    q = h.shape[-1]
    ok = (
        w_ih.ndim == 2
        and w_hh.shape == (q, 4 * q)
        and b.shape == (4 * q,)
        and x.shape[-1] == w_ih.shape[0]
        and w_ih.shape[1] == 4 * q
        and c.shape == h.shape
        and x.shape[0] == h.shape[0]
    )
    if not ok:
        raise DimensionError(
            f"lstm: x {x.shape}, h {h.shape}, c {c.shape}, W_ih {w_ih.shape}, W_hh {w_hh.shape}, b {b.shape}"
        )


def _lstm_cell_fwd(x, h, c, w_ih, w_hh, b):
    _check_lstm(x, h, c, w_ih, w_hh, b)
    i, f, gg, o = _lstm_gates(x, h, w_ih, w_hh, b)
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    return (o * tc, c_new), (i, f, gg, o, tc)


def _lstm_cell_bwd(gout, saved, arrays, attrs):
    x, h, c, w_ih, w_hh, _ = arrays
    gh, gc = gout
    i, f, gg, o, tc = saved
    do = gh * tc
    dc = gc + gh * o * (1.0 - tc * tc)
    di = dc * gg
    df = dc * c
    dg = dc * i
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - gg * gg), do * o * (1 - o)], axis=1)
    return dz @ w_ih.T, dz @ w_hh.T, dc * f, x.T @ dz, h.T @ dz, dz.sum(axis=0)


LSTM_CELL = Primitive("lstm_cell", _lstm_cell_fwd, _lstm_cell_bwd, n_out=2)


def lstm_cell(x, h, c, w_ih, w_hh, b) -> tuple[Tensor, Tensor]:
    """One LSTM step. Returns ``(h_next, c_next)``."""
    return apply(LSTM_CELL, (x, h, c, w_ih, w_hh, b))


def _lstm_seq_fwd(xs, h0, c0, w_ih, w_hh, b):
    if xs.ndim != 3:
        raise DimensionError(f"lstm_sequence: expected (batch, time, features), got {xs.shape}")
    _check_lstm(xs[:, 0], h0, c0, w_ih, w_hh, b)
    steps = xs.shape[1]
    h, c = h0, c0
    hs = np.empty((xs.shape[0], steps, h0.shape[1]))
    cache = []
    for s in range(steps):
        i, f, gg, o = _lstm_gates(xs[:, s], h, w_ih, w_hh, b)
        c_prev, h_prev = c, h
        c = f * c + i * gg
        tc = np.tanh(c)
        h = o * tc
        hs[:, s] = h
        cache.append((i, f, gg, o, tc, c_prev, h_prev))
    return (hs, h, c), cache


def _lstm_seq_bwd(gout, cache, arrays, attrs):
    xs, _, _, w_ih, w_hh, b = arrays
    ghs, gh_last, gc_last = gout
    dxs = np.zeros_like(xs)
    dw_ih = np.zeros_like(w_ih)
    dw_hh = np.zeros_like(w_hh)
    db = np.zeros_like(b)
    dh = gh_last.copy()
    dc = gc_last.copy()
    for s in range(xs.shape[1] - 1, -1, -1):
        i, f, gg, o, tc, c_prev, h_prev = cache[s]
        dh = dh + ghs[:, s]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [dc * gg * i * (1 - i), dc * c_prev * f * (1 - f), dc * i * (1 - gg * gg), do * o * (1 - o)], axis=1
        )
        dxs[:, s] = dz @ w_ih.T
        dw_ih += xs[:, s].T @ dz
        dw_hh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dh = dz @ w_hh.T
        dc = dc * f
    return dxs, dh, dc, dw_ih, dw_hh, db


LSTM_SEQUENCE = Primitive("lstm_sequence", _lstm_seq_fwd, _lstm_seq_bwd, n_out=3)


def lstm_sequence(xs, h0, c0, w_ih, w_hh, b) -> tuple[Tensor, Tensor, Tensor]:
    """Run an LSTM layer over a (batch, time, features) sequence as one fused op.

    Returns ``(hidden states for every step, final h, final c)``.
    """
    return apply(LSTM_SEQUENCE, (xs, h0, c0, w_ih, w_hh, b))


# ---------------------------------------------------------------- composites


def mse(pred, target) -> Tensor:
    """Mean of squared differences over every element."""
    return mean(square(sub(pred, target)))
