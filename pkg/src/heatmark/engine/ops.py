"""The primitive vocabulary of the autodiff engine.

Every function takes/returns ``Tensor`` objects, computes its forward
result with numpy, and registers a backward closure on the active tape.
Spatial primitives use channels-last layout ``[B, H, W, C]``; convolution
weights are ``[kh, kw, Cin, Cout]``.

Dropout and additive noise take an explicit ``mode`` flag and a generator;
in eval mode both are exact identities (the input tensor is returned
unchanged).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from heatmark.engine.tensor import Tensor, as_tensor, record
from heatmark.errors import NumericError, ShapeError

TRAIN = "train"
EVAL = "eval"

# GEMM over an im2col matrix beats per-tap GEMMs once the contraction is
# fat enough; below this input width the per-tap path is faster and
# allocates far less.
_IM2COL_MIN_CIN = 64
# forward-pass col matrices up to this size are kept for the backward pass
_COL_CACHE_MAX_BYTES = 400 << 20


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(name, fwd, bwd_a, bwd_b):
    def op(a, b):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
        b = as_tensor(b, like=a)
        try:
            out = fwd(a.data, b.data)
        except ValueError as exc:
            raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from exc

        def backward(g):
            ga = _unbroadcast(bwd_a(g, a.data, b.data), a.data.shape)
            gb = _unbroadcast(bwd_b(g, a.data, b.data), b.data.shape)
            return ga, gb

        return record(name, [a, b], out, backward)

    op.__name__ = name
    return op


add = _binary("add", lambda a, b: a + b, lambda g, a, b: g, lambda g, a, b: g)
sub = _binary("sub", lambda a, b: a - b, lambda g, a, b: g, lambda g, a, b: -g)
mul = _binary("mul", lambda a, b: a * b, lambda g, a, b: g * b, lambda g, a, b: g * a)
div = _binary(
    "div",
    lambda a, b: a / b,
    lambda g, a, b: g / b,
    lambda g, a, b: -g * a / (b * b),
)


def _unary(name, fwd, bwd, check=None):
    def op(x):
        x = as_tensor(x)
        if check is not None:
            check(x.data)
        out = fwd(x.data)

        def backward(g):
            return (bwd(g, x.data, out),)

        return record(name, [x], out, backward)

    op.__name__ = name
    return op


def _check_log_domain(a):
    if a.size and np.min(a) <= 0.0:
        raise NumericError("log: input has non-positive entries")


def _check_sqrt_domain(a):
    if a.size and np.min(a) < 0.0:
        raise NumericError("sqrt: input has negative entries")


neg = _unary("neg", lambda a: -a, lambda g, a, y: -g)
exp = _unary("exp", np.exp, lambda g, a, y: g * y)
log = _unary("log", np.log, lambda g, a, y: g / a, check=_check_log_domain)
abs_ = _unary("abs", np.abs, lambda g, a, y: g * np.sign(a))
sqrt = _unary("sqrt", np.sqrt, lambda g, a, y: g * (0.5 / y), check=_check_sqrt_domain)
square = _unary("square", np.square, lambda g, a, y: g * (2.0 * a))


def _sigmoid_fwd(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


sigmoid = _unary("sigmoid", _sigmoid_fwd, lambda g, a, y: g * y * (1.0 - y))


def leaky_relu(x, slope: float = 0.2):
    x = as_tensor(x)
    s = x.data.dtype.type(slope)
    neg_mask = x.data < 0
    out = x.data.copy()
    out[neg_mask] *= s

    def backward(g):
        dx = g.copy()
        dx[neg_mask] *= s
        return (dx,)

    return record("leaky_relu", [x], out, backward)


def clip_min(x, floor: float):
    """Elementwise max(x, floor); gradient passes only where x > floor."""
    x = as_tensor(x)
    out = np.maximum(x.data, x.data.dtype.type(floor))

    def backward(g):
        return (g * (x.data > floor),)

    return record("clip_min", [x], out, backward)


# -- reductions ------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, x.data.shape).copy(),)

    return record("sum", [x], out, backward)


def mean(x, axis=None, keepdims: bool = False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk / count, x.data.shape).astype(x.data.dtype),)

    return record("mean", [x], out, backward)


# -- structural ops --------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def backward(g):
        return (g.reshape(x.data.shape),)

    return record("reshape", [x], out, backward)


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return record("transpose", [x], out, backward)


def concat(tensors: Sequence, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return record("concat", tensors, out, backward)


def stack(tensors: Sequence, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack: need at least one tensor")
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from exc

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(np.ascontiguousarray(moved[i]) for i in range(len(tensors)))

    return record("stack", tensors, out, backward)


def take(x, indices, axis: int = 0):
    """Gather slices along ``axis``; backward scatter-adds (repeats allowed)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise ShapeError(f"take: indices out of range for axis {axis} of {x.shape}")
    out = np.take(x.data, idx, axis=axis)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(dx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (dx,)

    return record("take", [x], out, backward)


# -- spatial primitives ----------------------------------------------------


def spatial_softmax(x, beta: float = 1.0):
    """Softmax of ``beta * x`` over the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"spatial_softmax: need >=2 dims, got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("spatial_softmax: non-finite input")
    b = x.data.dtype.type(beta)
    z = x.data * b
    z = z - z.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=(-2, -1), keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=(-2, -1), keepdims=True)
        return (b * out * (g - inner),)

    return record("spatial_softmax", [x], out, backward)


def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0):
    """2-D correlation, channels-last: x [B,H,W,Ci], w [kh,kw,Ci,Co]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/weight, got {x.shape} and {w.shape}")
    B, H, W, Ci = x.shape
    kh, kw, wci, Co = w.shape
    if wci != Ci:
        raise ShapeError(f"conv2d: input has {Ci} channels, weight expects {wci}")
    Ho = _conv_out_size(H, kh, stride, padding)
    Wo = _conv_out_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: output would be empty for input {x.shape}, kernel {w.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Co,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({Co},)")

    if padding:
        xp = np.zeros((B, H + 2 * padding, W + 2 * padding, Ci), dtype=x.data.dtype)
        xp[:, padding : padding + H, padding : padding + W, :] = x.data
    else:
        xp = x.data

    n = B * Ho * Wo
    kkc = kh * kw * Ci
    wmat = w.data.reshape(kkc, Co)

    if kh == kw == 1 and stride == 1 and padding == 0:
        # pointwise: plain GEMM, no padding buffer or taps
        x2 = x.data.reshape(n, Ci)
        out2 = x2 @ wmat
        if bias is not None:
            out2 += bias.data
        out = out2.reshape(B, Ho, Wo, Co)

        def backward(g):
            g2 = g.reshape(n, Co)
            dw = (x2.T @ g2).reshape(w.data.shape)
            dx = (g2 @ wmat.T).reshape(x.data.shape)
            grads = [dx, dw]
            if bias is not None:
                grads.append(g2.sum(axis=0))
            return tuple(grads)

        inputs = [x, w] if bias is None else [x, w, bias]
        return record("conv2d", inputs, out, backward)

    wide = Ci >= _IM2COL_MIN_CIN
    slices: Optional[list[np.ndarray]] = None
    col = None
    if wide:
        col = _im2col(xp, kh, kw, stride, Ho, Wo)
        out2 = col @ wmat
        if col.nbytes > _COL_CACHE_MAX_BYTES:
            col = None
    else:
        out2 = np.zeros((n, Co), dtype=x.data.dtype)
        cache_ok = n * kkc * x.data.itemsize <= _COL_CACHE_MAX_BYTES
        slices = [] if cache_ok else None
        for i in range(kh):
            for j in range(kw):
                flat = np.ascontiguousarray(
                    xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
                ).reshape(n, Ci)
                if slices is not None:
                    slices.append(flat)
                out2 += flat @ w.data[i, j]
    if bias is not None:
        out2 += bias.data
    out = out2.reshape(B, Ho, Wo, Co)

    def backward(g):
        g2 = g.reshape(n, Co)
        dxp = np.zeros_like(xp)
        if wide:
            # fat single GEMMs over the (possibly rebuilt) col matrix
            colb = col if col is not None else _im2col(xp, kh, kw, stride, Ho, Wo)
            dw = (colb.T @ g2).reshape(w.data.shape)
            dcol = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, Ci)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += dcol[
                        :, :, :, i, j, :
                    ]
        else:
            # thin channels: per-tap GEMMs accumulate the input gradient
            # directly, avoiding a huge dcol intermediate
            dw = np.empty_like(w.data)
            for t, (i, j) in enumerate((i, j) for i in range(kh) for j in range(kw)):
                if slices is not None:
                    flat = slices[t]
                else:
                    flat = np.ascontiguousarray(
                        xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
                    ).reshape(n, Ci)
                dw[i, j] = flat.T @ g2
                dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += (
                    g2 @ w.data[i, j].T
                ).reshape(B, Ho, Wo, Ci)
        dx = dxp[:, padding : padding + H, padding : padding + W, :] if padding else dxp
        grads = [np.ascontiguousarray(dx), dw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    inputs = [x, w] if bias is None else [x, w, bias]
    return record("conv2d", inputs, out, backward)


def _im2col(xp, kh, kw, stride, Ho, Wo):
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # layout [B,Ho,Wo,(kh,kw,Ci)] so the contraction matches w.reshape(kh*kw*Ci, Co)
    col = np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3))
    return col.reshape(xp.shape[0] * Ho * Wo, kh * kw * xp.shape[3])


def max_pool2d(x, stride: int = 2):
    """2x2 max pooling, stride 2; ties route the gradient to the first max."""
    x = as_tensor(x)
    if stride != 2:
        raise ShapeError("max_pool2d: only stride 2 is supported")
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected [B,H,W,C], got {x.shape}")
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2d: spatial size {H}x{W} not divisible by 2")
    H2, W2 = H // 2, W // 2
    win = x.data.reshape(B, H2, 2, W2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H2, W2, C, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = (
            dwin.reshape(B, H2, W2, C, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(B, H, W, C)
        )
        return (np.ascontiguousarray(dx),)

    return record("max_pool2d", [x], out, backward)


_UPSAMPLE_MATS: dict[tuple[int, str], np.ndarray] = {}


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Row-stochastic [2n, n] matrix for 2x bilinear interpolation.

    Sample positions follow the half-pixel (align-corners-false)
    convention, clamped at the borders.
    """
    key = (n, np.dtype(dtype).name)
    m = _UPSAMPLE_MATS.get(key)
    if m is None:
        m = np.zeros((2 * n, n), dtype=dtype)
        for i in range(2 * n):
            u = (i + 0.5) / 2.0 - 0.5
            u = min(max(u, 0.0), n - 1.0)
            i0 = int(np.floor(u))
            i1 = min(i0 + 1, n - 1)
            f = u - i0
            m[i, i0] += 1.0 - f
            m[i, i1] += f
        _UPSAMPLE_MATS[key] = m
    return m


def upsample_bilinear2x(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear2x: expected [B,H,W,C], got {x.shape}")
    B, H, W, C = x.shape
    mh = _upsample_matrix(H, x.data.dtype)
    mw = _upsample_matrix(W, x.data.dtype)

    def apply_pair(a, mh_, mw_):
        t = np.tensordot(mh_, a, axes=(1, 1))  # [H', B, W, C]
        t = np.moveaxis(t, 0, 1)
        t = np.tensordot(mw_, t, axes=(1, 2))  # [W', B, H', C]
        return np.ascontiguousarray(np.moveaxis(t, 0, 2))

    out = apply_pair(x.data, mh, mw)

    def backward(g):
        return (apply_pair(g, mh.T, mw.T),)

    return record("upsample_bilinear2x", [x], out, backward)


def dropout(x, p: float, mode: str, rng: Optional[np.random.Generator] = None):
    """Inverted dropout; identity in eval mode."""
    x = as_tensor(x)
    if mode == EVAL or p == 0.0:
        return x
    if rng is None:
        raise ShapeError("dropout: train mode requires an RNG stream")
    keep = x.data.dtype.type(1.0 - p)
    draw_dtype = np.float32 if x.data.dtype == np.float32 else np.float64
    mask = (rng.random(x.shape, dtype=draw_dtype) >= p).astype(x.data.dtype) / keep
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return record("dropout", [x], out, backward)


def gaussian_noise(x, sigma: float, mode: str, rng: Optional[np.random.Generator] = None):
    """Additive zero-mean Gaussian noise; identity in eval mode."""
    x = as_tensor(x)
    if mode == EVAL or sigma == 0.0:
        return x
    if rng is None:
        raise ShapeError("gaussian_noise: train mode requires an RNG stream")
    draw_dtype = np.float32 if x.data.dtype == np.float32 else np.float64
    noise = rng.standard_normal(x.shape, dtype=draw_dtype).astype(x.data.dtype, copy=False)
    out = x.data + noise * x.data.dtype.type(sigma)

    def backward(g):
        return (g,)

    return record("gaussian_noise", [x], out, backward)


class BatchNormState:
    """Running statistics buffer for one batch-norm site."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(x, gamma, beta, state: BatchNormState, mode: str, momentum: float = 0.9, eps: float = 1e-5):
    """Per-channel batch norm over [B,H,W,C]; running averages in eval mode."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: expected [B,H,W,C], got {x.shape}")
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: gain/bias must be ({C},)")
    dt = x.data.dtype

    if mode == TRAIN:
        axes = (0, 1, 2)
        n = x.data.size // C
        mu = x.data.mean(axis=axes)
        xc = x.data - mu
        var = np.mean(xc * xc, axis=axes)
        ivar = 1.0 / np.sqrt(var + dt.type(eps))
        xhat = xc * ivar
        state.mean[:] = momentum * state.mean + (1.0 - momentum) * mu
        state.var[:] = momentum * state.var + (1.0 - momentum) * var

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=axes)
            s2 = (dxhat * xhat).sum(axis=axes)
            dx = (ivar / n) * (n * dxhat - s1 - xhat * s2)
            return dx.astype(dt), dgamma, dbeta

    else:
        ivar = 1.0 / np.sqrt(state.var + dt.type(eps))
        xhat = (x.data - state.mean) * ivar

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 1, 2))
            dbeta = g.sum(axis=(0, 1, 2))
            dx = g * (gamma.data * ivar)
            return dx.astype(dt), dgamma, dbeta

    out = xhat * gamma.data + beta.data
    return record("batch_norm", [x, gamma, beta], out.astype(dt), backward)


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "abs": abs_,
    "sqrt": sqrt,
    "square": square,
    "sigmoid": sigmoid,
    "leaky_relu": leaky_relu,
    "clip_min": clip_min,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "stack": stack,
    "take": take,
    "spatial_softmax": spatial_softmax,
    "conv2d": conv2d,
    "max_pool2d": max_pool2d,
    "upsample_bilinear2x": upsample_bilinear2x,
    "dropout": dropout,
    "gaussian_noise": gaussian_noise,
    "batch_norm": batch_norm,
}
