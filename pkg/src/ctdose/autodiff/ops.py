"""Differentiable primitives.

Image tensors are laid out ``(batch, channels, height, width)``.  Each
primitive computes its value with numpy and registers a closure that maps
the upstream gradient to gradients for its inputs.
"""

from __future__ import annotations

import numpy as np

from ..errors import ParameterError
from .tensor import as_tensor, make_output


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ParameterError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return make_output(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return make_output(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return make_output(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def reshape(x, shape):
    x = as_tensor(x)
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise ParameterError(f"reshape: cannot view shape {x.shape} as {shape}") from None
    return make_output(value, (x,), lambda g: (g.reshape(x.shape),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return make_output(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                       lambda g: (np.where(mask, g, 0).astype(g.dtype),))


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    pos = x.data > 0
    s = x.dtype.type(slope)
    return make_output(np.where(pos, x.data, s * x.data), (x,),
                       lambda g: (np.where(pos, g, g * g.dtype.type(slope)),))


def reduce_sum(x):
    x = as_tensor(x)
    value = np.asarray(np.sum(x.data, dtype=np.float64), dtype=x.dtype)
    return make_output(value, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def reduce_mean(x):
    x = as_tensor(x)
    n = x.data.size
    value = np.asarray(np.sum(x.data, dtype=np.float64) / n, dtype=x.dtype)
    return make_output(value, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def dense(x, w, b):
    """``x @ w + b`` with ``x: (batch, in)``, ``w: (in, out)``, ``b: (out,)``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ParameterError(f"dense: incompatible shapes x{x.shape}, W{w.shape}, b{b.shape}")

    def adjoint(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0, dtype=np.float64).astype(b.dtype)

    return make_output(x.data @ w.data + b.data, (x, w, b), adjoint)


def conv2d(x, k, b):
    """Stride-1 'same' cross-correlation.

    ``x: (N, Cin, H, W)``, ``k: (Cout, Cin, kh, kw)`` with odd kernel
    extents, ``b: (Cout,)``.
    """
    x, k, b = as_tensor(x), as_tensor(k), as_tensor(b)
    if (x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]
            or b.shape != (k.shape[0],) or k.shape[2] % 2 == 0 or k.shape[3] % 2 == 0):
        raise ParameterError(f"conv2d: incompatible shapes x{x.shape}, K{k.shape}, b{b.shape}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, cout, h, w), dtype=np.result_type(x.dtype, k.dtype))
    for i in range(kh):
        for j in range(kw):
            # (Cout, Cin) x (N, Cin, H, W) -> (N, Cout, H, W)
            out += np.einsum("oc,nchw->nohw", k.data[:, :, i, j], xp[:, :, i:i + h, j:j + w], optimize=True)
    out += b.data[None, :, None, None]

    def adjoint(g):
        gxp = np.zeros_like(xp, dtype=g.dtype)
        gk = np.zeros(k.shape, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + h, j:j + w] += np.einsum("oc,nohw->nchw", k.data[:, :, i, j], g, optimize=True)
                gk[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[:, :, i:i + h, j:j + w], optimize=True)
        gx = gxp[:, :, ph:ph + h, pw:pw + w]
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64)
        return gx, gk.astype(k.dtype), gb.astype(b.dtype)

    return make_output(out, (x, k, b), adjoint)


def global_mean_pool(x):
    """``(N, C, H, W) -> (N, C)`` spatial average."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ParameterError(f"global_mean_pool expects (N, C, H, W), got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    value = x.data.sum(axis=(2, 3), dtype=np.float64) / hw
    return make_output(value.astype(x.dtype), (x,),
                       lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).astype(x.dtype),))


def downsample2x(x):
    """2x2 average pooling; spatial extents must be even."""
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ParameterError(f"downsample2x expects (N, C, even H, even W), got {x.shape}")
    n, c, h, w = x.shape
    value = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def adjoint(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (up * g.dtype.type(0.25),)

    return make_output(value.astype(x.dtype), (x,), adjoint)


def linear_map(x, forward, adjoint_fn, out_name=None):
    """Wrap a linear operator given as a forward/adjoint function pair."""
    x = as_tensor(x)
    value = np.asarray(forward(x.data))
    return make_output(value, (x,), lambda g: (np.asarray(adjoint_fn(g), dtype=x.dtype),), name=out_name)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ParameterError(f"concat: {', '.join(str(t.shape) for t in tensors)} ({exc})") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_output(value, tuple(tensors), adjoint)
