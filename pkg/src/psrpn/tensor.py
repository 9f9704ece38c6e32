"""Small reverse-mode autograd over dense numpy arrays.

Only the operations the proposal network needs are provided. Feature maps
are 4-D ``(batch, channels, height, width)`` arrays; a few ops (pooling,
loss) produce lower-rank results.
"""
from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy buffer with an optional gradient slot and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate gradients into every reachable tensor that requires them."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _needs_grad(t):
    return t.requires_grad or t._backward is not None


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, what):
    if __debug__ and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {what}")


# ---------------------------------------------------------------- pointwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a, factor):
    a = as_tensor(a)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs, axis):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def split(x, sizes, axis):
    """Split ``x`` along ``axis`` into pieces of the given sizes."""
    x = as_tensor(x)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    if bounds[-1] != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[axis]}")
    outs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(int(lo), int(hi))
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            return (full,)

        outs.append(_make(x.data[idx], (x,), backward))
    return outs


def sum_all(x):
    x = as_tensor(x)
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def weighted_sum(x, weights):
    """Scalar ``sum(x * weights)`` with constant weights; used by gradcheck."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.dtype)
    return _make(np.asarray((x.data * w).sum()), (x,), lambda g: (g * w,))


# ------------------------------------------------------------- convolution


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, weight, stride=1, padding=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``weight`` (O,C,kh,kw), no bias.

    ``padding`` is a per-side amount, either an int or ``(pad_h, pad_w)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: weight expects {wc} input channels, input has {c}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ShapeError("conv2d: stride must be positive")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: output would be empty for input {x.shape}, kernel {(kh, kw)}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    wmat = weight.data.reshape(o, c * kh * kw)
    if kh == 1 and kw == 1:
        cols = xp[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw].reshape(n, c, ho * wo)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        # (N, C, kh, kw, Ho, Wo) -> (N, C*kh*kw, Ho*Wo)
        cols = win[:, :, ::sh, ::sw].transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)

    def backward(g):
        gx = gw = None
        g = g.reshape(n, o, ho * wo)
        if _needs_grad(weight):
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if _needs_grad(x):
            gcols = np.matmul(wmat.T, g).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += gcols[:, :, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gw

    return _make(out, (x, weight), backward)


# ------------------------------------------------------------ normalisation


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Per-channel batch normalisation with affine ``gamma``/``beta``.

    In training mode the batch statistics normalise the input and the
    running buffers are updated in place as ``m*running + (1-m)*batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm: {gamma.shape[0]} channels expected, input {x.shape}")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // x.shape[1]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            m = x.data.size // x.shape[1]
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- resampling


def _upsample_matrix(n, dtype):
    """Interpolation matrix (2n, n) for half-pixel-centred 2x bilinear upsampling."""
    u = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2 - 0.5, 0.0), n - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        u[i, lo] += 1 - frac
        u[i, hi] += frac
    return u


def bilinear_upsample2x(x):
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"upsample expects a non-empty 4-D input, got {x.shape}")
    uh = _upsample_matrix(x.shape[2], x.dtype)
    uw = _upsample_matrix(x.shape[3], x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", uh, x.data, uw, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", uh, g, uw, optimize=True),))


def avg_downsample2x(x):
    """2x2 average pooling with stride 2 (parameter-free)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_downsample2x needs even spatial dims, got {(h, w)}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), backward)


def global_avg_pool(x):
    """Mean over the spatial axes: (N,C,H,W) -> (N,C)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _make(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def region_avg_pool(x, y0, x0, y1, x1):
    """Mean of ``x[:, :, y0:y1, x0:x1]`` per channel: (N,C,H,W) -> (N,C)."""
    x = as_tensor(x)
    if not (0 <= y0 < y1 <= x.shape[2] and 0 <= x0 < x1 <= x.shape[3]):
        raise ShapeError(f"region {(y0, x0, y1, x1)} outside map {x.shape[2:]}")
    area = (y1 - y0) * (x1 - x0)
    out = x.data[:, :, y0:y1, x0:x1].mean(axis=(2, 3))

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, :, y0:y1, x0:x1] = g[:, :, None, None] / area
        return (full,)

    return _make(out, (x,), backward)
