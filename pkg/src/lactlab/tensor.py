"""A small reverse-mode autodiff tensor over numpy arrays.

Each op records its parents and a closure mapping the output gradient to one
gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order and *accumulates* into ``.grad``; nothing ever overwrites
an existing gradient buffer.

Training runs in float32. Gradient checks switch the default to float64 with
:func:`default_dtype`.
"""
import contextlib

import numpy as np

from . import kernels
from .errors import InvalidArgument

_DEFAULT_DTYPE = [np.float32]
_GRAD_ENABLED = [True]


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE[0]
    _DEFAULT_DTYPE[0] = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = prev


@contextlib.contextmanager
def no_grad():
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def is_grad_enabled():
    return _GRAD_ENABLED[0]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or get_default_dtype()
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction ------------------------------------------------------

    @classmethod
    def _make(cls, data, parents, backward):
        """Wrap an op result; records the graph only if some parent needs it."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        track = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- basic properties --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if g.shape != self.data.shape:
            raise InvalidArgument(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise InvalidArgument("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # upstream gradients for intermediate nodes live here, not on .grad
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.accumulate_grad(g)
                continue
            grads = node._backward(g)
            for p, pg in zip(node._parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.data.dtype)
                if p._backward is None:
                    p.accumulate_grad(pg)
                elif id(p) in pending:
                    pending[id(p)] = pending[id(p)] + pg
                else:
                    pending[id(p)] = pg

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise and reductions
# ----------------------------------------------------------------------------

def add(a, b):
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)
    return Tensor._make(a.data + b.data, (a, b), backward)


def neg(a):
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if not isinstance(b, Tensor):
        s = a.dtype.type(b)
        return Tensor._make(a.data * s, (a,), lambda g: (g * s,))
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)
    return Tensor._make(a.data * b.data, (a, b), backward)


def relu(x):
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x):
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), lambda g: (g * (1.0 - y * y),))


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * s

    def backward(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)
    return Tensor._make(y, (x,), backward)


def tsum(x):
    shape = x.shape
    return Tensor._make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                        lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(x):
    shape, n = x.shape, x.data.size
    return Tensor._make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                        lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def reshape(x, shape):
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def mse(a, b):
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise InvalidArgument(f"mse shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = (2.0 / n) * g * diff
        return d, -d
    return Tensor._make(np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), backward)


# ----------------------------------------------------------------------------
# dense layers
# ----------------------------------------------------------------------------

def linear(x, weight, bias=None):
    """x (B, in) @ weight (out, in).T + bias (out,)."""
    if x.shape[-1] != weight.shape[1]:
        raise InvalidArgument(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)
    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(y, parents, backward)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation. x (B, C, H, W), weight (O, C, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidArgument("conv2d expects 4-D input and weight")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise InvalidArgument(f"conv2d: input has {C} channels, weight expects {Cw}")
    if stride < 1:
        raise InvalidArgument("conv2d: stride must be >= 1")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise InvalidArgument("conv2d: kernel larger than padded input")
    Ho = kernels.conv_out_size(H, kh, stride, padding)
    Wo = kernels.conv_out_size(W, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding).reshape(B, C * kh * kw, Ho * Wo)
    wm = weight.data.reshape(O, -1)
    y = np.matmul(wm, cols)
    if bias is not None:
        y += bias.data[None, :, None]
    y = y.reshape(B, O, Ho, Wo)

    def backward(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(wm.T, g2).reshape(B, C, kh, kw, Ho, Wo)
        gx = kernels.col2im(gcols, H, W, stride, padding)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(y, parents, backward)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0):
    """Transposed convolution. x (B, Cin, H, W), weight (Cin, Cout, kh, kw).

    Output size (H - 1) * stride - 2 * padding + kh, i.e. the input size that
    ``conv2d`` with the same kernel, stride and padding maps onto H.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidArgument("conv_transpose2d expects 4-D input and weight")
    B, Cin, H, W = x.shape
    Cw, Cout, kh, kw = weight.shape
    if Cin != Cw:
        raise InvalidArgument(f"conv_transpose2d: input has {Cin} channels, weight expects {Cw}")
    if stride < 1:
        raise InvalidArgument("conv_transpose2d: stride must be >= 1")
    Ho = (H - 1) * stride - 2 * padding + kh
    Wo = (W - 1) * stride - 2 * padding + kw
    if Ho < 1 or Wo < 1:
        raise InvalidArgument("conv_transpose2d: padding too large for input")
    wm = weight.data.reshape(Cin, Cout * kh * kw)
    xm = x.data.reshape(B, Cin, H * W)
    cols = np.matmul(wm.T, xm).reshape(B, Cout, kh, kw, H, W)
    y = kernels.col2im(cols, Ho, Wo, stride, padding)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def backward(g):
        gcols = kernels.im2col(g, kh, kw, stride, padding).reshape(B, Cout * kh * kw, H * W)
        gx = np.matmul(wm, gcols).reshape(x.shape)
        gw = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(y, parents, backward)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    B, C, H, W = x.shape
    if C % groups:
        raise InvalidArgument(f"group_norm: {C} channels not divisible into {groups} groups")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(B, C, H, W)
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gamma.data[None, :, None, None]).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(B, C, H, W), ggamma, gbeta
    return Tensor._make(y.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# ----------------------------------------------------------------------------
# shape plumbing
# ----------------------------------------------------------------------------

def concat_channels(tensors):
    sizes = [t.shape[1] for t in tensors]
    base = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise InvalidArgument("concat_channels: tensors must agree on batch and spatial size")
    y = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))
    return Tensor._make(y, tuple(tensors), backward)


def channel_slice(x, start, stop):
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, start:stop] = g
        return (out,)
    return Tensor._make(np.ascontiguousarray(x.data[:, start:stop]), (x,), backward)


def _center_offsets(src, dst):
    return (src[0] - dst[0]) // 2, (src[1] - dst[1]) // 2


def center_crop(x, size):
    """Central ``size`` (h, w) window of the last two axes."""
    h, w = (size, size) if np.isscalar(size) else size
    H, W = x.shape[-2:]
    if h > H or w > W:
        raise InvalidArgument(f"center_crop: target {(h, w)} larger than source {(H, W)}")
    oy, ox = _center_offsets((H, W), (h, w))
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[..., oy:oy + h, ox:ox + w] = g
        return (out,)
    return Tensor._make(np.ascontiguousarray(x.data[..., oy:oy + h, ox:ox + w]), (x,), backward)


def zero_pad_embed(x, size):
    """Place ``x`` centred in a zero canvas of spatial ``size``."""
    h, w = (size, size) if np.isscalar(size) else size
    H, W = x.shape[-2:]
    if h < H or w < W:
        raise InvalidArgument(f"zero_pad_embed: target {(h, w)} smaller than source {(H, W)}")
    oy, ox = _center_offsets((h, w), (H, W))
    out = np.zeros(x.shape[:-2] + (h, w), dtype=x.dtype)
    out[..., oy:oy + H, ox:ox + W] = x.data
    return Tensor._make(out, (x,), lambda g: (np.ascontiguousarray(g[..., oy:oy + H, ox:ox + W]),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return Tensor._make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                        lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def take_rows(table, idx):
    """Row gather ``table[idx]``; the backward pass scatter-adds into the table."""
    idx = np.asarray(idx)
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)
    return Tensor._make(table.data[idx], (table,), backward)


def straight_through(x, value):
    """Forward ``value``; gradient passes to ``x`` unchanged."""
    if x.shape != value.shape:
        raise InvalidArgument("straight_through: shapes differ")
    return Tensor._make(np.ascontiguousarray(value, dtype=x.dtype), (x,), lambda g: (g,))
