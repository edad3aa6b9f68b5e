"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every model in this package is written as a forward computation over
:class:`Tensor` objects; gradients come from recorded vector-Jacobian
products.  The op set is exactly what the models need (dense algebra,
pointwise nonlinearities, softmax, embedding gather, 2-d convolution,
nearest-neighbor upsampling).  All arithmetic is float64 so that central
finite differences agree with analytic gradients to tight tolerances.
"""

from __future__ import annotations

import contextlib

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


def set_dtype(dtype):
    """Set the array dtype for all subsequently created tensors.

    float64 (the default) is required for finite-difference gradient checks;
    float32 roughly quintuples training throughput on CPU.  Choose once per
    process, before building models.
    """
    global DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError("dtype must be float32 or float64")
    DTYPE = dtype.type


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(value) -> np.ndarray:
    if isinstance(value, np.ndarray):
        if value.dtype != DTYPE:
            return value.astype(DTYPE)
        return value
    return np.asarray(value, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus an optional place in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(data, requires_grad=True)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing -------------------------------------------------------

    def backward(self, grad=None):
        """Backpropagate from this tensor; accumulates into leaf ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad)

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] += pg
                else:
                    grads[pid] = pg

    # -- operators ------------------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ValueError("T is defined for 2-d tensors; use swapaxes")
        return swapaxes(self, 0, 1)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        # mark as internal graph node so downstream ops keep recording
        out.requires_grad = False
    return out


def _graph_parents(*values):
    return [as_tensor(v) for v in values]


def _tracked(*parents) -> bool:
    return _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward(g):
        return (
            (a, _unbroadcast(g / b.data, a.data.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        )

    return _make(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    data = a.data ** exponent
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        return ((a, g * exponent * a.data ** (exponent - 1.0)),)

    return _make(data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch-dimension broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return ((a, g * bd), (b, g * ad))
        if ad.ndim == 1:  # (k,) @ (..., k, n)
            ga = (g[..., None, :] * bd).sum(axis=-1)
            ga = _unbroadcast(ga, ad.shape)
            gb = ad[:, None] * g[..., None, :]
            return ((a, ga), (b, _unbroadcast(gb, bd.shape)))
        if bd.ndim == 1:  # (..., m, k) @ (k,)
            ga = g[..., None] * bd
            gb = (ad * g[..., None]).sum(axis=tuple(range(ad.ndim - 1)))
            return ((a, _unbroadcast(ga, ad.shape)), (b, _unbroadcast(gb, bd.shape)))
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        return ((a, _unbroadcast(ga, ad.shape)), (b, _unbroadcast(gb, bd.shape)))

    return _make(data, (a, b), backward)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        return ((a, g * data),)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        return ((a, g / a.data),)

    return _make(data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        return ((a, g * (1.0 - data * data)),)

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        return ((a, g * data * (1.0 - data)),)

    return _make(data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        return ((a, g * (a.data > 0.0)),)

    return _make(data, (a,), backward)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    data = np.where(a.data > 0.0, a.data, slope * a.data)
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        return ((a, g * np.where(a.data > 0.0, 1.0, slope)),)

    return _make(data, (a,), backward)


def clip(a, low: float, high: float) -> Tensor:
    """Clamp values; gradient is passed through only inside the interval."""
    a = as_tensor(a)
    data = np.clip(a.data, low, high)
    if not _tracked(a):
        return Tensor(data)

    mask = (a.data > low) & (a.data < high)

    def backward(g):
        return ((a, g * mask),)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.data.shape).copy()),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g_exp, a.data.shape).copy()),)

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / data.size
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g / n, a.data.shape).copy()),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g_exp / n, a.data.shape).copy()),)

    return _make(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        return ((a, g.reshape(a.data.shape)),)

    return _make(data, (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    data = a.data.swapaxes(ax1, ax2)
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        return ((a, g.swapaxes(ax1, ax2)),)

    return _make(data, (a,), backward)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    data = a.data[index]
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return ((a, full),)

    return _make(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _tracked(*tensors):
        return Tensor(data)

    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append((t, g[tuple(idx)]))
        return tuple(out)

    return _make(data, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    if not _tracked(*tensors):
        return Tensor(data)

    def backward(g):
        slabs = np.moveaxis(g, axis, 0)
        return tuple((t, slabs[i].copy()) for i, t in enumerate(tensors))

    return _make(data, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along `axis`; positions where `mask` is False get weight 0.

    `mask` is a plain boolean array broadcastable to the input shape.  A slice
    that is fully masked yields all-zero weights.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    # fully-masked slices produce -inf rows; (-inf) - (-inf) -> nan, guard them
    with np.errstate(invalid="ignore"):
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
    e = np.where(np.isnan(e), 0.0, e)
    denom = e.sum(axis=axis, keepdims=True)
    safe = np.where(denom == 0.0, 1.0, denom)
    data = e / safe
    if not _tracked(a):
        return Tensor(data)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return ((a, data * (g - inner)),)

    return _make(data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    if not _tracked(a):
        return Tensor(data)

    soft = np.exp(data)

    def backward(g):
        return ((a, g - soft * g.sum(axis=axis, keepdims=True)),)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# embedding gather
# ---------------------------------------------------------------------------


def gather_rows(table, ids) -> Tensor:
    """Row lookup `table[ids]`; backward scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    data = table.data[ids]
    if not _tracked(table):
        return Tensor(data)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return ((table, full),)

    return _make(data, (table,), backward)


# ---------------------------------------------------------------------------
# convolution / resampling
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]  # (b, c, ho, wo, kh, kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation: x (B,C,H,W), weight (F,C,kh,kw), bias (F,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        parents.append(bias)
    b, c, h, w = x.data.shape
    f, cw, kh, kw = weight.data.shape
    if cw != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if kh != kw:
        raise ValueError("conv2d supports square kernels only")
    if kh - 1 - pad < 0:
        raise ValueError("conv2d requires pad <= kernel-1")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(f, -1)
    out = cols @ wmat.T  # (b*ho*wo, f)
    if bias is not None:
        out = out + bias.data
    data = out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2)
    if not _tracked(*parents):
        return Tensor(data)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)  # (b*ho*wo, f)
        gw = (gmat.T @ cols).reshape(weight.data.shape)
        # dx as a transposed convolution: dilate g by the stride, correlate
        # with the 180-degree-rotated kernel, then crop the padding
        if stride > 1:
            gd = np.zeros((b, f, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
            gd[:, :, ::stride, ::stride] = g
        else:
            gd = g
        w_rot = weight.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(f * kh * kw, c)
        gcols, gh, gww = _im2col(gd, kh, kw, 1, kh - 1 - pad)
        gx = (gcols @ w_rot).reshape(b, gh, gww, c).transpose(0, 3, 1, 2)
        if gh != h or gww != w:  # input rows the strided window never reached
            fixed = np.zeros((b, c, h, w), dtype=g.dtype)
            fixed[:, :, : min(gh, h), : min(gww, w)] = gx[:, :, :h, :w]
            gx = fixed
        grads = [(x, gx), (weight, gw)]
        if bias is not None:
            grads.append((bias, gmat.sum(axis=0)))
        return tuple(grads)

    return _make(data, tuple(parents), backward)


def sample_norm(x, gamma, beta, axes=(1, 2, 3), eps: float = 1e-5) -> Tensor:
    """Normalize over `axes` per remaining index, then apply affine params.

    With axes=(1,2,3) on a (B,C,H,W) input this is group normalization with
    a single group: each sample's whole feature volume is standardized, so
    relative channel offsets (how content like color is carried) survive.
    axes=(2,3) gives classic instance norm.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gamma.data + beta.data
    if not _tracked(x, gamma, beta):
        return Tensor(data)

    def backward(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=axes, keepdims=True)
        m2 = (gg * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        ggamma = _unbroadcast(g * xhat, gamma.data.shape)
        gbeta = _unbroadcast(g, beta.data.shape)
        return ((x, gx), (gamma, ggamma), (beta, gbeta))

    return _make(data, (x, gamma, beta), backward)


def upsample2x(x) -> Tensor:
    """Nearest-neighbor 2x upsampling on (B,C,H,W)."""
    x = as_tensor(x)
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    if not _tracked(x):
        return Tensor(data)

    def backward(g):
        b, c, h2, w2 = g.shape
        gx = g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        return ((x, gx),)

    return _make(data, (x,), backward)
