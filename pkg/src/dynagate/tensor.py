"""Dense tensor engine with reverse-mode gradients.

Float64 throughout. Every op builds a fresh piece of tape (parent links plus
a backward closure); ``backward`` walks the tape in reverse topological order
with a deterministic accumulation order. Tracked tensors are never mutated in
place. Broadcasting follows numpy's trailing-axis rule (an axis of extent 1
stretches, missing leading axes are implied); anything else raises
DimensionError.

Optional debug check: ``set_finite_checks(True)`` (or env DYNAGATE_CHECK_FINITE=1)
makes every op validate that its output is finite.
"""

from __future__ import annotations

import contextlib
import math
import os

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ContractError, DimensionError, EmptyInputError, NonFiniteError

DTYPE = np.float64

_GRAD_ENABLED = True
_FINITE_CHECKS = os.environ.get("DYNAGATE_CHECK_FINITE", "0").strip().lower() in ("1", "true", "on")


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (teacher/eval forward passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """n-d float64 array with an optional gradient buffer and tape links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff plumbing ---------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate .grad for every tracked tensor this scalar depends on."""
        if self.data.shape != ():
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones((), dtype=DTYPE))
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and not isinstance(axes[0], int):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_check(data: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bwd, op: str) -> Tensor:
    _finite_check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._bwd = bwd if track else None
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a_shape, b_shape, op: str):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a_shape} and {b_shape} do not broadcast") from None


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _node(data, (a, b), bwd, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return _node(data, (a, b), bwd, "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    data = np.where(keep, x.data, 0.0)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * keep)

    return _node(data, (x,), bwd, "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def bwd(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            x._accumulate(g * (cdf + x.data * pdf))

    return _node(data, (x,), bwd, "gelu")


# -- matmul ----------------------------------------------------------------------


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul batch dims")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g @ _swap_last(b.data), a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(_swap_last(a.data) @ g, b.shape))

    return _node(data, (a, b), bwd, "matmul")


# -- softmax / layer norm ---------------------------------------------------------


def softmax_rows(x) -> Tensor:
    """Row-stable softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            x._accumulate(data * (g - inner))

    return _node(data, (x,), bwd, "softmax_rows")


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def bwd(g):
        if x.requires_grad:
            soft = np.exp(data)
            x._accumulate(g - soft * g.sum(axis=-1, keepdims=True))

    return _node(data, (x,), bwd, "log_softmax_rows")


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gamma, beta) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Zero-variance positions come out as beta (the epsilon keeps the division
    finite); this is the documented convention, not an error.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm affine params must have shape ({c},), got {gamma.shape}/{beta.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, c).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gamma.data
            # d/dx of (x - mu) * inv_std with mu, var functions of x
            term = gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv_std)

    return _node(data, (x, gamma, beta), bwd, "layer_norm")


# -- pooling / reductions ----------------------------------------------------------


def avg_pool_rows(x) -> Tensor:
    """Mean over the patch axis: (..., N, C) -> (..., C)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"avg_pool_rows needs (..., N, C), got {x.shape}")
    n = x.shape[-2]
    if n == 0:
        raise EmptyInputError("avg_pool_rows: no rows to pool")
    data = x.data.mean(axis=-2)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.repeat(np.expand_dims(g / n, -2), n, axis=-2))

    return _node(data, (x,), bwd, "avg_pool_rows")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    data = np.asarray(x.data.sum())

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _node(data, (x,), bwd, "sum_all")


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    if n == 0:
        raise EmptyInputError("mean_all: empty tensor")
    data = np.asarray(x.data.mean())

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g / n, x.shape).copy())

    return _node(data, (x,), bwd, "mean_all")


# -- movement -----------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return _node(data, (x,), bwd, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inv = np.argsort(axes)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g.transpose(inv))

    return _node(data, (x,), bwd, "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _node(data, tuple(tensors), bwd, "concat")


# -- structured kernels (numba/numpy backends) --------------------------------------


def depthwise_conv3x3(x, w) -> Tensor:
    """Per-channel 3x3 conv, stride 1, pad 1. x: (B,C,H,W) or (C,H,W), w: (C,3,3)."""
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"depthwise_conv3x3 expects (B,C,H,W) or (C,H,W), got {x.shape}")
    b, c, h, wd_ = xd.shape
    if h < 1 or wd_ < 1:
        raise DimensionError(f"depthwise_conv3x3 needs H,W >= 1, got {(h, wd_)}")
    if w.shape != (c, 3, 3):
        raise DimensionError(f"depthwise kernel must be ({c},3,3), got {w.shape}")
    out = kernels.depthwise3x3(xd, w.data)
    data = out[0] if squeeze else out

    def bwd(g):
        g4 = g[None] if squeeze else g
        gx, gw = kernels.depthwise3x3_grad(xd, w.data, g4)
        if x.requires_grad:
            x._accumulate(gx[0] if squeeze else gx)
        if w.requires_grad:
            w._accumulate(gw)

    return _node(data, (x, w), bwd, "depthwise_conv3x3")


def patch_extract(x, k: int, stride: int, pad: int) -> Tensor:
    """(B,C,H,W) -> (B, Ho*Wo, C*k*k) overlapped patch matrix."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"patch_extract expects (B,C,H,W), got {x.shape}")
    data = kernels.im2col(x.data, k, stride, pad)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(kernels.col2im(g, x.shape, k, stride, pad))

    return _node(data, (x,), bwd, "patch_extract")


def bilinear_upsample(x, out_hw) -> Tensor:
    """(B,C,H,W) -> (B,C,Ho,Wo), half-pixel-center bilinear."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample expects (B,C,H,W), got {x.shape}")
    in_hw = x.shape[2:]
    data = kernels.bilinear_resize(x.data, out_hw)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(kernels.bilinear_resize_grad(g, in_hw))

    return _node(data, (x,), bwd, "bilinear_upsample")
