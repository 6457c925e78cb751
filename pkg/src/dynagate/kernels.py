"""Hot numeric kernels: overlapped patch extraction, depthwise 3x3 conv, bilinear resize.

Each kernel has a pure-numpy implementation and, when numba is importable, an
@njit twin. The active backend is chosen at import time by the DYNAGATE_NUMBA
environment variable ("0"/"false"/"off" forces the numpy path; anything else,
or unset, uses numba when available). Both backends are exposed through
``get_impl`` so they can be cross-checked and benchmarked against each other.

Column layout for patch extraction: output column index = c*(kh*kw) + ky*kw + kx,
i.e. channel-major, then kernel row, then kernel column.
"""

import os

import numpy as np

__all__ = [
    "USING_NUMBA",
    "available_backends",
    "get_impl",
    "im2col",
    "col2im",
    "depthwise3x3",
    "depthwise3x3_grad",
    "bilinear_resize",
    "bilinear_resize_grad",
]


def _env_allows_numba() -> bool:
    return os.environ.get("DYNAGATE_NUMBA", "1").strip().lower() not in ("0", "false", "off")


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _np_im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, k * k, ho, wo), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky * k + kx] = xp[:, :, ky:ky + ho * stride:stride, kx:kx + wo * stride:stride]
    # (b, c, k*k, ho, wo) -> (b, ho*wo, c*k*k)
    return np.ascontiguousarray(cols.transpose(0, 3, 4, 1, 2)).reshape(b, ho * wo, c * k * k)


def _np_col2im(gcols: np.ndarray, padded_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, hp, wp = padded_shape
    g = gcols.reshape(b, ho, wo, c, k * k).transpose(0, 3, 4, 1, 2)
    gxp = np.zeros(padded_shape, dtype=gcols.dtype)
    for ky in range(k):
        for kx in range(k):
            gxp[:, :, ky:ky + ho * stride:stride, kx:kx + wo * stride:stride] += g[:, :, ky * k + kx]
    return gxp


def _np_dw3x3(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    b, c, hp, wp = xp.shape
    h, wd = hp - 2, wp - 2
    out = np.zeros((b, c, h, wd), dtype=xp.dtype)
    for ky in range(3):
        for kx in range(3):
            out += xp[:, :, ky:ky + h, kx:kx + wd] * w[None, :, ky, kx, None, None]
    return out


def _np_dw3x3_gw(xp: np.ndarray, gout: np.ndarray) -> np.ndarray:
    c = xp.shape[1]
    h, wd = gout.shape[2], gout.shape[3]
    gw = np.empty((c, 3, 3), dtype=xp.dtype)
    for ky in range(3):
        for kx in range(3):
            gw[:, ky, kx] = np.sum(xp[:, :, ky:ky + h, kx:kx + wd] * gout, axis=(0, 2, 3))
    return gw


def _np_bilinear(x: np.ndarray, y0, y1, fy, x0, x1, fx) -> np.ndarray:
    fy = fy[:, None]
    fx = fx[None, :]
    top = x[:, :, y0][:, :, :, x0] * (1 - fx) + x[:, :, y0][:, :, :, x1] * fx
    bot = x[:, :, y1][:, :, :, x0] * (1 - fx) + x[:, :, y1][:, :, :, x1] * fx
    return top * (1 - fy) + bot * fy


def _np_bilinear_grad(gout: np.ndarray, h: int, w: int, y0, y1, fy, x0, x1, fx) -> np.ndarray:
    b, c = gout.shape[0], gout.shape[1]
    gx = np.zeros((b, c, h, w), dtype=gout.dtype)
    fy = fy[:, None]
    fx = fx[None, :]
    yy0 = y0[:, None]
    yy1 = y1[:, None]
    xx0 = x0[None, :]
    xx1 = x1[None, :]
    np.add.at(gx, (slice(None), slice(None), yy0, xx0), gout * (1 - fy) * (1 - fx))
    np.add.at(gx, (slice(None), slice(None), yy0, xx1), gout * (1 - fy) * fx)
    np.add.at(gx, (slice(None), slice(None), yy1, xx0), gout * fy * (1 - fx))
    np.add.at(gx, (slice(None), slice(None), yy1, xx1), gout * fy * fx)
    return gx


_NUMPY_IMPLS = {
    "im2col": _np_im2col,
    "col2im": _np_col2im,
    "dw3x3": _np_dw3x3,
    "dw3x3_gw": _np_dw3x3_gw,
    "bilinear": _np_bilinear,
    "bilinear_grad": _np_bilinear_grad,
}


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

try:
    import numba as _nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency, but stay usable
    _nb = None
    HAVE_NUMBA = False

if HAVE_NUMBA:

    @_nb.njit(cache=True)
    def _nb_im2col(xp, k, stride, ho, wo):
        b, c, hp, wp = xp.shape
        cols = np.empty((b, ho * wo, c * k * k), dtype=xp.dtype)
        for bi in range(b):
            for oy in range(ho):
                for ox in range(wo):
                    pos = oy * wo + ox
                    ys = oy * stride
                    xs = ox * stride
                    for ci in range(c):
                        base = ci * k * k
                        for ky in range(k):
                            for kx in range(k):
                                cols[bi, pos, base + ky * k + kx] = xp[bi, ci, ys + ky, xs + kx]
        return cols

    @_nb.njit(cache=True)
    def _nb_col2im(gcols, padded_shape, k, stride, ho, wo):
        b, c, hp, wp = padded_shape
        gxp = np.zeros((b, c, hp, wp), dtype=gcols.dtype)
        for bi in range(b):
            for oy in range(ho):
                for ox in range(wo):
                    pos = oy * wo + ox
                    ys = oy * stride
                    xs = ox * stride
                    for ci in range(c):
                        base = ci * k * k
                        for ky in range(k):
                            for kx in range(k):
                                gxp[bi, ci, ys + ky, xs + kx] += gcols[bi, pos, base + ky * k + kx]
        return gxp

    @_nb.njit(cache=True)
    def _nb_dw3x3(xp, w):
        b, c, hp, wp = xp.shape
        h = hp - 2
        wd = wp - 2
        out = np.empty((b, c, h, wd), dtype=xp.dtype)
        for bi in range(b):
            for ci in range(c):
                for y in range(h):
                    for x in range(wd):
                        acc = 0.0
                        for ky in range(3):
                            for kx in range(3):
                                acc += xp[bi, ci, y + ky, x + kx] * w[ci, ky, kx]
                        out[bi, ci, y, x] = acc
        return out

    @_nb.njit(cache=True)
    def _nb_dw3x3_gw(xp, gout):
        b, c, h, wd = gout.shape
        gw = np.zeros((c, 3, 3), dtype=xp.dtype)
        for bi in range(b):
            for ci in range(c):
                for y in range(h):
                    for x in range(wd):
                        g = gout[bi, ci, y, x]
                        for ky in range(3):
                            for kx in range(3):
                                gw[ci, ky, kx] += xp[bi, ci, y + ky, x + kx] * g
        return gw

    @_nb.njit(cache=True)
    def _nb_bilinear(x, y0, y1, fy, x0, x1, fx):
        b, c, h, w = x.shape
        ho = y0.shape[0]
        wo = x0.shape[0]
        out = np.empty((b, c, ho, wo), dtype=x.dtype)
        for bi in range(b):
            for ci in range(c):
                for oy in range(ho):
                    ya, yb, gy = y0[oy], y1[oy], fy[oy]
                    for ox in range(wo):
                        xa, xb, gx = x0[ox], x1[ox], fx[ox]
                        top = x[bi, ci, ya, xa] * (1 - gx) + x[bi, ci, ya, xb] * gx
                        bot = x[bi, ci, yb, xa] * (1 - gx) + x[bi, ci, yb, xb] * gx
                        out[bi, ci, oy, ox] = top * (1 - gy) + bot * gy
        return out

    @_nb.njit(cache=True)
    def _nb_bilinear_grad(gout, h, w, y0, y1, fy, x0, x1, fx):
        b, c, ho, wo = gout.shape
        gx = np.zeros((b, c, h, w), dtype=gout.dtype)
        for bi in range(b):
            for ci in range(c):
                for oy in range(ho):
                    ya, yb, gy = y0[oy], y1[oy], fy[oy]
                    for ox in range(wo):
                        xa, xb, gw_ = x0[ox], x1[ox], fx[ox]
                        g = gout[bi, ci, oy, ox]
                        gx[bi, ci, ya, xa] += g * (1 - gy) * (1 - gw_)
                        gx[bi, ci, ya, xb] += g * (1 - gy) * gw_
                        gx[bi, ci, yb, xa] += g * gy * (1 - gw_)
                        gx[bi, ci, yb, xb] += g * gy * gw_
        return gx

    def _nbw_col2im(gcols, padded_shape, k, stride, ho, wo):
        return _nb_col2im(gcols, padded_shape, k, stride, ho, wo)

    _NUMBA_IMPLS = {
        "im2col": _nb_im2col,
        "col2im": _nbw_col2im,
        "dw3x3": _nb_dw3x3,
        "dw3x3_gw": _nb_dw3x3_gw,
        "bilinear": _nb_bilinear,
        "bilinear_grad": _nb_bilinear_grad,
    }
else:  # pragma: no cover
    _NUMBA_IMPLS = None


USING_NUMBA = HAVE_NUMBA and _env_allows_numba()
_ACTIVE = _NUMBA_IMPLS if USING_NUMBA else _NUMPY_IMPLS


def available_backends():
    return ("numpy", "numba") if HAVE_NUMBA else ("numpy",)


def get_impl(name: str, backend: str | None = None):
    """Return one kernel implementation; backend None selects the active one."""
    if backend is None:
        return _ACTIVE[name]
    if backend == "numpy":
        return _NUMPY_IMPLS[name]
    if backend == "numba":
        if _NUMBA_IMPLS is None:
            raise RuntimeError("numba backend is not available")
        return _NUMBA_IMPLS[name]
    raise ValueError(f"unknown backend {backend!r}")


# ---------------------------------------------------------------------------
# public wrappers (shared shape/pad plumbing, backend-agnostic)
# ---------------------------------------------------------------------------

def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(B,C,H,W) -> (B, Ho*Wo, C*k*k) patch matrix."""
    _, _, h, w = x.shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    return _ACTIVE["im2col"](_pad2d(x, pad), k, stride, ho, wo)


def col2im(gcols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter column gradients back onto (B,C,H,W)."""
    b, c, h, w = x_shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    gxp = _ACTIVE["col2im"](np.ascontiguousarray(gcols), (b, c, h + 2 * pad, w + 2 * pad), k, stride, ho, wo)
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w])


def depthwise3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 convolution, stride 1, zero padding 1. x: (B,C,H,W), w: (C,3,3)."""
    return _ACTIVE["dw3x3"](_pad2d(x, 1), np.ascontiguousarray(w))


def depthwise3x3_grad(x: np.ndarray, w: np.ndarray, gout: np.ndarray):
    """Gradients of depthwise3x3 w.r.t. input and kernel."""
    gout = np.ascontiguousarray(gout)
    # input grad = correlation of gout with the flipped kernel (same padding)
    wflip = np.ascontiguousarray(w[:, ::-1, ::-1])
    gx = _ACTIVE["dw3x3"](_pad2d(gout, 1), wflip)
    gw = _ACTIVE["dw3x3_gw"](_pad2d(x, 1), gout)
    return gx, gw


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centers (align_corners=False), clamped to the border
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(x: np.ndarray, out_hw) -> np.ndarray:
    """(B,C,H,W) -> (B,C,Ho,Wo), half-pixel-center bilinear interpolation."""
    ho, wo = out_hw
    _, _, h, w = x.shape
    y0, y1, fy = _bilinear_axis(h, ho)
    x0, x1, fx = _bilinear_axis(w, wo)
    return _ACTIVE["bilinear"](np.ascontiguousarray(x), y0, y1, fy, x0, x1, fx)


def bilinear_resize_grad(gout: np.ndarray, in_hw) -> np.ndarray:
    """Adjoint of bilinear_resize."""
    h, w = in_hw
    _, _, ho, wo = gout.shape
    y0, y1, fy = _bilinear_axis(h, ho)
    x0, x1, fx = _bilinear_axis(w, wo)
    return _ACTIVE["bilinear_grad"](np.ascontiguousarray(gout), h, w, y0, y1, fy, x0, x1, fx)
