"""Convolution and resampling operators (cross-correlation, no kernel flip)."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_result


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _check_conv(x: Tensor, weight: Tensor, stride: int, padding: int) -> tuple[int, int]:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    k = weight.shape[2]
    if weight.shape[3] != k or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {weight.shape[2:]}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    ho = conv_output_size(x.shape[2], k, stride, padding)
    wo = conv_output_size(x.shape[3], k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, k={k}, pad={padding}")
    return ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation. x: N×C×H×W, weight: O×C×k×k, bias: O."""
    ho, wo = _check_conv(x, weight, stride, padding)
    n, c, h, w = x.shape
    o, ci, k, _ = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: weight expects {ci} input channels but input has {c} (input {x.shape}, weight {weight.shape})")
    xd, wd = x.data, weight.data
    if k > 1 and c * o <= 4:
        return _conv2d_taps(x, weight, bias, stride, padding, ho, wo)
    wmat = wd.reshape(o, c * k * k)

    if k == 1:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = xs.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        dw = (gflat.T @ cols).reshape(wd.shape)
        dcols = gflat @ wmat
        if k == 1:
            dxs = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
            if stride > 1:
                dx = np.zeros_like(xd)
                dx[:, :, ::stride, ::stride] = dxs
            else:
                dx = np.ascontiguousarray(dxs)
        else:
            dcols = dcols.reshape(n, ho, wo, c, k, k)
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(gflat.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw)


def _conv2d_taps(x, weight, bias, stride, padding, ho, wo):
    """Tap-by-tap accumulation for tiny channel counts (no im2col buffer)."""
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    out = np.zeros((n, o, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            for oi in range(o):
                for ci in range(c):
                    out[:, oi] += wd[oi, ci, i, j] * patch[:, ci]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(wd)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                patch = xp[sl]
                for oi in range(o):
                    for ci in range(c):
                        dw[oi, ci, i, j] = np.vdot(g[:, oi], patch[:, ci])
                        dxp[sl][:, ci] += wd[oi, ci, i, j] * g[:, oi]
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 1) -> Tensor:
    """Per-channel cross-correlation. weight: C×1×k×k."""
    ho, wo = _check_conv(x, weight, stride, padding)
    n, c, h, w = x.shape
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"depthwise conv: weight {weight.shape} does not match {c} input channels")
    k = weight.shape[2]
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    taps = wd.reshape(c, k, k)
    out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] * taps[:, i, j][None, :, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(taps)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                dw[:, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
                dxp[sl] += g * taps[:, i, j][None, :, None, None]
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [dx, dw.reshape(wd.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw)


def depthwise_separable_conv(x: Tensor, dw_weight: Tensor, pw_weight: Tensor,
                             stride: int = 1, pw_bias: Tensor | None = None) -> Tensor:
    """3×3 depthwise stage (pad 1) followed by a 1×1 pointwise conv2d."""
    if dw_weight.shape[0] != pw_weight.shape[1]:
        raise ShapeError(f"depthwise stage yields {dw_weight.shape[0]} channels, pointwise expects {pw_weight.shape[1]}")
    mid = depthwise_conv2d(x, dw_weight, stride=stride, padding=dw_weight.shape[2] // 2)
    return conv2d(mid, pw_weight, pw_bias, stride=1, padding=0)


def dsc_parameter_count(c_in: int, c_out: int, k: int = 3) -> int:
    return k * k * c_in + c_in * c_out


# -- bilinear resampling -----------------------------------------------------
@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row o holds the weights over input samples for output sample o.

    Half-pixel centers: src = (o + 0.5) * n_in / n_out - 0.5, clamped to the border.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Differentiable bilinear resize of an N×C×H×W tensor to ``size`` (H', W')."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear resize expects N×C×H×W input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = size
    if h < 1 or w < 1 or oh < 1 or ow < 1:
        raise ShapeError(f"bilinear resize: invalid extents {x.shape} -> {size}")
    mh = _interp_matrix(h, oh).astype(x.dtype)
    mw = _interp_matrix(w, ow).astype(x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def bw(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return make_result(out, (x,), bw)


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample_2x expects N×C×H×W input, got {x.shape}")
    return bilinear_resize(x, (2 * x.shape[2], 2 * x.shape[3]))


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an H×W×C (or H×W) numpy image, same convention as above."""
    img = np.asarray(img, dtype=np.float32)
    mh = _interp_matrix(img.shape[0], size[0]).astype(np.float32)
    mw = _interp_matrix(img.shape[1], size[1]).astype(np.float32)
    if img.ndim == 2:
        return mh @ img @ mw.T
    rows = np.tensordot(mh, img, axes=(1, 0))                   # H'×W×C
    return np.ascontiguousarray(np.tensordot(rows, mw, axes=(1, 1)).transpose(0, 2, 1))
