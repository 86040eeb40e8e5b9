"""numba versions of the kernels in :mod:`numpy_kernels`.

Loop nests mirror the numpy tap order so both paths round identically.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _im2col(x, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow, cols):
    n, c, h, w = x.shape
    p = oh * ow
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                for b in range(n):
                    base = b * p
                    for y in range(oh):
                        ih = y * sh + i * dh - ph
                        off = base + y * ow
                        if ih < 0 or ih >= h:
                            for xx in range(ow):
                                cols[row, off + xx] = 0.0
                            continue
                        for xx in range(ow):
                            iw = xx * sw + j * dw - pw
                            if iw >= 0 and iw < w:
                                cols[row, off + xx] = x[b, ci, ih, iw]
                            else:
                                cols[row, off + xx] = 0.0
    return cols


@njit(cache=True)
def _col2im(cols, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow, out):
    n, c, h, w = out.shape
    p = oh * ow
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                for b in range(n):
                    base = b * p
                    for y in range(oh):
                        ih = y * sh + i * dh - ph
                        if ih < 0 or ih >= h:
                            continue
                        off = base + y * ow
                        for xx in range(ow):
                            iw = xx * sw + j * dw - pw
                            if iw >= 0 and iw < w:
                                out[b, ci, ih, iw] += cols[row, off + xx]
    return out


@njit(cache=True)
def _maxpool_forward(x, k, s, p, out, idx):
    n, c, h, w = x.shape
    _, _, oh, ow = out.shape
    for b in range(n):
        for ci in range(c):
            for y in range(oh):
                for xx in range(ow):
                    best = -np.inf
                    arg = 0
                    for i in range(k):
                        ih = y * s + i - p
                        if ih < 0 or ih >= h:
                            continue
                        for j in range(k):
                            iw = xx * s + j - p
                            if iw < 0 or iw >= w:
                                continue
                            v = x[b, ci, ih, iw]
                            if v > best:
                                best = v
                                arg = ih * w + iw
                    out[b, ci, y, xx] = best
                    idx[b, ci, y, xx] = arg
    return out, idx


@njit(cache=True)
def _maxpool_backward(grad_out, idx, gin):
    n, c, oh, ow = grad_out.shape
    for b in range(n):
        for ci in range(c):
            for y in range(oh):
                for xx in range(ow):
                    gin[b * c + ci, idx[b, ci, y, xx]] += grad_out[b, ci, y, xx]
    return gin


def im2col(x, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow):
    n, c = x.shape[:2]
    cols = np.empty((c * kh * kw, n * oh * ow), dtype=x.dtype)
    return _im2col(np.ascontiguousarray(x), kh, kw, sh, sw, dh, dw, ph, pw, oh, ow, cols)


def col2im(cols, n, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow):
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    return _col2im(np.ascontiguousarray(cols), kh, kw, sh, sw, dh, dw, ph, pw, oh, ow, out)


def maxpool_forward(x, k, s, p, oh, ow):
    n, c = x.shape[:2]
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    idx = np.empty((n, c, oh, ow), dtype=np.int64)
    return _maxpool_forward(np.ascontiguousarray(x), k, s, p, out, idx)


def maxpool_backward(grad_out, idx, h, w):
    n, c = grad_out.shape[:2]
    gin = np.zeros((n * c, h * w), dtype=grad_out.dtype)
    _maxpool_backward(np.ascontiguousarray(grad_out), idx, gin)
    return gin.reshape(n, c, h, w)
