"""Pure-numpy kernels. Loop only over kernel taps; everything else is sliced."""

import numpy as np


def _span(i, s, d, o):
    return slice(i * d, i * d + s * (o - 1) + 1, s)


def im2col(x, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow):
    """Unfold ``x`` (N, C, H, W) to columns of shape (C*kh*kw, N*oh*ow)."""
    n, c, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        rs = _span(i, sh, dh, oh)
        for j in range(kw):
            cols[:, i, j] = xp[:, :, rs, _span(j, sw, dw, ow)].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def col2im(cols, n, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow):
    """Adjoint of :func:`im2col`; overlapping taps are summed in tap order."""
    cols6 = cols.reshape(c, kh, kw, n, oh, ow)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        rs = _span(i, sh, dh, oh)
        for j in range(kw):
            xp[:, :, rs, _span(j, sw, dw, ow)] += cols6[:, i, j].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(xp[:, :, ph : ph + h, pw : pw + w])


def maxpool_forward(x, k, s, p, oh, ow):
    """Max pooling with implicit -inf padding.

    Returns the pooled map and, per output, the flat ``h*W + w`` index of the
    winning input (first maximum in tap order wins ties).
    """
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    best = np.full((n, c, oh, ow), -np.inf, dtype=x.dtype)
    idx = np.zeros((n, c, oh, ow), dtype=np.int64)
    rows = np.arange(oh) * s - p
    cols = np.arange(ow) * s - p
    for i in range(k):
        for j in range(k):
            v = xp[:, :, _span(i, s, 1, oh), _span(j, s, 1, ow)]
            better = v > best
            flat = (rows[:, None] + i) * w + (cols[None, :] + j)
            best = np.where(better, v, best)
            idx = np.where(better, flat, idx)
    return best, idx


def maxpool_backward(grad_out, idx, h, w):
    n, c, oh, ow = grad_out.shape
    gin = np.zeros((n * c, h * w), dtype=grad_out.dtype)
    plane = np.repeat(np.arange(n * c), oh * ow)
    np.add.at(gin, (plane, idx.reshape(-1)), grad_out.reshape(-1))
    return gin.reshape(n, c, h, w)
