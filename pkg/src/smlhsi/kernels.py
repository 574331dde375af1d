"""Valid 2-D convolution kernels, channels-last.

The numba path fuses im2col/col2im into compiled loops and hands the
contractions to BLAS through ``np.dot``; the numpy path builds the same
column matrix from a strided window view.

Shapes: input ``x`` is (N, H, W, C), weights ``w`` are (O, KH, KW, C),
bias ``b`` is (O,), output is (N, H-KH+1, W-KW+1, O).

Both backends compute the same quantities; they differ only in summation
order, so results agree to rounding, not bitwise.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._backend import get_backend, njit


@njit(cache=True)
def _im2col_numba(x, kh, kw):
    n_batch, h, wd, c = x.shape
    ho = h - kh + 1
    wo = wd - kw + 1
    cols = np.empty((n_batch * ho * wo, kh * kw * c))
    r = 0
    for n in range(n_batch):
        for i in range(ho):
            for j in range(wo):
                q = 0
                for ki in range(kh):
                    for kj in range(kw):
                        for ci in range(c):
                            cols[r, q] = x[n, i + ki, j + kj, ci]
                            q += 1
                r += 1
    return cols


@njit(cache=True)
def _conv2d_forward_numba(x, w, b):
    n_batch, h, wd, c = x.shape
    o_ch, kh, kw, _ = w.shape
    cols = _im2col_numba(x, kh, kw)
    y = np.dot(cols, np.ascontiguousarray(w).reshape(o_ch, -1).T)
    for r in range(y.shape[0]):
        for o in range(o_ch):
            y[r, o] += b[o]
    return y.reshape(n_batch, h - kh + 1, wd - kw + 1, o_ch)


@njit(cache=True)
def _conv2d_backward_numba(x, w, dy):
    n_batch, h, wd, c = x.shape
    o_ch, kh, kw, _ = w.shape
    ho = h - kh + 1
    wo = wd - kw + 1
    cols = _im2col_numba(x, kh, kw)
    dy2 = np.ascontiguousarray(dy).reshape(-1, o_ch)
    dw = np.dot(dy2.T, cols).reshape(w.shape)
    db = np.zeros(o_ch)
    for r in range(dy2.shape[0]):
        for o in range(o_ch):
            db[o] += dy2[r, o]
    dcols = np.dot(dy2, np.ascontiguousarray(w).reshape(o_ch, -1))
    # col2im: scatter-add each column entry back to its source pixel
    dx = np.zeros(x.shape)
    r = 0
    for n in range(n_batch):
        for i in range(ho):
            for j in range(wo):
                q = 0
                for ki in range(kh):
                    for kj in range(kw):
                        for ci in range(c):
                            dx[n, i + ki, j + kj, ci] += dcols[r, q]
                            q += 1
                r += 1
    return dx, dw, db


def _im2col(x, kh, kw):
    # (N, Ho, Wo, C, KH, KW) -> (N*Ho*Wo, KH*KW*C) matching w's (KH, KW, C) layout
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    n, ho, wo = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * ho * wo, -1), (n, ho, wo)


def _conv2d_forward_numpy(x, w, b):
    o_ch, kh, kw, _ = w.shape
    cols, (n, ho, wo) = _im2col(x, kh, kw)
    y = cols @ w.reshape(o_ch, -1).T + b
    return y.reshape(n, ho, wo, o_ch)


def _conv2d_backward_numpy(x, w, dy):
    o_ch, kh, kw, c = w.shape
    cols, (n, ho, wo) = _im2col(x, kh, kw)
    dy2 = dy.reshape(-1, o_ch)
    dw = (dy2.T @ cols).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(o_ch, -1)).reshape(n, ho, wo, kh, kw, c)
    dx = np.zeros(x.shape)
    for ki in range(kh):
        for kj in range(kw):
            dx[:, ki:ki + ho, kj:kj + wo, :] += dcols[:, :, :, ki, kj, :]
    return dx, dw, db


def conv2d_forward(x, w, b):
    if get_backend() == "numba":
        return _conv2d_forward_numba(x, w, b)
    return _conv2d_forward_numpy(x, w, b)


def conv2d_backward(x, w, dy):
    """Return ``(dx, dw, db)`` for upstream gradient ``dy``."""
    if get_backend() == "numba":
        return _conv2d_backward_numba(x, w, dy)
    return _conv2d_backward_numpy(x, w, dy)
