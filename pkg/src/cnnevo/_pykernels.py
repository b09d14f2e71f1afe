"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, s, ho, wo):
    n, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    # win: (n, c, ho, wo, k, k) -> (n, c, k, k, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def col2im(cols, c, hp, wp, k, s, ho, wo):
    n = cols.shape[0]
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + s * (ho - 1) + 1 : s, kj : kj + s * (wo - 1) + 1 : s] += cols[:, :, ki, kj]
    return out


def maxpool_forward(x, p, s):
    ho = (x.shape[2] - p) // s + 1
    wo = (x.shape[3] - p) // s + 1
    win = sliding_window_view(x, (p, p), axis=(2, 3))[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    win = win.reshape(*win.shape[:4], p * p)
    arg = np.argmax(win, axis=-1).astype(np.int32)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward(dout, arg, h, w, p, s):
    n, c, ho, wo = dout.shape
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    for ki in range(p):
        for kj in range(p):
            contrib = np.where(arg == ki * p + kj, dout, 0)
            dx[:, :, ki : ki + s * (ho - 1) + 1 : s, kj : kj + s * (wo - 1) + 1 : s] += contrib
    return dx


def fx_matmul(a, bt, frac_bits, code_min, code_max, chunk=1 << 22):
    m, kk = a.shape
    nn = bt.shape[0]
    out = np.empty((m, nn), dtype=np.float64)
    a64 = a.astype(np.int64)
    b64 = bt.astype(np.int64)
    half = 1 << (frac_bits - 1)
    rows = max(1, chunk // max(1, kk * nn))
    for start in range(0, m, rows):
        prod = a64[start : start + rows, None, :] * b64[None, :, :]
        q = np.sign(prod) * ((np.abs(prod) + half) >> frac_bits)
        np.clip(q, code_min, code_max, out=q)
        out[start : start + rows] = q.sum(axis=-1) / float(1 << frac_bits)
    return out
