"""Pure-numpy kernel implementations.

Fallback path used when numba is unavailable or LEAFNET_BACKEND=numpy.
Results are deterministic run to run (numpy's reduction algorithms are
fixed and single-threaded here), but the internal summation order of the
vectorised routines differs from the numba backend's strictly sequential
chains, so cross-backend agreement is to rounding, not bitwise.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def mm_nn(a, b):
    return a @ b


def mm_nt(a, b):
    return a @ b.T


def mm_tn(a, b):
    return a.T @ b


def conv_fwd(xp, w, sh, sw):
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return np.einsum("nchwij,ocij->nohw", win, w, optimize=True)


def conv_dx(dy, w, sh, sw, hp, wp):
    n, oc, ho, wo = dy.shape
    c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    dxp = np.zeros((n, c, hp, wp), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = np.einsum("nohw,oc->nchw", dy, w[:, :, i, j], optimize=True)
            dxp[:, :, i : i + ho * sh : sh, j : j + wo * sw : sw] += patch
    return dxp


def conv_dw(dy, xp, sh, sw, kh, kw):
    n, oc, ho, wo = dy.shape
    c = xp.shape[1]
    dw = np.zeros((oc, c, kh, kw), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + ho * sh : sh, j : j + wo * sw : sw]
            dw[:, :, i, j] = np.tensordot(dy, xs, axes=([0, 2, 3], [0, 2, 3]))
    return dw


def maxpool_fwd(x, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    xpad = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = win.reshape(win.shape[:4] + (kh * kw,))
    out = flat.max(axis=-1)
    local = flat.argmax(axis=-1)  # first max in row-major window scan
    ho, wo = out.shape[2], out.shape[3]
    oh = np.arange(ho)[:, None]
    ow = np.arange(wo)[None, :]
    ih = oh * sh - ph + local // kw
    iw = ow * sw - pw + local % kw
    return np.ascontiguousarray(out), ih * w + iw


def maxpool_bwd(dy, idx, h, w):
    n, c = dy.shape[0], dy.shape[1]
    dx = np.zeros((n, c, h * w), dtype=dy.dtype)
    for ni in range(n):
        for ci in range(c):
            np.add.at(dx[ni, ci], idx[ni, ci].ravel(), dy[ni, ci].ravel())
    return dx.reshape(n, c, h, w)


def reduce_sum_2d(a):
    return np.add.reduce(a, axis=1)


def reduce_max_2d(a):
    return np.max(a, axis=1), np.argmax(a, axis=1)


def channel_stats(x):
    return np.add.reduce(x, axis=(0, 2, 3)), np.add.reduce(x * x, axis=(0, 2, 3))
