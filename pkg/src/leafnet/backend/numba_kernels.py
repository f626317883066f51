"""numba-compiled kernels for the hot inner loops.

Accumulations run in a fixed sequential order (ascending loop indices per
output element), so results are bit-reproducible across runs and
independent of any worker-count setting. Outputs are allocated inside the
jitted functions, which lets LLVM prove noalias and vectorise the inner
loops. cache=True persists compiled artifacts between processes.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def mm_nn(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), a.dtype)
    for i in range(m):
        for p in range(k):
            s = a[i, p]
            for j in range(n):
                out[i, j] += s * b[p, j]
    return out


@njit(cache=True)
def mm_nt(a, b):
    m, k = a.shape
    n = b.shape[0]
    out = np.zeros((m, n), a.dtype)
    for i in range(m):
        for j in range(n):
            s = out[i, j]
            for p in range(k):
                s += a[i, p] * b[j, p]
            out[i, j] = s
    return out


@njit(cache=True)
def mm_tn(a, b):
    k, m = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), a.dtype)
    for p in range(k):
        for i in range(m):
            s = a[p, i]
            for j in range(n):
                out[i, j] += s * b[p, j]
    return out


@njit(cache=True)
def conv_fwd(xp, w, sh, sw):
    n, c, hp, wp = xp.shape
    oc, _, kh, kw = w.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    out = np.zeros((n, oc, ho, wo), xp.dtype)
    for ni in range(n):
        for o in range(oc):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, ci, i, j]
                        for oh in range(ho):
                            ih = oh * sh + i
                            if sw == 1:
                                for ow in range(wo):
                                    out[ni, o, oh, ow] += wv * xp[ni, ci, ih, ow + j]
                            else:
                                for ow in range(wo):
                                    out[ni, o, oh, ow] += wv * xp[ni, ci, ih, ow * sw + j]
    return out


@njit(cache=True)
def conv_dx(dy, w, sh, sw, hp, wp):
    n, oc, ho, wo = dy.shape
    c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    dxp = np.zeros((n, c, hp, wp), dy.dtype)
    for ni in range(n):
        for o in range(oc):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, ci, i, j]
                        for oh in range(ho):
                            ih = oh * sh + i
                            if sw == 1:
                                for ow in range(wo):
                                    dxp[ni, ci, ih, ow + j] += wv * dy[ni, o, oh, ow]
                            else:
                                for ow in range(wo):
                                    dxp[ni, ci, ih, ow * sw + j] += wv * dy[ni, o, oh, ow]
    return dxp


@njit(cache=True)
def conv_dw(dy, xp, sh, sw, kh, kw):
    # each dw element accumulates one sequential chain over ascending
    # (n, oh, ow); the patch buffer keeps the inner loop store-contiguous
    n, oc, ho, wo = dy.shape
    c = xp.shape[1]
    k = c * kh * kw
    dw = np.zeros((oc, k), dy.dtype)
    patch = np.zeros(k, dy.dtype)
    for ni in range(n):
        for oh in range(ho):
            ihs = oh * sh
            for ow in range(wo):
                iws = ow * sw
                idx = 0
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            patch[idx] = xp[ni, ci, ihs + i, iws + j]
                            idx += 1
                for o in range(oc):
                    dv = dy[ni, o, oh, ow]
                    for t in range(k):
                        dw[o, t] += dv * patch[t]
    return dw.reshape(oc, c, kh, kw)


@njit(cache=True)
def maxpool_fwd(x, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, c, ho, wo), x.dtype)
    idx = np.zeros((n, c, ho, wo), np.int64)
    for ni in range(n):
        for ci in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    best = -np.inf
                    bi = -1
                    for i in range(kh):
                        ih = oh * sh + i - ph
                        if ih < 0 or ih >= h:
                            continue
                        for j in range(kw):
                            iw = ow * sw + j - pw
                            if iw < 0 or iw >= w:
                                continue
                            v = x[ni, ci, ih, iw]
                            if v > best:  # strict: first max wins
                                best = v
                                bi = ih * w + iw
                    out[ni, ci, oh, ow] = best
                    idx[ni, ci, oh, ow] = bi
    return out, idx


@njit(cache=True)
def maxpool_bwd(dy, idx, h, w):
    n, c, ho, wo = dy.shape
    dx = np.zeros((n, c, h * w), dy.dtype)
    for ni in range(n):
        for ci in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    dx[ni, ci, idx[ni, ci, oh, ow]] += dy[ni, ci, oh, ow]
    return dx.reshape(n, c, h, w)


@njit(cache=True)
def reduce_sum_2d(a):
    m, r = a.shape
    out = np.zeros(m, a.dtype)
    for i in range(m):
        s = out[i]
        for j in range(r):
            s += a[i, j]
        out[i] = s
    return out


@njit(cache=True)
def reduce_max_2d(a):
    m, r = a.shape
    out = np.zeros(m, a.dtype)
    idx = np.zeros(m, np.int64)
    for i in range(m):
        best = a[i, 0]
        bi = 0
        for j in range(1, r):
            if a[i, j] > best:
                best = a[i, j]
                bi = j
        out[i] = best
        idx[i] = bi
    return out, idx


@njit(cache=True)
def channel_stats(x):
    n, c, h, w = x.shape
    sums = np.zeros(c, x.dtype)
    sumsqs = np.zeros(c, x.dtype)
    for ci in range(c):
        s = sums[ci]
        q = sumsqs[ci]
        for ni in range(n):
            for i in range(h):
                for j in range(w):
                    v = x[ni, ci, i, j]
                    s += v
                    q += v * v
        sums[ci] = s
        sumsqs[ci] = q
    return sums, sumsqs
