"""Numba loop kernels for the dense numeric ops.

Every output element is owned by exactly one loop iteration and accumulated
in a fixed order, so results do not depend on the numba thread count.  The
innermost loop always runs over a contiguous channel axis, which lets LLVM
vectorize across *independent* accumulators without reassociating any sum.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def matmul_into(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in prange(m):
        acc = np.zeros(n, dtype=out.dtype)
        for kk in range(k):
            av = a[i, kk]
            for j in range(n):
                acc[j] += av * b[kk, j]
        for j in range(n):
            out[i, j] = acc[j]


@njit(cache=True, parallel=True)
def conv2d_into(x, w, stride, pad_t, pad_l, out):
    n_batch, h, wd, cin = x.shape
    kh, kw = w.shape[0], w.shape[1]
    cout = w.shape[3]
    ho, wo = out.shape[1], out.shape[2]
    for p in prange(n_batch * ho):
        n = p // ho
        oy = p % ho
        acc = np.empty(cout, dtype=out.dtype)
        for ox in range(wo):
            for co in range(cout):
                acc[co] = 0.0
            for i in range(kh):
                iy = oy * stride - pad_t + i
                if iy < 0 or iy >= h:
                    continue
                for j in range(kw):
                    ix = ox * stride - pad_l + j
                    if ix < 0 or ix >= wd:
                        continue
                    for ci in range(cin):
                        xv = x[n, iy, ix, ci]
                        for co in range(cout):
                            acc[co] += xv * w[i, j, ci, co]
            for co in range(cout):
                out[n, oy, ox, co] = acc[co]


@njit(cache=True, parallel=True)
def conv2d_grad_input(g, w_t, stride, pad_t, pad_l, out):
    """``w_t`` is the weight with its last two axes swapped: [kh, kw, Cout, Cin]."""
    n_batch, h, wd, cin = out.shape
    kh, kw = w_t.shape[0], w_t.shape[1]
    cout = w_t.shape[2]
    ho, wo = g.shape[1], g.shape[2]
    for p in prange(n_batch * h):
        n = p // h
        y = p % h
        acc = np.empty(cin, dtype=out.dtype)
        for x in range(wd):
            for ci in range(cin):
                acc[ci] = 0.0
            for i in range(kh):
                ty = y + pad_t - i
                if ty < 0 or ty % stride != 0:
                    continue
                oy = ty // stride
                if oy >= ho:
                    continue
                for j in range(kw):
                    tx = x + pad_l - j
                    if tx < 0 or tx % stride != 0:
                        continue
                    ox = tx // stride
                    if ox >= wo:
                        continue
                    for co in range(cout):
                        gv = g[n, oy, ox, co]
                        for ci in range(cin):
                            acc[ci] += gv * w_t[i, j, co, ci]
            for ci in range(cin):
                out[n, y, x, ci] = acc[ci]


@njit(cache=True, parallel=True)
def conv2d_grad_weight(x, g, stride, pad_t, pad_l, out):
    n_batch, h, wd, cin = x.shape
    kh, kw = out.shape[0], out.shape[1]
    cout = out.shape[3]
    ho, wo = g.shape[1], g.shape[2]
    for t in prange(kh * kw):
        i = t // kw
        j = t % kw
        for ci in range(cin):
            for co in range(cout):
                out[i, j, ci, co] = 0.0
        for n in range(n_batch):
            for oy in range(ho):
                iy = oy * stride - pad_t + i
                if iy < 0 or iy >= h:
                    continue
                for ox in range(wo):
                    ix = ox * stride - pad_l + j
                    if ix < 0 or ix >= wd:
                        continue
                    for ci in range(cin):
                        xv = x[n, iy, ix, ci]
                        for co in range(cout):
                            out[i, j, ci, co] += xv * g[n, oy, ox, co]


@njit(cache=True, parallel=True)
def depthwise_into(x, w, stride, pad_t, pad_l, out):
    n_batch, h, wd, c = x.shape
    kh, kw = w.shape[0], w.shape[1]
    ho, wo = out.shape[1], out.shape[2]
    for p in prange(n_batch * ho):
        n = p // ho
        oy = p % ho
        acc = np.empty(c, dtype=out.dtype)
        for ox in range(wo):
            for ch in range(c):
                acc[ch] = 0.0
            for i in range(kh):
                iy = oy * stride - pad_t + i
                if iy < 0 or iy >= h:
                    continue
                for j in range(kw):
                    ix = ox * stride - pad_l + j
                    if ix < 0 or ix >= wd:
                        continue
                    for ch in range(c):
                        acc[ch] += x[n, iy, ix, ch] * w[i, j, ch]
            for ch in range(c):
                out[n, oy, ox, ch] = acc[ch]


@njit(cache=True, parallel=True)
def depthwise_grad_input(g, w, stride, pad_t, pad_l, out):
    n_batch, h, wd, c = out.shape
    kh, kw = w.shape[0], w.shape[1]
    ho, wo = g.shape[1], g.shape[2]
    for p in prange(n_batch * h):
        n = p // h
        y = p % h
        acc = np.empty(c, dtype=out.dtype)
        for x in range(wd):
            for ch in range(c):
                acc[ch] = 0.0
            for i in range(kh):
                ty = y + pad_t - i
                if ty < 0 or ty % stride != 0:
                    continue
                oy = ty // stride
                if oy >= ho:
                    continue
                for j in range(kw):
                    tx = x + pad_l - j
                    if tx < 0 or tx % stride != 0:
                        continue
                    ox = tx // stride
                    if ox >= wo:
                        continue
                    for ch in range(c):
                        acc[ch] += g[n, oy, ox, ch] * w[i, j, ch]
            for ch in range(c):
                out[n, y, x, ch] = acc[ch]


@njit(cache=True, parallel=True)
def depthwise_grad_weight(x, g, stride, pad_t, pad_l, out):
    n_batch, h, wd, c = x.shape
    kh, kw = out.shape[0], out.shape[1]
    ho, wo = g.shape[1], g.shape[2]
    for t in prange(kh * kw):
        i = t // kw
        j = t % kw
        for ch in range(c):
            out[i, j, ch] = 0.0
        for n in range(n_batch):
            for oy in range(ho):
                iy = oy * stride - pad_t + i
                if iy < 0 or iy >= h:
                    continue
                for ox in range(wo):
                    ix = ox * stride - pad_l + j
                    if ix < 0 or ix >= wd:
                        continue
                    for ch in range(c):
                        out[i, j, ch] += x[n, iy, ix, ch] * g[n, oy, ox, ch]
