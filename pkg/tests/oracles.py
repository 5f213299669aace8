"""Independent reference implementations used only by the test suite.

These are deliberately naive (pure Python loops over explicitly zero-padded
inputs) and share no code with the package kernels.
"""

import math

import numpy as np


def same_pads(size, k, stride):
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2, out


def conv2d_bruteforce(x, w, stride, padding):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    if padding == "same":
        pt, pb, ho = same_pads(h, kh, stride)
        pl, pr, wo = same_pads(wd, kw, stride)
    else:
        pt = pb = pl = pr = 0
        ho = (h - kh) // stride + 1
        wo = (wd - kw) // stride + 1
    xp = np.zeros((n, h + pt + pb, wd + pl + pr, cin), dtype=x.dtype)
    xp[:, pt:pt + h, pl:pl + wd, :] = x
    out = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    s = x.dtype.type(0)
                    for i in range(kh):
                        for j in range(kw):
                            for ci in range(cin):
                                s += xp[b, oy * stride + i, ox * stride + j, ci] * w[i, j, ci, co]
                    out[b, oy, ox, co] = s
    return out


def depthwise_bruteforce(x, w, stride, padding):
    out = np.stack(
        [conv2d_bruteforce(x[..., c:c + 1], w[:, :, c:c + 1, None], stride, padding)[..., 0]
         for c in range(x.shape[-1])],
        axis=-1,
    )
    return out


def matmul_bruteforce(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            s = a.dtype.type(0)
            for kk in range(k):
                s += a[i, kk] * b[kk, j]
            out[i, j] = s
    return out


def central_difference(f, x, h=1e-5):
    """Full-gradient central differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad
