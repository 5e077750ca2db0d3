"""Numba-compiled im2col / col2im kernels.

Default backend when numba imports cleanly.  Parallelised over the batch
axis; within one sample the accumulation order of col2im matches the numpy
backend (ky outer, kx inner per target pixel), so both backends produce
bit-identical floats.

Column layout is position-major: [N, oh*ow, C*kh*kw], so a convolution is a
single GEMM against a reshaped kernel.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def im2col(xp, kh, kw, stride, oh, ow):
    n, c, hp, wp = xp.shape
    cols = np.empty((n, oh * ow, c * kh * kw), dtype=xp.dtype)
    for ni in prange(n):
        for oy in range(oh):
            for ox in range(ow):
                pos = oy * ow + ox
                iy0 = oy * stride
                ix0 = ox * stride
                col = 0
                for ci in range(c):
                    for ky in range(kh):
                        for kx in range(kw):
                            cols[ni, pos, col] = xp[ni, ci, iy0 + ky, ix0 + kx]
                            col += 1
    return cols


@njit(cache=True, parallel=True)
def col2im(cols, c, hp, wp, kh, kw, stride, oh, ow):
    n = cols.shape[0]
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for ni in prange(n):
        for ky in range(kh):
            for kx in range(kw):
                for ci in range(c):
                    col = (ci * kh + ky) * kw + kx
                    for oy in range(oh):
                        iy = oy * stride + ky
                        base = oy * ow
                        for ox in range(ow):
                            xp[ni, ci, iy, ox * stride + kx] += cols[ni, base + ox, col]
    return xp
