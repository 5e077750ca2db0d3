"""Pure-numpy im2col / col2im kernels.

Fallback path for machines without a working numba install (or with
DEFECTSCAN_BACKEND=numpy).  Loops run over the kernel window only; every
iteration is a large strided slice copy, so the heavy lifting stays inside
numpy.  Output is bit-identical to the numba backend: both gather/scatter the
same elements and accumulate in the same (ky, kx) order.

Column layout is position-major: [N, oh*ow, C*kh*kw], so a convolution is a
single GEMM against a reshaped kernel.
"""

import numpy as np


def im2col(xp, kh, kw, stride, oh, ow):
    """Unfold padded input [N,C,Hp,Wp] into columns [N, oh*ow, C*kh*kw].

    Row index is the output position oy*ow + ox; column index is
    (c*kh + ky)*kw + kx.
    """
    n, c, hp, wp = xp.shape
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=xp.dtype)
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[:, :, ky:ky + oh * stride:stride, kx:kx + ow * stride:stride]
            cols[:, :, :, :, ky, kx] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n, oh * ow, c * kh * kw)


def col2im(cols, c, hp, wp, kh, kw, stride, oh, ow):
    """Adjoint of im2col: scatter-add columns back onto a padded [N,C,Hp,Wp] grid."""
    n = cols.shape[0]
    cols6 = cols.reshape(n, oh, ow, c, kh, kw)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            xp[:, :, ky:ky + oh * stride:stride,
               kx:kx + ow * stride:stride] += cols6[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return xp
