"""JIT-compiled kernels. Accumulation is float64 regardless of tensor dtype;
results are cast to the output array's dtype on store. Loop bounds for the
padded border are computed analytically so the inner loop over columns is
branch-free and vectorizes.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_kernel(x, w, b, stride, padding, groups, out):
    n_batch, _, h, wd = x.shape
    c_out, c_per_g, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    oc_per_g = c_out // groups
    acc = np.empty((oh, ow), np.float64)
    for n in range(n_batch):
        for oc in range(c_out):
            c0 = (oc // oc_per_g) * c_per_g
            acc[:, :] = np.float64(b[oc])
            for cl in range(c_per_g):
                c = c0 + cl
                for a in range(kh):
                    if a >= padding:
                        i_lo = 0
                    else:
                        i_lo = (padding - a + stride - 1) // stride
                    i_hi = min(oh, (h - 1 + padding - a) // stride + 1)
                    for kb in range(kw):
                        wv = np.float64(w[oc, cl, a, kb])
                        if wv == 0.0:
                            continue
                        if kb >= padding:
                            j_lo = 0
                        else:
                            j_lo = (padding - kb + stride - 1) // stride
                        j_hi = min(ow, (wd - 1 + padding - kb) // stride + 1)
                        if stride == 1:
                            joff = kb - padding
                            for i in range(i_lo, i_hi):
                                xr = x[n, c, i + a - padding]
                                ar = acc[i]
                                for j in range(j_lo, j_hi):
                                    ar[j] += xr[j + joff] * wv
                        else:
                            for i in range(i_lo, i_hi):
                                xr = x[n, c, i * stride + a - padding]
                                ar = acc[i]
                                for j in range(j_lo, j_hi):
                                    ar[j] += xr[j * stride + kb - padding] * wv
            for i in range(oh):
                for j in range(ow):
                    out[n, oc, i, j] = acc[i, j]


@njit(cache=True)
def maxpool2d_kernel(x, k, stride, padding, out):
    n_batch, c_all, h, wd = x.shape
    oh, ow = out.shape[2], out.shape[3]
    for n in range(n_batch):
        for c in range(c_all):
            for i in range(oh):
                a_lo = max(0, padding - i * stride)
                a_hi = min(k, h - i * stride + padding)
                for j in range(ow):
                    b_lo = max(0, padding - j * stride)
                    b_hi = min(k, wd - j * stride + padding)
                    m = -np.inf
                    for a in range(a_lo, a_hi):
                        row = x[n, c, i * stride + a - padding]
                        for kb in range(b_lo, b_hi):
                            v = np.float64(row[j * stride + kb - padding])
                            if v > m:
                                m = v
                    out[n, c, i, j] = m
