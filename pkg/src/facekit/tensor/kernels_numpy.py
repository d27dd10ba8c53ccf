"""Pure-numpy fallback kernels: im2col + matmul convolution and a
sliding-window max pool. Float64 accumulation mirrors the JIT path so the
two backends agree within 1e-6 on float32 tensors.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_kernel(x, w, b, stride, padding, groups, out):
    n_batch = x.shape[0]
    c_out, c_per_g, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    oc_per_g = c_out // groups

    x64 = x.astype(np.float64)
    if padding:
        x64 = np.pad(x64, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (N, C, oh, ow, kh, kw), stride applied by slicing the window grid
    win = sliding_window_view(x64, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    w64 = w.astype(np.float64).reshape(groups, oc_per_g, c_per_g * kh * kw)
    b64 = b.astype(np.float64)
    for n in range(n_batch):
        for g in range(groups):
            cols = win[n, g * c_per_g : (g + 1) * c_per_g]
            # channel-major flattening must match the weight layout (c, kh, kw)
            cols = cols.transpose(0, 3, 4, 1, 2).reshape(c_per_g * kh * kw, oh * ow)
            acc = w64[g] @ cols
            acc += b64[g * oc_per_g : (g + 1) * oc_per_g, None]
            out[n, g * oc_per_g : (g + 1) * oc_per_g] = acc.reshape(
                oc_per_g, oh, ow
            ).astype(out.dtype)


def maxpool2d_kernel(x, k, stride, padding, out):
    xp = x
    if padding:
        xp = np.pad(
            x,
            ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            constant_values=-np.inf,
        )
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    np.max(win, axis=(4, 5), out=out)
