"""Pure-numpy convolution kernels.

All three routines operate on float64 arrays in [B, C, H, W] layout and are
the reference implementation the compiled extension must agree with.  The
forward pass gathers sliding windows with stride tricks and contracts them
with a single BLAS call (tensordot); the two gradient routines are the exact
adjoints of that contraction.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x: np.ndarray, k: int, stride: int, pad: int, dil: int) -> np.ndarray:
    """Return conv windows [B, C, Ho, Wo, k, k] for a padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ke = dil * (k - 1) + 1  # dilated kernel extent
    win = sliding_window_view(x, (ke, ke), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dil, ::dil]


def conv2d_forward(x, w, stride=1, pad=0, dil=1):
    co, ci, k, _ = w.shape
    win = _windows(x, k, stride, pad, dil)
    # contract (C, i, j) against the kernel; result [B, Ho, Wo, Co]
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_grad_weight(x, gy, stride=1, pad=0, dil=1, k=None):
    if k is None:
        raise ValueError("kernel size required")
    win = _windows(x, k, stride, pad, dil)
    ho, wo = gy.shape[2], gy.shape[3]
    win = win[:, :, :ho, :wo]
    # sum over batch and output positions; result [Co, Ci, k, k]
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))


def conv2d_grad_input(gy, w, stride=1, pad=0, dil=1, in_h=None, in_w=None):
    b, co, ho, wo = gy.shape
    _, ci, k, _ = w.shape
    ke = dil * (k - 1) + 1
    gx_pad = np.zeros((b, ci, in_h + 2 * pad, in_w + 2 * pad), dtype=np.float64)
    # gcol[b, ho, wo, ci, i, j] = sum_co gy[b, co, ho, wo] * w[co, ci, i, j]
    gcol = np.tensordot(gy, w, axes=([1], [0]))
    # scatter-add each tap back to its input location
    for i in range(k):
        for j in range(k):
            hi = i * dil
            wi = j * dil
            gx_pad[:, :, hi:hi + (ho - 1) * stride + 1:stride,
                   wi:wi + (wo - 1) * stride + 1:stride] += gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return np.ascontiguousarray(gx_pad[:, :, pad:pad + in_h, pad:pad + in_w])
    return gx_pad
