"""Deterministic resampling helpers (plain numpy, non-differentiable)."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import ndimage


@lru_cache(maxsize=32)
def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic interpolation matrix mapping n_in samples to n_out
    (pixel-center aligned, edges clamped)."""
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = (o + 0.5) * n_in / n_out - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        m[o, lo_c] += 1.0 - frac
        m[o, hi_c] += frac
    return m


def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Separable bilinear resize of the trailing two axes."""
    mh = bilinear_matrix(out_hw[0], img.shape[-2])
    mw = bilinear_matrix(out_hw[1], img.shape[-1])
    return np.einsum("ij,...jk,lk->...il", mh, img, mw, optimize=True)


def upsample_bicubic(img: np.ndarray, factor: float) -> np.ndarray:
    """Bicubic upsampling baseline."""
    return np.clip(ndimage.zoom(img, factor, order=3, mode="nearest",
                                grid_mode=True), 0.0, 1.0)
