"""2-D DFT and windowed (STFT-style) transforms as differentiable matmuls.

The transform matrices are constants, so gradients flow through the ordinary
matmul rules; no complex dtype is needed.  dft2 uses the unnormalized
analysis kernel exp(-2*pi*i*u*h/H), for which Parseval reads
sum(|X|^2) == H*W*sum(x^2).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, matmul, mul, sub, add


@dataclass
class ComplexGrid:
    """Real/imaginary parts of a 2-D spectrum (trailing two axes)."""

    re: Tensor
    im: Tensor

    def abs2(self) -> Tensor:
        return add(mul(self.re, self.re), mul(self.im, self.im))


@lru_cache(maxsize=32)
def _dft_mats(n: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n, dtype=np.float64)
    ang = 2.0 * np.pi * np.outer(idx, idx) / n
    return np.cos(ang), np.sin(ang)


def dft2(x: Tensor) -> ComplexGrid:
    """Unnormalized 2-D DFT over the trailing two axes."""
    if x.ndim < 2:
        raise ValueError("dft2 expects at least 2 dimensions")
    h, w = x.shape[-2], x.shape[-1]
    ch, sh = _dft_mats(h)
    cw, sw = _dft_mats(w)
    tch, tsh = Tensor(ch), Tensor(sh)
    tcw, tsw = Tensor(cw.T), Tensor(sw.T)  # symmetric, kept for clarity
    a = matmul(tch, x)
    b = matmul(tsh, x)
    re = sub(matmul(a, tcw), matmul(b, tsw))
    im = mul(add(matmul(a, tsw), matmul(b, tcw)), Tensor(-1.0))
    return ComplexGrid(re, im)


def idft2(grid: ComplexGrid) -> ComplexGrid:
    """Inverse of :func:`dft2` (scale 1/(H*W), conjugate kernel)."""
    h, w = grid.re.shape[-2], grid.re.shape[-1]
    ch, sh = _dft_mats(h)
    cw, sw = _dft_mats(w)
    tch, tsh = Tensor(ch), Tensor(sh)
    tcw, tsw = Tensor(cw.T), Tensor(sw.T)
    p = sub(matmul(tch, grid.re), matmul(tsh, grid.im))
    q = add(matmul(tch, grid.im), matmul(tsh, grid.re))
    scale = Tensor(1.0 / (h * w))
    re = mul(sub(matmul(p, tcw), matmul(q, tsw)), scale)
    im = mul(add(matmul(p, tsw), matmul(q, tcw)), scale)
    return ComplexGrid(re, im)


@lru_cache(maxsize=32)
def _hann2d(n: int) -> np.ndarray:
    w = np.hanning(n)
    return np.outer(w, w)


def stft2(x: Tensor, window_size: int, hop: int | None = None):
    """Hann-windowed local spectra over the trailing two axes.

    Returns a list of ((row, col), ComplexGrid) for every window whose
    top-left origin steps by ``hop`` (default: half the window).
    """
    h, w = x.shape[-2], x.shape[-1]
    if window_size > h or window_size > w:
        raise ValueError(
            f"window {window_size} exceeds input extent {h}x{w}")
    if hop is None:
        hop = window_size // 2
    if hop <= 0:
        raise ValueError("hop must be positive")
    win = Tensor(_hann2d(window_size))
    out = []
    lead = (slice(None),) * (x.ndim - 2)
    for oy in range(0, h - window_size + 1, hop):
        for ox in range(0, w - window_size + 1, hop):
            patch = x[lead + (slice(oy, oy + window_size),
                              slice(ox, ox + window_size))]
            out.append(((oy, ox), dft2(mul(patch, win))))
    return out
