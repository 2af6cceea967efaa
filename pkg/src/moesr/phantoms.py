"""Synthetic anatomical phantoms and their acquisition-style degradation.

``generate_hr`` renders piecewise scenes with three kinds of structure at
distinct intensity levels: a flat dark background, mid-intensity elliptical
blobs (a mix of soft and hard edges, so both smooth tissue and sharp
two-intensity interfaces appear), and optionally a bright folded ribbon of
high curvature.  ``degrade`` produces the paired low-resolution input by
multiplying a smooth mean-one intensity bias, warping with a bounded smooth
displacement, blurring, downsampling, and adding Gaussian noise.  Both are
pure functions of (seed, spec).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage
from scipy.special import expit

BACKGROUND = 0.05
RIBBON_LEVEL = 0.85


@dataclass(frozen=True)
class PhantomSpec:
    hr_size: int = 64
    lr_size: int = 32
    n_ellipses: int = 5
    cortex_ribbon: bool = True
    noise_sigma: float = 0.02
    bias_smoothness: float = 0.2   # peak deviation of the mean-one bias field
    warp_amplitude: float = 1.5    # max displacement magnitude, pixels
    blur: bool = True

    def validate(self):
        if self.hr_size <= 0 or self.lr_size <= 0 or self.lr_size > self.hr_size:
            raise ValueError("need 0 < lr_size <= hr_size")
        if not (0.0 <= self.bias_smoothness <= 0.9):
            raise ValueError("bias_smoothness must lie in [0, 0.9]")
        if self.noise_sigma < 0 or self.warp_amplitude < 0:
            raise ValueError("noise_sigma and warp_amplitude must be >= 0")


def _grids(n: int):
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c, indexing="ij")


def generate_hr(seed: int, spec: PhantomSpec) -> np.ndarray:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    n = spec.hr_size
    yy, xx = _grids(n)
    img = np.full((n, n), BACKGROUND)

    for i in range(spec.n_ellipses):
        cy, cx = rng.uniform(0.25, 0.75, 2)
        ay, ax = rng.uniform(0.08, 0.28, 2)
        th = rng.uniform(0.0, np.pi)
        level = rng.uniform(0.37, 0.53)
        dy, dx = yy - cy, xx - cx
        u = (dy * np.cos(th) + dx * np.sin(th)) / ay
        v = (-dy * np.sin(th) + dx * np.cos(th)) / ax
        q = u * u + v * v
        if i % 2 == 0:
            shape = expit((1.0 - q) / 0.08)  # soft edge
        else:
            shape = (q < 1.0).astype(np.float64)             # hard interface
        img = np.maximum(img, level * shape)

    if spec.cortex_ribbon:
        cy, cx = 0.5 + rng.uniform(-0.03, 0.03, 2)
        r0 = rng.uniform(0.33, 0.40)
        width = rng.uniform(0.025, 0.045)
        dy, dx = yy - cy, xx - cx
        theta = np.arctan2(dy, dx)
        r = np.hypot(dy, dx)
        rim = np.full_like(r, r0)
        for k in range(3, 7):
            rim += rng.uniform(0.0, 0.03) * np.sin(k * theta + rng.uniform(0, 2 * np.pi))
        ribbon = np.abs(r - rim) < width / 2
        img = np.maximum(img, RIBBON_LEVEL * ribbon)

    return np.clip(img, 0.0, 1.0)


def bias_field(spec: PhantomSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """Smooth strictly-positive low-order polynomial field with exact mean 1."""
    yy, xx = _grids(n)
    u, v = 2 * yy - 1, 2 * xx - 1
    basis = [u, v, u * v, u * u, v * v]
    f = sum(c * b for c, b in zip(rng.standard_normal(len(basis)), basis))
    f = f - f.mean()
    peak = np.abs(f).max()
    amp = min(spec.bias_smoothness, 0.9)
    if peak > 0 and amp > 0:
        f = f * (amp / peak)
    else:
        f = np.zeros_like(f)
    return 1.0 + f


def warp_field(spec: PhantomSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """Smooth displacement [2, H, W] with sup-norm magnitude <= warp_amplitude."""
    yy, xx = _grids(n)
    comps = []
    for _ in range(2):
        f = np.zeros((n, n))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 1.5, 2)
            ph = rng.uniform(0, 2 * np.pi)
            f += rng.standard_normal() * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
        comps.append(f)
    g = np.stack(comps)
    mag = np.hypot(g[0], g[1]).max()
    if mag > 0 and spec.warp_amplitude > 0:
        g *= spec.warp_amplitude / mag
    else:
        g = np.zeros_like(g)
    return g


def apply_warp(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = img.shape[0]
    yy, xx = np.meshgrid(np.arange(n, dtype=np.float64),
                         np.arange(n, dtype=np.float64), indexing="ij")
    return ndimage.map_coordinates(img, [yy + g[0], xx + g[1]],
                                   order=1, mode="reflect")


def downsample(img: np.ndarray, lr_size: int) -> np.ndarray:
    n = img.shape[0]
    if n % lr_size == 0:
        f = n // lr_size
        return img.reshape(lr_size, f, lr_size, f).mean(axis=(1, 3))
    z = lr_size / n
    return ndimage.zoom(img, z, order=1, mode="nearest", grid_mode=True)


def degrade(hr: np.ndarray, spec: PhantomSpec, seed: int):
    """Return (lr, bias, warp) for a rendered phantom."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    n = spec.hr_size
    b = bias_field(spec, rng, n)
    g = warp_field(spec, rng, n)
    x = apply_warp(hr * b, g)
    ratio = n / spec.lr_size
    if spec.blur and ratio > 1:
        x = ndimage.gaussian_filter(x, sigma=0.5 * (ratio - 1), mode="nearest")
    lr = downsample(x, spec.lr_size)
    if spec.noise_sigma > 0:
        lr = lr + spec.noise_sigma * rng.standard_normal(lr.shape)
    return np.clip(lr, 0.0, 1.0), b, g


def make_pair(seed: int, spec: PhantomSpec) -> dict[str, np.ndarray]:
    hr = generate_hr(seed, spec)
    lr, b, g = degrade(hr, spec, seed)
    return {"hr": hr, "lr": lr, "bias": b, "warp": g}


def spec_to_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> PhantomSpec:
    return PhantomSpec(**d)
