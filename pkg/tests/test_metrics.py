"""Metrics against brute-force loop implementations and known values."""

import numpy as np
import pytest

from moesr.metrics import PSNR_CAP, psnr, rmse, ssim


def test_psnr_known_value():
    # constant offset 0.1 over unit range: MSE 0.01 -> 20 dB
    a = np.zeros((16, 16))
    b = np.full((16, 16), 0.1)
    assert abs(psnr(a, b) - 20.0) < 1e-12


def test_psnr_identical_hits_sentinel():
    x = np.random.default_rng(0).random((8, 8))
    assert psnr(x, x) == PSNR_CAP


def test_psnr_data_range():
    a = np.zeros((4, 4))
    b = np.full((4, 4), 25.5)
    assert abs(psnr(a, b, data_range=255.0) - 20.0) < 1e-12


def test_rmse_matches_loops(rng):
    a, b = rng.random((5, 7)), rng.random((5, 7))
    acc = 0.0
    for i in range(5):
        for j in range(7):
            acc += (a[i, j] - b[i, j]) ** 2
    assert abs(rmse(a, b) - np.sqrt(acc / 35)) < 1e-14


def test_shape_mismatch_rejected():
    for fn in (rmse, psnr, ssim):
        with pytest.raises(ValueError):
            fn(np.ones((4, 8)), np.ones((8, 8)))


def test_ssim_identical_is_one(rng):
    x = rng.random((16, 16))
    assert abs(ssim(x, x) - 1.0) < 1e-12


def test_ssim_matches_loop_reference(rng):
    a, b = rng.random((12, 12)), rng.random((12, 12))
    w, c1, c2 = 8, 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(12 - w + 1):
        for j in range(12 - w + 1):
            pa = a[i:i + w, j:j + w]
            pb = b[i:i + w, j:j + w]
            mua, mub = pa.mean(), pb.mean()
            va, vb = pa.var(), pb.var()
            cov = (pa * pb).mean() - mua * mub
            vals.append(((2 * mua * mub + c1) * (2 * cov + c2))
                        / ((mua ** 2 + mub ** 2 + c1) * (va + vb + c2)))
    assert abs(ssim(a, b) - np.mean(vals)) < 1e-12


def test_ssim_penalizes_noise(rng):
    x = rng.random((32, 32))
    noisy = np.clip(x + 0.2 * rng.standard_normal(x.shape), 0, 1)
    assert ssim(x, noisy) < 0.9


def test_ssim_window_guard():
    with pytest.raises(ValueError):
        ssim(np.ones((4, 4)), np.ones((4, 4)), window=8)
