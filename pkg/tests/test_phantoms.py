"""Phantom rendering and degradation invariants."""

import numpy as np
import pytest

from moesr.phantoms import (PhantomSpec, bias_field, degrade, generate_hr,
                            make_pair, spec_from_dict, spec_to_dict,
                            warp_field, apply_warp, downsample,
                            BACKGROUND, RIBBON_LEVEL)


def test_generate_is_deterministic():
    spec = PhantomSpec()
    a = generate_hr(17, spec)
    b = generate_hr(17, spec)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, generate_hr(18, spec))


def test_hr_value_range_and_levels():
    spec = PhantomSpec()
    for seed in range(6):
        img = generate_hr(seed, spec)
        assert img.shape == (64, 64)
        assert img.min() >= 0.0 and img.max() <= 1.0
        # background floor present, ribbon bright band present
        assert np.isclose(img.min(), BACKGROUND)
        assert img.max() >= RIBBON_LEVEL - 1e-9


def test_ribbon_can_be_disabled():
    spec = PhantomSpec(cortex_ribbon=False)
    img = generate_hr(3, spec)
    assert img.max() < RIBBON_LEVEL


def test_bias_field_mean_one_and_amplitude():
    spec = PhantomSpec(bias_smoothness=0.2)
    rng = np.random.default_rng(5)
    b = bias_field(spec, rng, 64)
    assert abs(b.mean() - 1.0) < 1e-12
    assert abs(np.abs(b - 1.0).max() - 0.2) < 1e-12
    assert b.min() > 0


def test_warp_field_amplitude_bound():
    spec = PhantomSpec(warp_amplitude=1.5)
    rng = np.random.default_rng(6)
    g = warp_field(spec, rng, 64)
    assert g.shape == (2, 64, 64)
    mag = np.hypot(g[0], g[1]).max()
    assert abs(mag - 1.5) < 1e-12


def test_zero_warp_is_identity():
    img = generate_hr(1, PhantomSpec())
    out = apply_warp(img, np.zeros((2, 64, 64)))
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_downsample_block_mean():
    img = np.arange(16.0).reshape(4, 4)
    d = downsample(img, 2)
    np.testing.assert_allclose(
        d, [[img[:2, :2].mean(), img[:2, 2:].mean()],
            [img[2:, :2].mean(), img[2:, 2:].mean()]])


def test_degrade_shapes_and_range():
    spec = PhantomSpec()
    hr = generate_hr(9, spec)
    lr, b, g = degrade(hr, spec, 9)
    assert lr.shape == (32, 32)
    assert b.shape == (64, 64) and g.shape == (2, 64, 64)
    assert lr.min() >= 0.0 and lr.max() <= 1.0


def test_make_pair_deterministic():
    spec = PhantomSpec()
    p1, p2 = make_pair(4, spec), make_pair(4, spec)
    for k in ("hr", "lr", "bias", "warp"):
        np.testing.assert_array_equal(p1[k], p2[k])


def test_noise_and_blur_flags_change_lr():
    hr = generate_hr(2, PhantomSpec())
    base, _, _ = degrade(hr, PhantomSpec(), 2)
    clean, _, _ = degrade(hr, PhantomSpec(noise_sigma=0.0), 2)
    sharp, _, _ = degrade(hr, PhantomSpec(blur=False), 2)
    assert not np.array_equal(base, clean)
    assert not np.array_equal(base, sharp)


def test_spec_round_trip_and_validation():
    spec = PhantomSpec(hr_size=32, lr_size=16, noise_sigma=0.01)
    assert spec_from_dict(spec_to_dict(spec)) == spec
    with pytest.raises(ValueError):
        PhantomSpec(lr_size=128).validate()
    with pytest.raises(ValueError):
        PhantomSpec(bias_smoothness=1.5).validate()
    with pytest.raises(ValueError):
        PhantomSpec(noise_sigma=-0.1).validate()
