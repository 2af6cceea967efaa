"""Quantizer correctness, straight-through gradients, codebook health."""

import numpy as np
import pytest

from moesr import autodiff as ad
from moesr.autodiff import Tensor
from moesr.codec import VQCodec


@pytest.fixture
def codec():
    return VQCodec(np.random.default_rng(0))


def brute_force_indices(flat, codebook):
    idx = np.empty(flat.shape[0], dtype=int)
    for i, v in enumerate(flat):
        idx[i] = int(np.argmin(np.sum((codebook - v) ** 2, axis=1)))
    return idx


def test_quantizer_matches_brute_force(codec, rng):
    z = Tensor(rng.standard_normal((2, 16, 4, 4)) * 0.2)
    _, idx, _, _ = codec.quantize(z)
    flat = z.data.transpose(0, 2, 3, 1).reshape(-1, 16)
    expect = brute_force_indices(flat, codec.codebook.data)
    np.testing.assert_array_equal(idx.reshape(-1), expect)
    ad.clear_tape()


def test_quantized_values_come_from_codebook(codec, rng):
    z = Tensor(rng.standard_normal((1, 16, 3, 3)) * 0.2)
    z_q, idx, _, _ = codec.quantize(z)
    vals = z_q.data.transpose(0, 2, 3, 1).reshape(-1, 16)
    np.testing.assert_allclose(vals, codec.codebook.data[idx.reshape(-1)],
                               atol=1e-12)
    ad.clear_tape()


def test_straight_through_gradient(codec, rng):
    """d(loss)/dz equals the gradient w.r.t. the quantized output."""
    z = Tensor(rng.standard_normal((1, 16, 2, 2)) * 0.2, requires_grad=True)
    z_q, _, _, _ = codec.quantize(z)
    w = rng.standard_normal(z_q.shape)
    ad.backward(ad.sum_(z_q * Tensor(w)))
    np.testing.assert_allclose(z.grad, w, atol=1e-12)
    ad.clear_tape()


def test_codebook_and_commitment_losses(codec, rng):
    z = Tensor(rng.standard_normal((1, 16, 2, 2)) * 0.2, requires_grad=True)
    z_q, idx, l_code, l_commit = codec.quantize(z)
    gap = z_q.data - z.data
    expect = float(np.mean(gap ** 2))
    assert abs(l_code.item() - expect) < 1e-12
    assert abs(l_commit.item() - codec.commit_beta * expect) < 1e-12

    # codebook loss moves the codebook, commitment moves the encoder side
    ad.backward(l_code)
    assert codec.codebook.grad is not None
    assert z.grad is None or np.allclose(z.grad, 0)
    ad.clear_tape()

    z2 = Tensor(z.data.copy(), requires_grad=True)
    _, _, _, l_c2 = codec.quantize(z2)
    ad.backward(l_c2)
    assert z2.grad is not None and np.any(z2.grad != 0)
    ad.clear_tape()


def test_quantize_channel_guard(codec):
    with pytest.raises(ValueError, match="channels"):
        codec.quantize(Tensor(np.zeros((1, 8, 4, 4))))
    ad.clear_tape()


def test_encode_decode_shapes(codec, rng):
    x = Tensor(rng.random((2, 1, 32, 32)))
    bias = Tensor(np.ones((2, 1, 32, 32)))
    warp = Tensor(np.zeros((2, 2, 32, 32)))
    z = codec.encode(x, bias, warp)
    assert z.shape == (2, 16, 8, 8)
    out = codec.decode(z, clamp=True)
    assert out.shape == (2, 1, 32, 32)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0
    ad.clear_tape()


def test_encoder_applies_scale_factor(rng):
    a = VQCodec(np.random.default_rng(1), scale_factor=0.2)
    b = VQCodec(np.random.default_rng(1), scale_factor=0.4)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        pb.data[:] = pa.data  # same weights, different interface scale
    x = Tensor(rng.random((1, 1, 16, 16)))
    bias = Tensor(np.ones((1, 1, 16, 16)))
    warp = Tensor(np.zeros((1, 2, 16, 16)))
    za = a.encode(x, bias, warp)
    zb = b.encode(x, bias, warp)
    np.testing.assert_allclose(zb.data, 2.0 * za.data, rtol=1e-12)
    ad.clear_tape()


def test_usage_ema_and_revival(codec, rng):
    # drive usage toward a single index, then revive the dead ones
    idx = np.zeros((4, 8, 8), dtype=int)
    for _ in range(300):
        codec.note_usage(idx)
    assert codec.usage[0] > 0.9
    dead = np.flatnonzero(codec.usage < 1.0 / (8 * 64))
    assert dead.size > 0

    z = Tensor(rng.standard_normal((2, 16, 8, 8)) * 0.2)
    revived = codec.revive_dead_codes(z, np.random.default_rng(3))
    assert revived == dead.size
    assert np.all(codec.usage >= 1.0 / (8 * 64))
    # revived entries sit near real encoder outputs
    flat = z.data.transpose(0, 2, 3, 1).reshape(-1, 16)
    d = np.min(np.linalg.norm(
        codec.codebook.data[dead][:, None, :] - flat[None, :, :], axis=2),
        axis=1)
    assert np.all(d < 0.1)


def test_revive_noop_when_balanced(codec, rng):
    z = Tensor(rng.standard_normal((1, 16, 4, 4)))
    assert codec.revive_dead_codes(z, np.random.default_rng(0)) == 0


def test_macs_positive(codec):
    m = codec.macs(64)
    assert m["encode"] > 0 and m["decode"] > 0
