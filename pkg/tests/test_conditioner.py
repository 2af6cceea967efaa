"""Token embedding, windowed attention masking, permutation structure."""

import numpy as np
import pytest

from moesr import autodiff as ad
from moesr.autodiff import Tensor
from moesr.conditioner import CondEncoder, WindowAttention


@pytest.fixture
def enc():
    return CondEncoder(np.random.default_rng(0), input_size=64,
                       patch_sizes=(16, 8, 4), dim=32, window=16, heads=4,
                       depth=2)


def test_token_count_default_geometry(enc, rng):
    y = Tensor(rng.random((2, 1, 64, 64)))
    tokens = enc.patchify(y)
    assert tokens.shape == (2, 16 + 64 + 256, 32)
    assert enc.token_count == 336
    out = enc(y)
    assert out.shape == (2, 336, 32)
    ad.clear_tape()


def test_patchify_rejects_wrong_size(enc):
    with pytest.raises(ValueError, match="expects"):
        enc.patchify(Tensor(np.zeros((1, 1, 32, 32))))


def test_divisibility_guard():
    with pytest.raises(ValueError, match="divisible"):
        CondEncoder(np.random.default_rng(0), input_size=60,
                    patch_sizes=(16, 8, 4))


def test_fine_tokens_grid_layout(enc, rng):
    toks = Tensor(rng.standard_normal((2, 336, 32)))
    grid = enc.fine_tokens(toks)
    assert grid.shape == (2, 32, 16, 16)
    # row-major correspondence: token (16+64) + r*16 + c -> grid[., ., r, c]
    np.testing.assert_allclose(grid.data[1, :, 3, 5],
                               toks.data[1, 80 + 3 * 16 + 5, :], atol=1e-15)
    ad.clear_tape()


def test_padding_mask_matches_unpadded_windows(rng):
    """Window of 32 over 336 tokens forces a 16-token pad; padded tokens
    must not influence the real ones."""
    enc_pad = CondEncoder(np.random.default_rng(1), input_size=64, dim=32,
                          window=32, heads=4, depth=1)
    y = Tensor(rng.random((1, 1, 64, 64)))
    out = enc_pad(y)
    assert out.shape == (1, 336, 32)
    assert np.all(np.isfinite(out.data))
    ad.clear_tape()


def test_window_attention_mask_blocks_padded_positions(rng):
    att = WindowAttention(8, 2, np.random.default_rng(2))
    x = rng.standard_normal((1, 1, 4, 8))
    base = att(Tensor(x)).data
    # change the last (to-be-masked) token; masked output must not move
    x2 = x.copy()
    x2[0, 0, 3] += 10.0
    mask = np.zeros(4)
    mask[3:] = -1e9
    m1 = att(Tensor(x), mask_bias=mask).data
    m2 = att(Tensor(x2), mask_bias=mask).data
    np.testing.assert_allclose(m1[0, 0, :3], m2[0, 0, :3], atol=1e-9)
    assert np.max(np.abs(base - m1)) > 1e-6  # the mask does change attention
    ad.clear_tape()


def test_head_count_guard():
    with pytest.raises(ValueError, match="heads"):
        WindowAttention(10, 3, np.random.default_rng(0))


def test_tokens_permutation_equivariance_without_pos(rng):
    """With position embeddings off, permuting tokens inside one window
    permutes the outputs the same way (window attention is a set op)."""
    enc = CondEncoder(np.random.default_rng(3), input_size=16,
                      patch_sizes=(4,), dim=16, window=16, heads=2, depth=1)
    toks = rng.standard_normal((1, 16, 16))
    perm = np.random.default_rng(0).permutation(16)
    a = enc.encode_tokens(Tensor(toks), add_pos=False).data
    b = enc.encode_tokens(Tensor(toks[:, perm]), add_pos=False).data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-10)
    ad.clear_tape()


def test_position_embedding_breaks_equivariance(rng):
    enc = CondEncoder(np.random.default_rng(3), input_size=16,
                      patch_sizes=(4,), dim=16, window=16, heads=2, depth=1)
    toks = rng.standard_normal((1, 16, 16))
    perm = np.random.default_rng(0).permutation(16)
    a = enc.encode_tokens(Tensor(toks)).data
    b = enc.encode_tokens(Tensor(toks[:, perm])).data
    assert np.max(np.abs(b - a[:, perm])) > 1e-4
    ad.clear_tape()


def test_token_count_guard(enc):
    with pytest.raises(ValueError, match="tokens"):
        enc.encode_tokens(Tensor(np.zeros((1, 100, 32))))


def test_gradients_reach_all_parameters(enc, rng):
    y = Tensor(rng.random((1, 1, 64, 64)), requires_grad=True)
    out = enc(y)
    ad.backward(ad.mean(out * out))
    for name, p in enc.named_parameters():
        assert p.grad is not None, name
    assert y.grad is not None
    ad.clear_tape()
