"""Multi-scale token encoder for the conditioning image.

The (upsampled) input is embedded three times with non-overlapping patches
of different sizes; the token streams are concatenated coarse-to-fine,
given learned position embeddings, and refined by transformer blocks whose
self-attention runs inside fixed-size windows of the token sequence.  When
the token count is not a multiple of the window, the tail window is padded
with zero tokens that are masked out of attention and dropped afterwards.

At the default geometry (64 px input, patches 16/8/4) the stream holds
16 + 64 + 256 = 336 tokens, which splits into 21 whole windows, and the
finest token grid (16x16) matches the latent grid exactly.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, LayerNorm, Linear, Module, _touch


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError("embed dim must divide evenly into heads")
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.heads = heads
        self.dim = dim

    def __call__(self, x: Tensor, mask_bias: np.ndarray | None = None) -> Tensor:
        """x: [B, nW, w, dim]; mask_bias: additive [w] logits or None."""
        b, nw, w, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x)                                     # [B,nW,w,3d]
        qkv = ad.reshape(qkv, (b, nw, w, 3, h, dh))
        qkv = ad.transpose(qkv, (3, 0, 1, 4, 2, 5))           # [3,B,nW,h,w,dh]
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = ad.matmul(q, ad.transpose(k, (0, 1, 2, 4, 3))) * (dh ** -0.5)
        if mask_bias is not None:
            logits = logits + Tensor(mask_bias.reshape(1, 1, 1, 1, w))
        att = ad.softmax(logits, axis=-1)
        out = ad.matmul(att, v)                               # [B,nW,h,w,dh]
        out = ad.reshape(ad.transpose(out, (0, 1, 3, 2, 4)), (b, nw, w, d))
        return self.proj(out)

    def macs(self, n_tokens: int, window: int) -> int:
        nw = -(-n_tokens // window)
        return (self.qkv.macs(n_tokens) + self.proj.macs(n_tokens)
                + 2 * nw * self.heads * window * window * (self.dim // self.heads))


class EncoderBlock(Module):
    """Pre-norm window attention followed by a pre-norm MLP, both residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, 2 * dim, rng)
        self.fc2 = Linear(2 * dim, dim, rng)

    def __call__(self, x: Tensor, window: int, mask_bias) -> Tensor:
        b, n, d = x.shape
        nw = n // window
        xw = ad.reshape(x, (b, nw, window, d))
        att = self.attn(self.norm1(xw), mask_bias)
        xw = xw + att
        flat = ad.reshape(xw, (b, n, d))
        return flat + self.fc2(ad.silu(self.fc1(self.norm2(flat))))

    def macs(self, n_tokens: int, window: int) -> int:
        return (self.attn.macs(n_tokens, window)
                + self.fc1.macs(n_tokens) + self.fc2.macs(n_tokens))


class CondEncoder(Module):
    def __init__(self, rng: np.random.Generator, input_size: int = 64,
                 patch_sizes: tuple[int, ...] = (16, 8, 4), dim: int = 64,
                 window: int = 16, heads: int = 4, depth: int = 2):
        for p in patch_sizes:
            if input_size % p:
                raise ValueError(f"input size {input_size} not divisible by patch {p}")
        self.patch_convs = [Conv2d(1, dim, p, rng, stride=p) for p in patch_sizes]
        self.grid_sides = [input_size // p for p in patch_sizes]
        self.token_count = int(sum(s * s for s in self.grid_sides))
        self.pos = Tensor(0.02 * rng.standard_normal((self.token_count, dim)),
                          requires_grad=True)
        self.blocks = [EncoderBlock(dim, heads, rng) for _ in range(depth)]
        self.patch_sizes = tuple(patch_sizes)
        self.input_size = input_size
        self.dim = dim
        self.window = window
        self.fine_side = self.grid_sides[-1]

    def patchify(self, y: Tensor) -> Tensor:
        """[B,1,S,S] -> [B,N,dim] token stream, coarse scale first."""
        if y.ndim != 4 or y.shape[1] != 1 or y.shape[2] != self.input_size \
                or y.shape[3] != self.input_size:
            raise ValueError(
                f"conditioner expects [B,1,{self.input_size},{self.input_size}], got {y.shape}")
        streams = []
        b = y.shape[0]
        for conv, side in zip(self.patch_convs, self.grid_sides):
            t = conv(y)                                       # [B,dim,side,side]
            t = ad.transpose(ad.reshape(t, (b, self.dim, side * side)), (0, 2, 1))
            streams.append(t)
        return ad.concat(streams, axis=1)

    def encode_tokens(self, tokens: Tensor, add_pos: bool = True) -> Tensor:
        b, n, d = tokens.shape
        if n != self.token_count:
            raise ValueError(f"expected {self.token_count} tokens, got {n}")
        if add_pos:
            _touch(self.pos)
            tokens = tokens + self.pos
        pad = (-n) % self.window
        mask_bias = None
        if pad:
            zeros = Tensor(np.zeros((b, pad, d)))
            tokens = ad.concat([tokens, zeros], axis=1)
            mask_bias = np.zeros(self.window)
            mask_bias[self.window - pad:] = -1e9
        for blk in self.blocks:
            tokens = blk(tokens, self.window, mask_bias)
        if pad:
            tokens = tokens[:, :n, :]
        return tokens

    def __call__(self, y: Tensor) -> Tensor:
        return self.encode_tokens(self.patchify(y))

    def fine_tokens(self, tokens: Tensor) -> Tensor:
        """Finest-scale tokens as a [B, dim, side, side] grid."""
        b, n, d = tokens.shape
        side = self.fine_side
        fine = tokens[:, n - side * side:, :]
        return ad.transpose(ad.reshape(fine, (b, side, side, d)), (0, 3, 1, 2))

    def macs(self) -> int:
        total = 0
        for conv, side in zip(self.patch_convs, self.grid_sides):
            total += conv.macs((self.input_size, self.input_size))
        n = self.token_count
        for blk in self.blocks:
            total += blk.macs(n, self.window)
        return total
