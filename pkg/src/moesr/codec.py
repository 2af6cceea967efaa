"""Vector-quantized autoencoder that defines the latent space.

The encoder sees the target image alongside its bias-field and displacement
maps (4 input channels) and produces a code map at 1/4 resolution whose
channel dimension matches the codebook.  The latent convention multiplies
encoder output by ``scale_factor`` and divides it back out on decode; the
codebook lives in the scaled space, which is initialized near unit variance
so diffusion over it starts from a matched N(0, 1) prior.  ``decode`` snaps
its input to the nearest codewords before decoding and clamps to [0,1] only
when asked (inference).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, ConvTranspose2d, Module, ResBlock, _touch


class VQCodec(Module):
    def __init__(self, rng: np.random.Generator, base: int = 24,
                 code_dim: int = 16, codebook_size: int = 64,
                 scale_factor: float = 0.2, commit_beta: float = 0.25):
        c0, c1, c2 = base, base + 8, base + 24
        self.enc_stem = Conv2d(4, c0, 3, rng, padding=1)
        self.enc_down1 = Conv2d(c0, c1, 4, rng, stride=2, padding=1)
        self.enc_res1 = ResBlock(c1, rng)
        self.enc_down2 = Conv2d(c1, c2, 4, rng, stride=2, padding=1)
        self.enc_res2 = ResBlock(c2, rng)
        self.enc_head = Conv2d(c2, code_dim, 1, rng)
        # counteract the interface scale at init so the scaled latent starts
        # near unit variance (the diffusion prior); training keeps that basin
        self.enc_head.weight.data *= 1.0 / scale_factor
        self.dec_stem = Conv2d(code_dim, c2, 1, rng)
        self.dec_res1 = ResBlock(c2, rng)
        self.dec_up1 = ConvTranspose2d(c2, c1, 4, rng, stride=2, padding=1)
        self.dec_res2 = ResBlock(c1, rng)
        self.dec_up2 = ConvTranspose2d(c1, c0, 4, rng, stride=2, padding=1)
        self.dec_head = Conv2d(c0, 1, 3, rng, padding=1)
        self.codebook = Tensor(
            rng.standard_normal((codebook_size, code_dim)),
            requires_grad=True)
        self.scale_factor = scale_factor
        self.commit_beta = commit_beta
        self.code_dim = code_dim
        self.codebook_size = codebook_size
        self.usage = np.full(codebook_size, 1.0 / codebook_size)
        self.usage_decay = 0.99

    # -- submodule groupings (used for cost accounting) ---------------------
    def encoder_modules(self):
        return [self.enc_stem, self.enc_down1, self.enc_res1,
                self.enc_down2, self.enc_res2, self.enc_head]

    def decoder_modules(self):
        return [self.dec_stem, self.dec_res1, self.dec_up1,
                self.dec_res2, self.dec_up2, self.dec_head]

    def decoder_params(self):
        out = []
        for m in self.decoder_modules():
            out.extend(m.parameters())
        out.append(self.codebook)
        return out

    # -- pipeline ------------------------------------------------------------
    def encode(self, x, bias, warp) -> Tensor:
        """(x, bias, warp) -> scaled latent [B, code_dim, H/4, W/4]."""
        x, bias, warp = (t if isinstance(t, Tensor) else Tensor(t)
                         for t in (x, bias, warp))
        inp = ad.concat([x, bias, warp], axis=1)
        h = ad.silu(self.enc_stem(inp))
        h = self.enc_res1(self.enc_down1(h))
        h = self.enc_res2(self.enc_down2(h))
        z = self.enc_head(ad.silu(h))
        return z * self.scale_factor

    def quantize(self, z: Tensor):
        """Nearest-codeword lookup with a straight-through estimator.

        Returns (z_q_st, indices, codebook_loss, commitment_loss); the
        straight-through output carries d(loss)/dz_q directly to z, so the
        two gradients are identical by construction.
        """
        _touch(self.codebook)
        b, c, h, w = z.shape
        if c != self.code_dim:
            raise ValueError(f"latent has {c} channels, codebook expects {self.code_dim}")
        flat = z.data.transpose(0, 2, 3, 1).reshape(-1, c)
        d2 = (np.sum(flat * flat, axis=1, keepdims=True)
              - 2.0 * flat @ self.codebook.data.T
              + np.sum(self.codebook.data ** 2, axis=1))
        idx = np.argmin(d2, axis=1)
        gathered = ad.getitem(self.codebook, idx)            # [B*h*w, c]
        z_q = ad.transpose(ad.reshape(gathered, (b, h, w, c)), (0, 3, 1, 2))
        z_const = Tensor(z.data)
        codebook_loss = ad.mean((z_q - z_const) ** 2)
        commitment = ad.mean((z - Tensor(z_q.data)) ** 2) * self.commit_beta
        z_q_st = z + Tensor(z_q.data - z.data)
        return z_q_st, idx.reshape(b, h, w), codebook_loss, commitment

    def decode(self, z: Tensor, clamp: bool = False, quantized: bool = True):
        if quantized:
            z, _, _, _ = self.quantize(z)
        z = z * (1.0 / self.scale_factor)   # undo the interface scale
        h = self.dec_res1(self.dec_stem(z))
        h = self.dec_res2(self.dec_up1(h))
        h = ad.silu(self.dec_up2(h))
        x = self.dec_head(h)
        if clamp:
            return Tensor(np.clip(x.data, 0.0, 1.0))
        return x

    # -- codebook health -----------------------------------------------------
    def note_usage(self, idx: np.ndarray):
        hist = np.bincount(idx.reshape(-1), minlength=self.codebook_size)
        frac = hist / max(1, idx.size)
        self.usage = self.usage_decay * self.usage + (1 - self.usage_decay) * frac

    def revive_dead_codes(self, z_batch: Tensor, rng: np.random.Generator,
                          threshold: float | None = None) -> int:
        """Re-seed rarely used codewords from current encoder outputs."""
        if threshold is None:
            threshold = 1.0 / (8 * self.codebook_size)
        dead = np.flatnonzero(self.usage < threshold)
        if dead.size == 0:
            return 0
        flat = z_batch.data.transpose(0, 2, 3, 1).reshape(-1, self.code_dim)
        picks = rng.integers(0, flat.shape[0], size=dead.size)
        noise = 0.01 * rng.standard_normal((dead.size, self.code_dim))
        self.codebook.data[dead] = flat[picks] + noise
        self.usage[dead] = 1.0 / self.codebook_size
        return int(dead.size)

    def alive_fraction(self, counts: np.ndarray) -> float:
        return float(np.mean(counts > 0))

    # -- cost ------------------------------------------------------------------
    def macs(self, hr: int) -> dict[str, int]:
        h2, h4 = hr // 2, hr // 4
        enc = (self.enc_stem.macs((hr, hr)) + self.enc_down1.macs((hr, hr))
               + self.enc_res1.macs((h2, h2)) + self.enc_down2.macs((h2, h2))
               + self.enc_res2.macs((h4, h4)) + self.enc_head.macs((h4, h4)))
        dec = (self.dec_stem.macs((h4, h4)) + self.dec_res1.macs((h4, h4))
               + self.dec_up1.macs((h4, h4)) + self.dec_res2.macs((h2, h2))
               + self.dec_up2.macs((h2, h2)) + self.dec_head.macs((hr, hr)))
        lookup = h4 * h4 * self.codebook_size * self.code_dim
        return {"encode": enc, "decode": dec + lookup}
