"""The three denoising experts, their aggregation, and routed sampling.

Every expert is a small U-Net over the latent grid that consumes the noisy
latent, the projected conditioning map, and its own gate weight as an
extra input channel, plus a sinusoidal timestep embedding injected at the
bottleneck.  The architectures differ where it matters for their roles:

  * expert 1 (smooth anatomy): Laplacian edge enhancement early, dilated
    bottleneck for a wider receptive field;
  * expert 2 (texture): dense feature reuse and a complex-valued conv block
    (channel halves acting as real/imaginary parts) in the bottleneck;
  * expert 3 (global structure): channel attention throughout and one
    non-local block on the mid-resolution grid.

Sampling runs an independent deterministic DDIM chain per selected expert
from a shared Gaussian start and mixes the final clean-latent estimates
with the (renormalized) gate weights; per-step mixing is available behind
a flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (Conv2d, ConvTranspose2d, Linear, Module, ResBlock,
                 sinusoidal_embedding)
from .resize import resize_bilinear
from .schedules import NoiseSchedule, ddim_step, estimate_clean

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


class TimeEmbed(Module):
    def __init__(self, ch: int, rng: np.random.Generator, emb_dim: int = 32):
        self.fc1 = Linear(emb_dim, ch, rng)
        self.fc2 = Linear(ch, ch, rng)
        self.emb_dim = emb_dim
        self.ch = ch

    def __call__(self, t: int) -> Tensor:
        base = Tensor(sinusoidal_embedding(float(t), self.emb_dim).reshape(1, -1))
        h = self.fc2(ad.silu(self.fc1(base)))
        return ad.reshape(h, (1, self.ch, 1, 1))

    def macs(self) -> int:
        return self.fc1.macs(1) + self.fc2.macs(1)


def _depthwise_const(kernel: np.ndarray, ch: int) -> np.ndarray:
    k = kernel.shape[0]
    w = np.zeros((ch, ch, k, k))
    for c in range(ch):
        w[c, c] = kernel
    return w


class LaplacianEdge(Module):
    """x + mix(laplacian(x)): fixed high-pass filter, learned 1x1 mixing."""

    def __init__(self, ch: int, rng: np.random.Generator):
        self.filter = Tensor(_depthwise_const(LAPLACIAN, ch))
        self.mix = Conv2d(ch, ch, 1, rng)
        self.ch = ch

    def __call__(self, x: Tensor) -> Tensor:
        edges = ad.conv2d(x, self.filter, 1, 1)
        return x + self.mix(edges)

    def macs(self, hw) -> int:
        return hw[0] * hw[1] * self.ch * (9 + self.ch)


class DenseBlock(Module):
    """DenseNet-style feature growth followed by 1x1 compression back to ch."""

    def __init__(self, ch: int, rng: np.random.Generator, growth: int = 16,
                 layers: int = 3):
        self.convs = [Conv2d(ch + i * growth, growth, 3, rng, padding=1)
                      for i in range(layers)]
        self.compress = Conv2d(ch + layers * growth, ch, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        feats = x
        for conv in self.convs:
            new = conv(ad.silu(feats))
            feats = ad.concat([feats, new], axis=1)
        return x + self.compress(ad.silu(feats))

    def macs(self, hw) -> int:
        return sum(c.macs(hw) for c in self.convs) + self.compress.macs(hw)


class ComplexConvBlock(Module):
    """Complex 3x3 convolution treating channel halves as (re, im)."""

    def __init__(self, ch: int, rng: np.random.Generator):
        if ch % 2:
            raise ValueError("complex block needs an even channel count")
        half = ch // 2
        self.w_re = Conv2d(half, half, 3, rng, padding=1)
        self.w_im = Conv2d(half, half, 3, rng, padding=1, bias=False)
        self.half = half

    def __call__(self, x: Tensor) -> Tensor:
        a = x[:, : self.half]
        b = x[:, self.half:]
        re = self.w_re(a) - self.w_im(b)
        im = self.w_im(a) + self.w_re(b)
        return x + ad.concat([ad.silu(re), ad.silu(im)], axis=1)

    def macs(self, hw) -> int:
        return 2 * (self.w_re.macs(hw) + self.w_im.macs(hw))


class SEBlock(Module):
    """Squeeze-and-excitation channel attention."""

    def __init__(self, ch: int, rng: np.random.Generator, reduction: int = 4):
        self.fc1 = Linear(ch, max(ch // reduction, 4), rng)
        self.fc2 = Linear(max(ch // reduction, 4), ch, rng)
        self.ch = ch

    def __call__(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        pooled = ad.mean(x, (2, 3))                           # [B,C]
        s = ad.sigmoid(self.fc2(ad.silu(self.fc1(pooled))))
        return x * ad.reshape(s, (b, self.ch, 1, 1))

    def macs(self, hw) -> int:
        return self.fc1.macs(1) + self.fc2.macs(1)


class NonLocalBlock(Module):
    """Self-attention over all spatial positions of the feature map."""

    def __init__(self, ch: int, rng: np.random.Generator):
        inner = ch // 2
        self.theta = Conv2d(ch, inner, 1, rng, bias=False)
        self.phi = Conv2d(ch, inner, 1, rng, bias=False)
        self.g = Conv2d(ch, inner, 1, rng, bias=False)
        self.out = Conv2d(inner, ch, 1, rng)
        self.inner = inner
        self.ch = ch

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        n = h * w
        t = ad.transpose(ad.reshape(self.theta(x), (b, self.inner, n)), (0, 2, 1))
        p = ad.reshape(self.phi(x), (b, self.inner, n))
        v = ad.transpose(ad.reshape(self.g(x), (b, self.inner, n)), (0, 2, 1))
        att = ad.softmax(ad.matmul(t, p) * (self.inner ** -0.5), axis=-1)
        mixed = ad.transpose(ad.matmul(att, v), (0, 2, 1))
        return x + self.out(ad.reshape(mixed, (b, self.inner, h, w)))

    def macs(self, hw) -> int:
        n = hw[0] * hw[1]
        convs = (self.theta.macs(hw) + self.phi.macs(hw) + self.g.macs(hw)
                 + self.out.macs(hw))
        return convs + 2 * n * n * self.inner


class Expert(Module):
    """Shared U-Net skeleton; subclasses choose the specialty blocks."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 base: int = 32):
        c0, c1, c2 = base, base + 16, base + 32
        self.stem = Conv2d(in_ch, c0, 3, rng, padding=1)
        self.enc0 = self._enc_block(0, c0, rng)
        self.down1 = Conv2d(c0, c1, 4, rng, stride=2, padding=1)
        self.enc1 = self._enc_block(1, c1, rng)
        self.down2 = Conv2d(c1, c2, 4, rng, stride=2, padding=1)
        self.mid = self._mid_block(c2, rng)
        self.temb = TimeEmbed(c2, rng)
        self.mid2 = ResBlock(c2, rng)
        self.up1 = ConvTranspose2d(c2, c1, 4, rng, stride=2, padding=1)
        self.fuse1 = Conv2d(2 * c1, c1, 1, rng)
        self.dec1 = self._dec_block(1, c1, rng)
        self.up2 = ConvTranspose2d(c1, c0, 4, rng, stride=2, padding=1)
        self.fuse0 = Conv2d(2 * c0, c0, 1, rng)
        self.dec0 = self._dec_block(0, c0, rng)
        self.head = Conv2d(c0, out_ch, 1, rng)
        # zero head: the denoiser starts as the identity estimate
        self.head.weight.data[:] = 0.0
        self.head.bias.data[:] = 0.0
        self.widths = (c0, c1, c2)

    # subclass hooks: return a list of blocks
    def _enc_block(self, level: int, ch: int, rng):
        raise NotImplementedError

    def _mid_block(self, ch: int, rng):
        raise NotImplementedError

    def _dec_block(self, level: int, ch: int, rng):
        raise NotImplementedError

    @staticmethod
    def _run(blocks, h):
        for blk in blocks:
            h = blk(h)
        return h

    def __call__(self, x: Tensor, t: int) -> Tensor:
        h = self.stem(x)
        s0 = self._run(self.enc0, h)
        h = self.down1(ad.silu(s0))
        s1 = self._run(self.enc1, h)
        h = self.down2(ad.silu(s1))
        h = self._run(self.mid, h)
        h = h + self.temb(t)
        h = self.mid2(h)
        h = self.up1(ad.silu(h))
        h = self.fuse1(ad.concat([h, s1], axis=1))
        h = self._run(self.dec1, h)
        h = self.up2(ad.silu(h))
        h = self.fuse0(ad.concat([h, s0], axis=1))
        h = self._run(self.dec0, h)
        return self.head(h)

    def macs(self, side: int) -> int:
        s0, s1, s2 = (side, side), (side // 2, side // 2), (side // 4, side // 4)
        total = self.stem.macs(s0)
        total += sum(b.macs(s0) for b in self.enc0)
        total += self.down1.macs(s0)
        total += sum(b.macs(s1) for b in self.enc1)
        total += self.down2.macs(s1)
        total += sum(b.macs(s2) for b in self.mid)
        total += self.temb.macs()
        total += self.mid2.macs(s2)
        total += self.up1.macs(s2)
        total += self.fuse1.macs(s1)
        total += sum(b.macs(s1) for b in self.dec1)
        total += self.up2.macs(s1)
        total += self.fuse0.macs(s0)
        total += sum(b.macs(s0) for b in self.dec0)
        total += self.head.macs(s0)
        return total


class SmoothExpert(Expert):
    """Expert 1: edge-aware encoder, dilated bottleneck."""

    def _enc_block(self, level, ch, rng):
        if level == 0:
            return [ResBlock(ch, rng), LaplacianEdge(ch, rng)]
        return [ResBlock(ch, rng)]

    def _mid_block(self, ch, rng):
        return [ResBlock(ch, rng, dilation=2)]

    def _dec_block(self, level, ch, rng):
        return [ResBlock(ch, rng)]


class TextureExpert(Expert):
    """Expert 2: dense feature reuse, complex-conv bottleneck."""

    def _enc_block(self, level, ch, rng):
        if level == 0:
            return [ResBlock(ch, rng)]
        return [DenseBlock(ch, rng)]

    def _mid_block(self, ch, rng):
        return [ComplexConvBlock(ch, rng)]

    def _dec_block(self, level, ch, rng):
        if level == 0:
            return [ResBlock(ch, rng)]
        return [DenseBlock(ch, rng)]


class GlobalExpert(Expert):
    """Expert 3: channel attention plus one non-local block."""

    def _enc_block(self, level, ch, rng):
        return [ResBlock(ch, rng), SEBlock(ch, rng)]

    def _mid_block(self, ch, rng):
        return [ResBlock(ch, rng)]

    def _dec_block(self, level, ch, rng):
        if level == 1:
            return [NonLocalBlock(ch, rng), ResBlock(ch, rng), SEBlock(ch, rng)]
        return [ResBlock(ch, rng), SEBlock(ch, rng)]


class CondProjector(Module):
    """1x1 projection of the finest token grid to conditioning channels."""

    def __init__(self, dim: int, out_ch: int, rng: np.random.Generator):
        self.proj = Conv2d(dim, out_ch, 1, rng)
        self.out_ch = out_ch

    def __call__(self, fine_grid: Tensor) -> Tensor:
        return self.proj(fine_grid)

    def macs(self, hw) -> int:
        return self.proj.macs(hw)


def predict_eps(expert: Expert, z_t: Tensor, cond_map: Tensor,
                gate_w: Tensor, t: int) -> Tensor:
    """Run one expert on (noisy latent, conditioning map, gate channel)."""
    b, _, h, w = z_t.shape
    if cond_map.shape[0] != b or cond_map.shape[2:] != z_t.shape[2:]:
        raise ValueError(
            f"conditioning map {cond_map.shape} does not match latent {z_t.shape}")
    plane = Tensor(np.ones((1, 1, h, w)))
    g_chan = ad.reshape(gate_w, (b, 1, 1, 1)) * plane
    x = ad.concat([z_t, cond_map, g_chan], axis=1)
    return expert(x, t)


def aggregate(z0_hats: list[Tensor], gates: Tensor) -> Tensor:
    """Gate-weighted sum of per-expert clean-latent estimates."""
    b, k = gates.shape
    if len(z0_hats) != k:
        raise ValueError(f"{len(z0_hats)} estimates for {k} gate columns")
    out = None
    for i, z in enumerate(z0_hats):
        w = ad.reshape(gates[:, i:i + 1], (b, 1, 1, 1))
        term = z * w
        out = term if out is None else out + term
    return out


@dataclass
class ModelBundle:
    codec: object
    cond: object
    projector: CondProjector
    gate: object
    experts: list
    schedules: list[NoiseSchedule]
    usage: np.ndarray

    def trainable_modules(self):
        return {"cond": self.cond, "projector": self.projector,
                "gate": self.gate, "expert0": self.experts[0],
                "expert1": self.experts[1], "expert2": self.experts[2]}

    def all_modules(self):
        mods = {"codec": self.codec}
        mods.update(self.trainable_modules())
        return mods

    def named_parameters(self):
        for prefix, mod in self.all_modules().items():
            for name, p in mod.named_parameters(f"{prefix}."):
                yield name, p

    def trainable_parameters(self):
        out = []
        for mod in self.trainable_modules().values():
            out.extend(mod.parameters())
        return out


def select_topk(gates: np.ndarray, k: int | None):
    """Indices (descending weight, stable ties) and renormalized weights."""
    g = np.asarray(gates, dtype=np.float64).reshape(-1)
    if k is None or k >= g.size:
        idx = np.arange(g.size)
    else:
        if k < 1:
            raise ValueError("top-k needs k >= 1")
        idx = np.argsort(-g, kind="stable")[:k]
    w = g[idx]
    return idx, w / w.sum()


def sample(bundle: ModelBundle, y_lr: np.ndarray, rng: np.random.Generator,
           top_k: int | None = None, per_step_mix: bool = False,
           start: str = "unit", select: tuple[int, ...] | None = None) -> dict:
    """Super-resolve one low-resolution image.

    start="unit" draws the chain start from N(0, I); "matched" scales it to
    the terminal noise level sqrt(1 - abar_T) of each expert's schedule.
    ``select`` forces a fixed expert subset (gate weights renormalized over
    it), overriding top-k routing.
    """
    if y_lr.ndim != 2:
        raise ValueError("sample expects a single [h, w] image")
    size = bundle.cond.input_size
    lat = size // 4
    code_dim = bundle.codec.code_dim
    with ad.no_grad():
        y_up = resize_bilinear(y_lr, (size, size))
        tokens = bundle.cond(Tensor(y_up.reshape(1, 1, size, size)))
        gates, _, _, _ = bundle.gate(tokens, bundle.usage)
        cond_map = bundle.projector(bundle.cond.fine_tokens(tokens))
        g_np = gates.data.reshape(-1)
        if select is not None:
            sel = np.asarray(select, dtype=int)
            w = g_np[sel]
            weights = w / w.sum()
        else:
            sel, weights = select_topk(g_np, top_k)
        eps0 = rng.standard_normal((1, code_dim, lat, lat))

        if per_step_mix:
            z0_mix, z0_each = _sample_coupled(bundle, sel, weights, cond_map,
                                              eps0, start)
        else:
            z0_each = []
            for i, wi in zip(sel, weights):
                sched = bundle.schedules[i]
                z = _chain_start(eps0, sched, start)
                for t in range(sched.t_max, 0, -1):
                    eps_hat = predict_eps(bundle.experts[i], Tensor(z),
                                          cond_map, Tensor([wi]), t)
                    z = ddim_step(Tensor(z), eps_hat, t, t - 1, sched).data
                z0_each.append(z)
            z0_mix = sum(w * z for w, z in zip(weights, z0_each))

        sr = bundle.codec.decode(Tensor(z0_mix), clamp=True).data[0, 0]
    return {"sr": sr, "gates": g_np, "selected": sel, "weights": weights,
            "z0_mix": z0_mix, "z0_each": z0_each}


def _chain_start(eps0: np.ndarray, sched: NoiseSchedule, start: str):
    if start == "unit":
        return eps0.copy()
    if start == "matched":
        return np.sqrt(1.0 - sched.alpha_bars[sched.t_max]) * eps0
    raise ValueError(f"unknown start mode {start!r}")


def _sample_coupled(bundle, sel, weights, cond_map, eps0, start):
    """Per-step mixing: all selected chains walk a shared rung ladder; the
    mixed clean estimate is re-noised onto each expert's own schedule."""
    scheds = [bundle.schedules[i] for i in sel]
    rungs = max(s.t_max for s in scheds)
    z = [_chain_start(eps0, s, start) for s in scheds]
    t_of = [[int(np.ceil(s.t_max * r / rungs)) for r in range(rungs + 1)]
            for s in scheds]
    z0_hat = [None] * len(sel)
    eps_hat = [None] * len(sel)
    for r in range(rungs, 0, -1):
        for j, (i, s) in enumerate(zip(sel, scheds)):
            t, t_next = t_of[j][r], t_of[j][r - 1]
            if t == t_next and z0_hat[j] is not None:
                continue
            e = predict_eps(bundle.experts[i], Tensor(z[j]), cond_map,
                            Tensor([weights[j]]), t)
            eps_hat[j] = e.data
            z0_hat[j] = estimate_clean(Tensor(z[j]), e, t, s).data
        mix = sum(w * zh for w, zh in zip(weights, z0_hat))
        for j, s in enumerate(scheds):
            t_next = t_of[j][r - 1]
            ab = s.alpha_bars[t_next]
            z[j] = np.sqrt(ab) * mix + np.sqrt(1.0 - ab) * eps_hat[j]
    return mix, z0_hat
