"""Training objectives.

Per-expert losses pair noise-prediction MSE with a role-specific task term:
a fixed-filter perceptual distance for the smooth-anatomy expert, Sobel plus
full-spectrum distances for the texture expert, and a multi-scale windowed
spectral distance for the global expert.  The gate is trained against
MAD-tempered soft targets derived from how well each expert's clean estimate
matches the true latent, with a diversity penalty on inter-expert cosine
similarity, and the gating loss joins the total weighted by the inverse of
its own EMA-estimated variance.

Reduction convention: every squared norm is a mean over the elements it
covers, so magnitudes are comparable across resolutions.  The spectral
terms average over frequency bins of the unnormalized DFT, which keeps the
Parseval factor H*W relative to a pixel-space MSE.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fourier import _hann2d, dft2

EPS_LOG = 1e-12
EPS_T = 1e-3
EPS_W = 1e-6
W_CLAMP = 1e3

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
LAP3 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
DIAG_45 = np.array([[0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [-2.0, -1.0, 0.0]])
DIAG_135 = np.array([[2.0, 1.0, 0.0], [1.0, 0.0, -1.0], [0.0, -1.0, -2.0]])


def _gauss5() -> np.ndarray:
    g = np.exp(-0.5 * (np.arange(5.0) - 2.0) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _depthwise(kernels: list[np.ndarray], ch: int) -> np.ndarray:
    """Stack per-channel copies of each kernel into a dense conv weight."""
    k = kernels[0].shape[0]
    w = np.zeros((len(kernels) * ch, ch, k, k))
    for f, kern in enumerate(kernels):
        for c in range(ch):
            w[f * ch + c, c] = kern
    return w


def _reflect_idx(n: int, pad: int) -> np.ndarray:
    return np.concatenate([np.arange(pad, 0, -1), np.arange(n),
                           np.arange(n - 2, n - 2 - pad, -1)])


def reflect_pad(x: Tensor, pad: int) -> Tensor:
    """Symmetric (edge-pixel-excluding) padding of the trailing two axes."""
    if pad == 0:
        return x
    h, w = x.shape[-2], x.shape[-1]
    if pad >= h or pad >= w:
        raise ValueError(f"reflect pad {pad} too large for {h}x{w}")
    lead = (slice(None),) * (x.ndim - 2)
    x = x[lead + (_reflect_idx(h, pad),)]
    return x[lead + (slice(None), _reflect_idx(w, pad))]


def _mse(a: Tensor, b: Tensor, batched: bool) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    sq = d * d
    if batched:
        return ad.mean(sq, tuple(range(1, sq.ndim)))
    return ad.mean(sq)


class FixedPerceptualBank:
    """Deterministic 3-level filter pyramid standing in for a learned
    feature extractor: Gaussian blur, Laplacian, and four oriented edge
    filters per channel, with blur-and-decimate between levels.

    The filters are constants; ``fingerprint()`` hashes them so tests can
    pin the bank's identity.
    """

    def __init__(self, levels: int = 3):
        self.levels = levels
        self.gauss = _gauss5()
        self.edges = [LAP3, SOBEL_X, SOBEL_Y, DIAG_45, DIAG_135]
        self._cache: dict[int, tuple[Tensor, Tensor]] = {}

    def fingerprint(self) -> str:
        blob = np.concatenate([self.gauss.ravel()]
                              + [k.ravel() for k in self.edges])
        return hashlib.sha256(blob.tobytes()).hexdigest()

    def _weights(self, ch: int) -> tuple[Tensor, Tensor]:
        if ch not in self._cache:
            self._cache[ch] = (Tensor(_depthwise([self.gauss], ch)),
                               Tensor(_depthwise(self.edges, ch)))
        return self._cache[ch]

    def _blur(self, x: Tensor) -> Tensor:
        wg, _ = self._weights(x.shape[1])
        return ad.conv2d(reflect_pad(x, 2), wg)

    def features(self, x: Tensor) -> list[Tensor]:
        """Per-level feature maps [B, 6*C, h_l, w_l] for a 4-D input."""
        if x.ndim != 4:
            raise ValueError(f"bank expects [B, C, H, W], got {x.shape}")
        out = []
        for lvl in range(self.levels):
            wg, we = self._weights(x.shape[1])
            smooth = ad.conv2d(reflect_pad(x, 2), wg)
            edges = ad.conv2d(reflect_pad(x, 1), we)
            out.append(ad.concat([smooth, edges], axis=1))
            if lvl + 1 < self.levels:
                x = self._blur(x)[:, :, ::2, ::2]
        return out


def diffusion_loss(eps_hat: Tensor, eps: Tensor, batched: bool = False) -> Tensor:
    """Mean squared error of the noise estimate."""
    return _mse(eps_hat, eps, batched)


def task_recon(z0_hat: Tensor, z0: Tensor, bank: FixedPerceptualBank,
               batched: bool = False) -> Tensor:
    """Latent MSE plus fixed-filter perceptual distance (all pyramid levels)."""
    total = _mse(z0_hat, z0, batched)
    for fu, fv in zip(bank.features(z0_hat), bank.features(z0)):
        total = total + _mse(fu, fv, batched)
    return total


def task_edge_freq(z0_hat: Tensor, z0: Tensor, batched: bool = False) -> Tensor:
    """Sobel-gradient MSE (valid conv, so constants drop out) plus the
    mean squared complex difference of the unnormalized full-image DFT."""
    if z0_hat.shape != z0.shape:
        raise ValueError(f"shape mismatch {z0_hat.shape} vs {z0.shape}")
    ch = z0.shape[1]
    w_sobel = Tensor(_depthwise([SOBEL_X, SOBEL_Y], ch))
    term = _mse(ad.conv2d(z0_hat, w_sobel), ad.conv2d(z0, w_sobel), batched)
    gu, gv = dft2(z0_hat), dft2(z0)
    d2 = (gu.re - gv.re) ** 2 + (gu.im - gv.im) ** 2
    if batched:
        return term + ad.mean(d2, tuple(range(1, d2.ndim)))
    return term + ad.mean(d2)


def stft_scales(h: int, w: int) -> tuple[int, ...]:
    return (8, 16, 32) if min(h, w) >= 32 else (4, 8, 16)


def _gather_windows(x: Tensor, ws: int, hop: int) -> Tensor:
    b, c, h, w = x.shape
    ny = (h - ws) // hop + 1
    nx = (w - ws) // hop + 1
    iy = (np.arange(ny) * hop)[:, None] + np.arange(ws)[None, :]
    ix = (np.arange(nx) * hop)[:, None] + np.arange(ws)[None, :]
    key = (slice(None), slice(None),
           iy[:, None, :, None], ix[None, :, None, :])
    return x[key]  # [B, C, ny, nx, ws, ws]


def task_stft(z0_hat: Tensor, z0: Tensor,
              scales: tuple[int, ...] | None = None,
              batched: bool = False) -> Tensor:
    """Windowed spectral distance, summed over scales and window positions.

    Each Hann-windowed patch is transformed with the unnormalized DFT; the
    squared complex difference is averaged over that window's channels and
    bins, then the per-window values are summed.
    """
    if z0_hat.shape != z0.shape:
        raise ValueError(f"shape mismatch {z0_hat.shape} vs {z0.shape}")
    if z0_hat.ndim != 4:
        raise ValueError(f"expected [B, C, H, W], got {z0_hat.shape}")
    b, c, h, w = z0.shape
    if scales is None:
        scales = stft_scales(h, w)
    total = None
    for ws in scales:
        if ws > h or ws > w:
            raise ValueError(f"window {ws} exceeds latent extent {h}x{w}")
        hop = max(ws // 2, 1)
        win = Tensor(_hann2d(ws))
        pu = _gather_windows(z0_hat, ws, hop) * win
        pv = _gather_windows(z0, ws, hop) * win
        gu, gv = dft2(pu), dft2(pv)
        d2 = (gu.re - gv.re) ** 2 + (gu.im - gv.im) ** 2
        per_window = ad.mean(d2, (1, 4, 5))        # [B, ny, nx]
        contrib = ad.sum_(per_window, (1, 2))      # [B]
        total = contrib if total is None else total + contrib
    return total if batched else ad.mean(total)


def expert_losses(diff: list[Tensor], task: list[Tensor],
                  gates: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Gate-weighted sum of per-expert (diffusion + task) losses.

    ``diff`` and ``task`` hold per-item [B] vectors; returns the scalar
    gated loss and the per-expert combined vectors.
    """
    b, k = gates.shape
    if len(diff) != k or len(task) != k:
        raise ValueError("one diffusion and one task loss per expert required")
    per_expert = [d + t for d, t in zip(diff, task)]
    weighted = None
    for i, pe in enumerate(per_expert):
        term = ad.reshape(gates[:, i:i + 1], (b,)) * pe
        weighted = term if weighted is None else weighted + term
    return ad.mean(weighted), per_expert


def mad_temperature(values: Tensor) -> Tensor:
    """Robust softmax temperature: 1.4826 * median(|v - median(v)|),
    floored at 1e-3 so identical cosines cannot collapse the softmax."""
    if values.size == 0:
        raise ValueError("mad_temperature needs at least one value")
    flat = ad.reshape(values, (values.size,))
    med = ad.median1d(flat)
    dev = ad.abs_(flat - med)
    mad = ad.median1d(dev)
    return ad.maximum(mad * 1.4826, Tensor(EPS_T))


def supervised_gate_targets(z0_hats: list[Tensor], z0: Tensor
                            ) -> tuple[Tensor, Tensor, Tensor]:
    """Soft routing targets from clean-estimate accuracy.

    Cosine similarity of each expert's flattened estimate to the true
    latent, tempered by the MAD of all K*B cosines of the step, then
    softmaxed over experts.  Returns (targets [B,K], T, cosines [B,K]).
    """
    b = z0.shape[0]
    cols = []
    zf = ad.reshape(z0, (b, z0.size // b))
    for zh in z0_hats:
        c = ad.cosine_similarity(ad.reshape(zh, (b, zh.size // b)), zf, axis=1)
        cols.append(ad.reshape(c, (b, 1)))
    cos = ad.concat(cols, axis=1)
    t_mad = mad_temperature(cos)
    g_star = ad.softmax(cos / t_mad, axis=1)
    return g_star, t_mad, cos


def gating_loss(gates: Tensor, g_star: Tensor, z0_hats: list[Tensor]
                ) -> tuple[Tensor, Tensor, Tensor]:
    """Supervised cross-entropy (1/K-scaled) plus diversity regularization.

    The diversity term is log(1 + mean_i max_{j != i} cos(u_i, u_j)) over
    whole-batch flattened expert outputs: it is log 2 when all experts
    collapse to one function and 0 when their outputs are orthogonal.
    Returns (total, supervised, diversity).
    """
    k = len(z0_hats)
    if k < 2:
        raise ValueError("diversity term needs at least two experts")
    if gates.shape != g_star.shape:
        raise ValueError(f"gate shape {gates.shape} != targets {g_star.shape}")
    ce = g_star * ad.log(gates + EPS_LOG)
    sup = ad.mean(ad.sum_(ce, 1)) * (-1.0 / k)

    flats = [ad.reshape(z, (1, z.size)) for z in z0_hats]
    pair: dict[tuple[int, int], Tensor] = {}
    for i in range(k):
        for j in range(i + 1, k):
            c = ad.cosine_similarity(flats[i], flats[j], axis=1)
            pair[(i, j)] = ad.reshape(c, ())
    worst = []
    for i in range(k):
        cands = [pair[(min(i, j), max(i, j))] for j in range(k) if j != i]
        m = cands[0]
        for c in cands[1:]:
            m = ad.maximum(m, c)
        worst.append(m)
    avg = worst[0]
    for m in worst[1:]:
        avg = avg + m
    avg = avg * (1.0 / k)
    div = ad.log(ad.maximum(avg + 1.0, Tensor(EPS_LOG)))
    return sup + div, sup, div


class VarianceTracker:
    """EMA mean/second-moment of a scalar stream; the prior (m=0, s=1)
    deliberately reads as unit variance before any update."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.m = 0.0
        self.s = 1.0

    def variance(self) -> float:
        return max(self.s - self.m * self.m, 0.0)

    def update(self, x: float):
        x = float(x)
        self.m = self.decay * self.m + (1.0 - self.decay) * x
        self.s = self.decay * self.s + (1.0 - self.decay) * x * x

    def state(self) -> np.ndarray:
        return np.array([self.m, self.s])

    def load(self, state: np.ndarray):
        self.m, self.s = float(state[0]), float(state[1])


def uncertainty_weight(tracker: VarianceTracker, l_gating: float) -> float:
    """Inverse-variance weight from the PRE-update estimate (so the first
    call returns exactly 1), then fold the new observation into the EMA."""
    w = min(1.0 / max(tracker.variance(), EPS_W), W_CLAMP)
    tracker.update(l_gating)
    return w


def total_loss(l_expert: Tensor, l_gating: Tensor, w: float) -> Tensor:
    """l_expert + w * l_gating with w held constant for the backward pass."""
    return l_expert + l_gating * float(w)


@dataclass
class LossReport:
    """Per-step numbers destined for the training log."""

    diffusion: list[float] = field(default_factory=list)
    task: list[float] = field(default_factory=list)
    expert: float = 0.0
    supervised: float = 0.0
    diversity: float = 0.0
    gating: float = 0.0
    weight: float = 0.0
    total: float = 0.0
    t_mad: float = 0.0

    def validate(self):
        vals = (self.diffusion + self.task
                + [self.expert, self.supervised, self.diversity,
                   self.gating, self.weight, self.total, self.t_mad])
        if not all(np.isfinite(v) for v in vals):
            raise FloatingPointError("non-finite loss report")
        recon = self.expert + self.weight * self.gating
        if abs(recon - self.total) > 1e-12 * max(1.0, abs(self.total)):
            raise AssertionError("total != expert + w * gating")
