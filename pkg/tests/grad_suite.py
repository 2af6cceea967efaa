"""The finite-difference battery shared by the unit and acceptance tests.

Each case is (name, make_loss, shapes): `make_loss` rebuilds a scalar from
tensor arguments so the checker can perturb the underlying buffers, and
`shapes` describes the random inputs to generate.  Cases cover every
differentiable primitive plus the composite training objectives.
"""

from __future__ import annotations

import numpy as np

from moesr import autodiff as ad
from moesr.losses import (FixedPerceptualBank, diffusion_loss, gating_loss,
                          supervised_gate_targets, task_edge_freq, task_recon,
                          task_stft, total_loss, expert_losses)

_BANK = FixedPerceptualBank()


def _spread(t):
    # weighted sum keeps the scalar sensitive to every element
    w = np.linspace(0.5, 1.5, t.size).reshape(t.shape)
    return ad.sum_(t * ad.Tensor(w))


OP_CASES = [
    ("add", lambda a, b: _spread(a + b), [(3, 4), (3, 4)]),
    ("add_broadcast", lambda a, b: _spread(a + b), [(3, 4), (1, 4)]),
    ("sub", lambda a, b: _spread(a - b), [(3, 4), (3, 4)]),
    ("mul", lambda a, b: _spread(a * b), [(3, 4), (3, 4)]),
    ("mul_broadcast", lambda a, b: _spread(a * b), [(2, 3, 4), (3, 1)]),
    ("div", lambda a, b: _spread(a / (b * b + 1.0)), [(3, 4), (3, 4)]),
    ("neg", lambda a: _spread(-a), [(3, 4)]),
    ("pow", lambda a: _spread((a * a + 0.5) ** 1.7), [(3, 4)]),
    ("exp", lambda a: _spread(ad.exp(a)), [(3, 4)]),
    ("log", lambda a: _spread(ad.log(a * a + 0.5)), [(3, 4)]),
    ("sqrt", lambda a: _spread(ad.sqrt(a * a + 0.5)), [(3, 4)]),
    ("tanh", lambda a: _spread(ad.tanh(a)), [(3, 4)]),
    ("sigmoid", lambda a: _spread(ad.sigmoid(a)), [(3, 4)]),
    ("silu", lambda a: _spread(ad.silu(a)), [(3, 4)]),
    ("abs", lambda a: _spread(ad.abs_(a + 0.05)), [(3, 4)]),
    ("maximum", lambda a, b: _spread(ad.maximum(a, b)), [(3, 4), (3, 4)]),
    ("reshape", lambda a: _spread(ad.reshape(a, (4, 3))), [(3, 4)]),
    ("transpose",
     lambda a: _spread(ad.transpose(a, (2, 0, 1))), [(2, 3, 4)]),
    ("getitem_slice", lambda a: _spread(a[1:, ::2]), [(4, 6)]),
    ("getitem_fancy",
     lambda a: _spread(a[np.array([0, 2, 2, 1])]), [(4, 5)]),
    ("getitem_mixed",
     lambda a: _spread(a[:, np.array([1, 1, 3])]), [(2, 5)]),
    ("concat",
     lambda a, b: _spread(ad.concat([a, b], axis=1)), [(2, 3), (2, 4)]),
    ("sum_all", lambda a: ad.sum_(a * a), [(3, 4)]),
    ("sum_axis",
     lambda a: _spread(ad.sum_(a, axis=1, keepdims=True)), [(3, 4)]),
    ("mean_all", lambda a: ad.mean(a * a), [(3, 4)]),
    ("mean_axis", lambda a: _spread(ad.mean(a, axis=(0, 2))), [(2, 3, 4)]),
    ("matmul", lambda a, b: _spread(ad.matmul(a, b)), [(3, 4), (4, 2)]),
    ("matmul_batched",
     lambda a, b: _spread(ad.matmul(a, b)), [(2, 3, 4), (2, 4, 2)]),
    ("conv2d",
     lambda x, w: _spread(ad.conv2d(x, w, stride=1, padding=1)),
     [(1, 2, 5, 5), (3, 2, 3, 3)]),
    ("conv2d_strided",
     lambda x, w: _spread(ad.conv2d(x, w, stride=2, padding=1)),
     [(2, 2, 6, 6), (3, 2, 4, 4)]),
    ("conv2d_dilated",
     lambda x, w: _spread(ad.conv2d(x, w, stride=1, padding=2, dilation=2)),
     [(1, 2, 7, 7), (2, 2, 3, 3)]),
    ("conv_transpose2d",
     lambda x, w: _spread(ad.conv_transpose2d(x, w, stride=2, padding=1)),
     [(1, 3, 4, 4), (3, 2, 4, 4)]),
    ("softmax", lambda a: _spread(ad.softmax(a, axis=-1)), [(3, 5)]),
    ("cosine",
     lambda a, b: ad.sum_(ad.cosine_similarity(a, b)), [(3, 6), (3, 6)]),
    ("median", lambda a: ad.median1d(a * a + a), [(7,)]),
    ("median_even", lambda a: ad.median1d(a), [(6,)]),
]


def _gating_chain(z0, h1, h2, h3, graw):
    z0_hats = [z0 + h1, z0 * ad.sigmoid(h2), z0 + 0.3 * h3]
    g = ad.softmax(graw, axis=-1)
    g_star, _, _ = supervised_gate_targets(z0_hats, z0)
    total, _, _ = gating_loss(g, g_star, z0_hats)
    return total


def _total_chain(z0, h1, h2, h3, graw):
    z0_hats = [z0 + h1, z0 * ad.sigmoid(h2), z0 + 0.3 * h3]
    g = ad.softmax(graw, axis=-1)
    diffs = [diffusion_loss(zh, z0, batched=True) for zh in z0_hats]
    tasks = [task_recon(z0_hats[0], z0, _BANK, batched=True),
             task_edge_freq(z0_hats[1], z0, batched=True),
             task_stft(z0_hats[2], z0, batched=True)]
    l_e, _ = expert_losses(diffs, tasks, g)
    g_star, _, _ = supervised_gate_targets(z0_hats, z0)
    l_g, _, _ = gating_loss(g, g_star, z0_hats)
    return total_loss(l_e, l_g, 1.7)

_LAT = [(2, 2, 12, 12)] * 4 + [(2, 3)]

LOSS_CASES = [
    ("diffusion_loss",
     lambda a, b: diffusion_loss(a, b, batched=True), [(2, 3, 4, 4)] * 2),
    ("task_recon",
     lambda a, b: task_recon(a, b, _BANK, batched=True), [(2, 2, 12, 12)] * 2),
    ("task_edge_freq",
     lambda a, b: task_edge_freq(a, b, batched=True), [(2, 2, 8, 8)] * 2),
    ("task_stft",
     lambda a, b: task_stft(a, b, batched=True, scales=(4, 8)),
     [(1, 2, 8, 8)] * 2),
    ("gating_loss_chain", _gating_chain, _LAT),
    ("total_loss_chain", _total_chain, _LAT),
]

ALL_CASES = OP_CASES + LOSS_CASES


def run_case(case, seed, tol=1e-4):
    """One battery entry against central differences; returns the error."""
    from moesr.gradcheck import gradcheck
    name, fn, shapes = case
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    err = gradcheck(fn, arrays)
    assert err < tol, f"{name}: relative error {err:.3e} >= {tol}"
    return err
