"""Expert routing from conditioning tokens.

Each expert owns a learned query vector.  Tokens are refined by a shared
MLP, scored against each query by cosine similarity, and the similarities
are softmax-normalized over the token axis to form an attention map.  An
expert's raw score is its attention-weighted mean cosine; the routed gate
multiplies a softmax over raw scores with a softmax over negated usage
frequencies (renormalized to sum to one), so frequently chosen experts are
damped.  Usage is an EMA of routed gates and stays a probability vector.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module, _touch


class Gate(Module):
    def __init__(self, rng: np.random.Generator, dim: int = 64,
                 n_experts: int = 3, gamma: float = 0.1):
        self.queries = Tensor(rng.standard_normal((n_experts, dim)),
                              requires_grad=True)
        self.fc1 = Linear(dim, 2 * dim, rng)
        self.fc2 = Linear(2 * dim, dim, rng)
        self.gamma = gamma
        self.n_experts = n_experts
        self.dim = dim

    def refine(self, tokens: Tensor) -> Tensor:
        return self.fc2(ad.tanh(self.fc1(tokens)))

    def token_attention(self, refined: Tensor):
        """Cosine of each refined token against each query, softmaxed over
        tokens.  Returns (att, cos), both [B, N, K].  Zero vectors (token or
        query) contribute cosine exactly 0."""
        _touch(self.queries)
        b, n, d = refined.shape
        dots = ad.matmul(refined, ad.transpose(self.queries, (1, 0)))  # [B,N,K]
        tok_norm = ad.sqrt(ad.sum_(refined * refined, -1, keepdims=True))
        q_norm = ad.sqrt(ad.sum_(self.queries * self.queries, -1))
        denom = tok_norm * ad.reshape(q_norm, (1, 1, self.n_experts))
        live = (denom.data != 0.0).astype(np.float64)
        cos = (dots / (denom + Tensor(1.0 - live))) * Tensor(live)
        att = ad.softmax(cos, axis=1)
        return att, cos

    def expert_scores(self, att: Tensor, cos: Tensor) -> Tensor:
        return ad.sum_(att * cos, axis=1)                     # [B,K]

    def route(self, scores: Tensor, usage: np.ndarray) -> Tensor:
        """Score softmax modulated by usage-frequency softmax, renormalized."""
        p = ad.softmax(scores, axis=-1)
        freq = np.exp(-self.gamma * usage)
        freq = freq / freq.sum()
        g = p * Tensor(freq.reshape(1, -1))
        return g / ad.sum_(g, axis=-1, keepdims=True)

    def __call__(self, tokens: Tensor, usage: np.ndarray):
        refined = self.refine(tokens)
        att, cos = self.token_attention(refined)
        scores = self.expert_scores(att, cos)
        gates = self.route(scores, usage)
        return gates, scores, att, cos

    def macs(self, n_tokens: int) -> int:
        return (self.fc1.macs(n_tokens) + self.fc2.macs(n_tokens)
                + n_tokens * self.dim * self.n_experts)


class UsageState:
    """EMA of routed gate weights; a probability vector throughout."""

    def __init__(self, n_experts: int, decay: float = 0.99):
        self.counts = np.full(n_experts, 1.0 / n_experts)
        self.decay = decay

    def update(self, gates: np.ndarray):
        g = np.asarray(gates, dtype=np.float64)
        if g.ndim == 2:
            g = g.mean(axis=0)
        self.counts = self.decay * self.counts + (1.0 - self.decay) * g

    def vector(self) -> np.ndarray:
        return self.counts.copy()


def warmup_gate(gates: Tensor, epoch: int, warmup_epochs: int) -> Tensor:
    """Uniform-gate override while epoch < warmup_epochs (half-open: the
    boundary epoch already uses the routed gates)."""
    if epoch < warmup_epochs:
        b, k = gates.shape
        return Tensor(np.full((b, k), 1.0 / k))
    return gates
