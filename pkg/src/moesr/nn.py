"""Layer building blocks on top of the autodiff engine.

Modules register parameters by ordinary attribute assignment; discovery
walks ``__dict__`` in insertion order so parameter ordering is
deterministic for a fixed construction order.  A process-wide touch
recorder can observe which parameters any forward pass actually used,
which is how the routed-inference cost accounting is instrumented.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class TouchRecorder:
    """Collects the identity and size of every parameter used in a forward
    pass while installed via ``track_touches``."""

    def __init__(self):
        self.seen: dict[int, int] = {}

    def add(self, *tensors: Tensor):
        for t in tensors:
            if t is not None:
                self.seen[id(t)] = t.size

    def total(self) -> int:
        return int(sum(self.seen.values()))

    def touched(self, params) -> int:
        ids = {id(p) for p in params}
        return int(sum(n for i, n in self.seen.items() if i in ids))


_ACTIVE_RECORDER: TouchRecorder | None = None


class track_touches:
    def __init__(self, recorder: TouchRecorder):
        self.recorder = recorder

    def __enter__(self):
        global _ACTIVE_RECORDER
        self._prev = _ACTIVE_RECORDER
        _ACTIVE_RECORDER = self.recorder
        return self.recorder

    def __exit__(self, *exc):
        global _ACTIVE_RECORDER
        _ACTIVE_RECORDER = self._prev
        return False


def _touch(*tensors: Tensor):
    if _ACTIVE_RECORDER is not None:
        _ACTIVE_RECORDER.add(*tensors)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    """y = x @ W + b with W of shape [in, out]."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True):
        limit = math.sqrt(6.0 / (n_in + n_out))
        self.weight = Tensor(rng.uniform(-limit, limit, (n_in, n_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        _touch(self.weight, self.bias)
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y

    def macs(self, n_tokens: int) -> int:
        return n_tokens * self.weight.shape[0] * self.weight.shape[1]


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 bias: bool = True):
        fan_in = c_in * k * k
        std = math.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.standard_normal((c_out, c_in, k, k)) * std,
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def __call__(self, x: Tensor) -> Tensor:
        _touch(self.weight, self.bias)
        y = ad.conv2d(x, self.weight, self.stride, self.padding, self.dilation)
        if self.bias is not None:
            y = y + ad.reshape(self.bias, (self.bias.size, 1, 1))
        return y

    def out_shape(self, hw: tuple[int, int]) -> tuple[int, int]:
        k = self.weight.shape[2]
        ke = self.dilation * (k - 1) + 1
        return tuple((n + 2 * self.padding - ke) // self.stride + 1 for n in hw)

    def macs(self, hw: tuple[int, int]) -> int:
        co, ci, k, _ = self.weight.shape
        ho, wo = self.out_shape(hw)
        return ho * wo * co * ci * k * k


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        fan_in = c_in * k * k
        std = math.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.standard_normal((c_in, c_out, k, k)) * std,
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        _touch(self.weight, self.bias)
        y = ad.conv_transpose2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = y + ad.reshape(self.bias, (self.bias.size, 1, 1))
        return y

    def out_shape(self, hw: tuple[int, int]) -> tuple[int, int]:
        k = self.weight.shape[2]
        return tuple((n - 1) * self.stride - 2 * self.padding + k for n in hw)

    def macs(self, hw: tuple[int, int]) -> int:
        ci, co, k, _ = self.weight.shape
        return hw[0] * hw[1] * ci * co * k * k


class LayerNorm(Module):
    """Normalization over the last axis with learned scale and shift."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        _touch(self.gamma, self.beta)
        mu = ad.mean(x, -1, keepdims=True)
        centered = x - mu
        var = ad.mean(centered * centered, -1, keepdims=True)
        normed = centered / ad.sqrt(var + self.eps)
        return normed * self.gamma + self.beta


class ResBlock(Module):
    """x + conv(silu(conv(silu(x)))), 3x3, channel-preserving."""

    def __init__(self, ch: int, rng: np.random.Generator, dilation: int = 1):
        self.conv1 = Conv2d(ch, ch, 3, rng, padding=dilation, dilation=dilation)
        self.conv2 = Conv2d(ch, ch, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(ad.silu(x))
        h = self.conv2(ad.silu(h))
        return x + h

    def macs(self, hw: tuple[int, int]) -> int:
        return self.conv1.macs(hw) + self.conv2.macs(hw)


def sinusoidal_embedding(t: float, dim: int) -> np.ndarray:
    """Fixed sin/cos features of a (scalar) timestep."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])
