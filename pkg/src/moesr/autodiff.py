"""Reverse-mode automatic differentiation over float64 numpy arrays.

A module-level tape records every operation executed while gradients are
enabled.  ``backward(loss)`` replays the tape in reverse execution order
(which is a valid reverse-topological order, since an op's inputs always
exist before the op runs) and accumulates gradients into every reachable
tensor that wants one.

Contracts:
  * float64 everywhere; any non-finite op output raises immediately.
  * ``backward`` requires a scalar loss and may run once per loss tensor.
  * the tape is owned by a single thread; call ``clear_tape()`` between
    training steps to release graph memory.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import kernels

_uid = itertools.count()
_TAPE: list["_Node"] = []
_GRAD_ENABLED = True


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out, inputs, fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "uid", "_from_node",
                 "_retain", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.uid = next(_uid)
        self._from_node = False
        self._retain = False
        self._backward_done = False

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph control -----------------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def backward(self):
        backward(self)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __pow__(self, p):
        return pow_(self, float(p))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def flatten(self):
        return reshape(self, (self.size,))

    def abs(self):
        return abs_(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, inputs: Sequence[Tensor],
          fn: Callable[[np.ndarray], tuple]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    req = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        out._from_node = True
        _TAPE.append(_Node(out, tuple(inputs), fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# tape control

def clear_tape():
    _TAPE.clear()


def tape_size() -> int:
    return len(_TAPE)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def backward(loss: Tensor):
    """Accumulate d(loss)/dx into ``x.grad`` for every reachable tensor
    that is a leaf (or called ``retain_grad``)."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("backward already ran for this loss; rebuild the graph first")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing to differentiate")

    pending: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {loss.uid: loss}
    for node in reversed(_TAPE):
        g = pending.pop(node.out.uid, None)
        if g is None:
            continue
        out = node.out
        if out._retain:
            out.grad = g if out.grad is None else out.grad + g
        grads = node.fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._from_node:
                if inp.uid in pending:
                    pending[inp.uid] = pending[inp.uid] + gi
                else:
                    pending[inp.uid] = gi
                    holders[inp.uid] = inp
            else:
                inp.grad = gi if inp.grad is None else inp.grad + gi
    # anything left pending was produced on an earlier, cleared tape: treat
    # it as a leaf so its gradient is not silently dropped
    pending.pop(loss.uid, None)
    for uid, g in pending.items():
        t = holders[uid]
        t.grad = g if t.grad is None else t.grad + g
    loss._backward_done = True


# --------------------------------------------------------------------------
# elementwise primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return _make(a.data + b.data, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return _make(a.data - b.data, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _make(a.data * b.data, (a, b), fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (_unbroadcast(-g * a.data / (b.data * b.data), b.shape)
              if b.requires_grad else None)
        return ga, gb
    return _make(a.data / b.data, (a, b), fn)


def pow_(a: Tensor, p: float) -> Tensor:
    def fn(g):
        return (g * p * np.power(a.data, p - 1.0),)
    return _make(np.power(a.data, p), (a,), fn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def fn(g):
        return (g * out_data,)
    return _make(out_data, (a,), fn)


def log(a: Tensor) -> Tensor:
    def fn(g):
        return (g / a.data,)
    return _make(np.log(a.data), (a,), fn)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def fn(g):
        return (g * 0.5 / out_data,)
    return _make(out_data, (a,), fn)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def fn(g):
        return (g * (1.0 - out_data * out_data),)
    return _make(out_data, (a,), fn)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def fn(g):
        return (g * out_data * (1.0 - out_data),)
    return _make(out_data, (a,), fn)


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * s

    def fn(g):
        return (g * (s + a.data * s * (1.0 - s)),)
    return _make(out_data, (a,), fn)


def abs_(a: Tensor) -> Tensor:
    def fn(g):
        return (g * np.sign(a.data),)
    return _make(np.abs(a.data), (a,), fn)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b)

    def fn(g):
        gt = a.data > b.data
        eq = a.data == b.data
        ga = (_unbroadcast(g * (gt + 0.5 * eq), a.shape)
              if a.requires_grad else None)
        gb = (_unbroadcast(g * ((~gt) - 0.5 * eq), b.shape)
              if b.requires_grad else None)
        return ga, gb
    return _make(np.maximum(a.data, b.data), (a, b), fn)


# --------------------------------------------------------------------------
# shape / indexing primitives

def reshape(a: Tensor, shape: tuple) -> Tensor:
    def fn(g):
        return (g.reshape(a.shape),)
    return _make(a.data.reshape(shape), (a,), fn)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))

    def fn(g):
        return (g.transpose(inv),)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), fn)


def getitem(a: Tensor, idx) -> Tensor:
    def fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)
    return _make(a.data[idx].copy() if isinstance(idx, (np.ndarray, list))
                 else np.array(a.data[idx], copy=True), (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def fn(g):
        outs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                outs.append(np.ascontiguousarray(g[tuple(sl)]))
            else:
                outs.append(None)
        return tuple(outs)
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), fn)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    return sum_(a, axis, keepdims) * (1.0 / n)


# --------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"matmul expects >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _make(np.matmul(a.data, b.data), (a, b), fn)


# --------------------------------------------------------------------------
# convolution (routed through the selected kernel backend)

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           dilation: int = 1) -> Tensor:
    """Cross-correlation of [B,C,H,W] (or [C,H,W]) input with [Co,Ci,k,k]
    kernels."""
    squeeze = x.ndim == 3
    x4 = reshape(x, (1,) + x.shape) if squeeze else x
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"kernel must be [Co,Ci,k,k], got {w.shape}")
    if x4.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x4.shape[1]}, kernel expects {w.shape[1]}")
    b_, ci, h, wdim = x4.shape
    co, _, k, _ = w.shape
    ke = dilation * (k - 1) + 1
    if h + 2 * padding < ke or wdim + 2 * padding < ke:
        raise ValueError(
            f"conv2d input {h}x{wdim} too small for kernel extent {ke} at padding {padding}")

    y = kernels.conv2d_forward(x4.data, w.data, stride, padding, dilation)

    def fn(g):
        gx = gw = None
        if x4.requires_grad:
            gx = kernels.conv2d_grad_input(g, w.data, stride, padding,
                                           dilation, in_h=h, in_w=wdim)
        if w.requires_grad:
            gw = kernels.conv2d_grad_weight(x4.data, g, stride, padding,
                                            dilation, k=k)
        return gx, gw
    out = _make(y, (x4, w), fn)
    return reshape(out, out.shape[1:]) if squeeze else out


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of ``conv2d`` with weight layout [Cin, Cout, k, k]; output
    spatial size is (H-1)*stride - 2*padding + k."""
    squeeze = x.ndim == 3
    x4 = reshape(x, (1,) + x.shape) if squeeze else x
    if x4.shape[1] != w.shape[0]:
        raise ValueError(
            f"conv_transpose2d channel mismatch: input has {x4.shape[1]}, "
            f"kernel expects {w.shape[0]}")
    b_, ci, h, wdim = x4.shape
    _, co, k, _ = w.shape
    out_h = (h - 1) * stride - 2 * padding + k
    out_w = (wdim - 1) * stride - 2 * padding + k
    if out_h <= 0 or out_w <= 0:
        raise ValueError("conv_transpose2d output would be empty")
    # consistency of the underlying conv geometry
    if (out_h + 2 * padding - k) // stride + 1 != h:
        raise ValueError("conv_transpose2d geometry is inconsistent")

    y = kernels.conv2d_grad_input(x4.data, w.data, stride, padding, 1,
                                  in_h=out_h, in_w=out_w)

    def fn(g):
        gx = gw = None
        if x4.requires_grad:
            gx = kernels.conv2d_forward(g, w.data, stride, padding, 1)
        if w.requires_grad:
            gw = kernels.conv2d_grad_weight(g, x4.data, stride, padding, 1, k=k)
        return gx, gw
    out = _make(y, (x4, w), fn)
    return reshape(out, out.shape[1:]) if squeeze else out


# --------------------------------------------------------------------------
# composites

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(shifted)
    return e / sum_(e, axis, keepdims=True)


def cosine_similarity(u: Tensor, v: Tensor, axis: int = -1) -> Tensor:
    """Cosine of the angle between u and v along ``axis`` (broadcasting
    elsewhere).  Pairs involving a zero vector get similarity exactly 0."""
    dot = sum_(mul(u, v), axis)
    nu = sqrt(sum_(mul(u, u), axis))
    nv = sqrt(sum_(mul(v, v), axis))
    denom = mul(nu, nv)
    live = (denom.data != 0.0).astype(np.float64)
    safe = denom + Tensor(1.0 - live)
    return mul(div(dot, safe), Tensor(live))


def median1d(x: Tensor) -> Tensor:
    """Median of a 1-D tensor; even lengths average the two central values.
    Differentiable through the selected element(s)."""
    if x.ndim != 1 or x.size == 0:
        raise ValueError("median1d expects a non-empty 1-D tensor")
    order = np.argsort(x.data, kind="stable")
    n = x.size
    if n % 2:
        return getitem(x, int(order[n // 2]))
    picked = getitem(x, order[[n // 2 - 1, n // 2]])
    return mean(picked)
