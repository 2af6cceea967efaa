"""Central finite-difference gradient checking for test oracles."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, backward, clear_tape, no_grad


def finite_difference(make_loss, tensors, h: float = 1e-5):
    """Central-difference gradient of a scalar builder w.r.t. each tensor.

    ``make_loss(*tensors)`` must rebuild the loss from the current data
    buffers on every call; the buffers are perturbed in place.
    """
    grads = []
    with no_grad():
        for t in tensors:
            flat = t.data.reshape(-1)
            g = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(make_loss(*tensors).data)
                flat[i] = orig - h
                fm = float(make_loss(*tensors).data)
                flat[i] = orig
                g[i] = (fp - fm) / (2.0 * h)
            grads.append(g.reshape(t.data.shape))
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(1e-6, 1e-6 * float(np.max(np.abs(analytic), initial=0.0)))
    denom = np.maximum(scale, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def gradcheck(make_loss, arrays, h: float = 1e-5) -> float:
    """Compare tape gradients against central differences.

    Returns the worst relative error across every element of every input.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True)
               for a in arrays]
    clear_tape()
    loss = make_loss(*tensors)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]
    numeric = finite_difference(make_loss, tensors, h)
    clear_tape()
    return max(max_relative_error(a, n) for a, n in zip(analytic, numeric))
