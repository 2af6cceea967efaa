"""Convolution kernel backend selection.

The compiled extension is preferred when it imported cleanly; the numpy
implementation is the always-available fallback.  Set MOESR_KERNELS to
"native" or "numpy" to force a backend (forcing "native" raises if the
extension is missing, so CI can prove the build happened).
"""

import os

from . import _numpy

_requested = os.environ.get("MOESR_KERNELS", "auto")

if _requested not in ("auto", "native", "numpy"):
    raise ValueError(f"MOESR_KERNELS must be auto|native|numpy, got {_requested!r}")

if _requested == "numpy":
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        if _requested == "native":
            raise
        _impl = _numpy
        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight

get_backend = lambda: BACKEND  # noqa: E731
