"""Both convolution backends against a quadruple-loop reference."""

import numpy as np
import pytest

from moesr.kernels import _numpy as np_impl
from moesr.kernels import get_backend

try:
    from moesr.kernels import _native as native_impl
except ImportError:  # pragma: no cover - build failure shows up in CI
    native_impl = None

BACKENDS = [("numpy", np_impl)]
if native_impl is not None:
    BACKENDS.append(("native", native_impl))


def loop_conv2d(x, w, stride, padding, dilation):
    b, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    eh = (kh - 1) * dilation + 1
    ew = (kw - 1) * dilation + 1
    oh = (x.shape[2] - eh) // stride + 1
    ow = (x.shape[3] - ew) // stride + 1
    out = np.zeros((b, cout, oh, ow))
    for n in range(b):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (x[n, ci, i * stride + u * dilation,
                                          j * stride + v * dilation]
                                        * w[co, ci, u, v])
                    out[n, co, i, j] = acc
    return out


CONFIGS = [
    dict(b=1, cin=1, cout=1, h=5, k=3, stride=1, padding=0, dilation=1),
    dict(b=2, cin=3, cout=4, h=6, k=3, stride=1, padding=1, dilation=1),
    dict(b=1, cin=2, cout=3, h=8, k=4, stride=2, padding=1, dilation=1),
    dict(b=2, cin=2, cout=2, h=9, k=3, stride=1, padding=2, dilation=2),
    dict(b=1, cin=4, cout=2, h=7, k=1, stride=1, padding=0, dilation=1),
    dict(b=3, cin=1, cout=5, h=10, k=5, stride=3, padding=2, dilation=1),
]


@pytest.mark.parametrize("name,impl", BACKENDS)
@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: (
    f"k{c['k']}s{c['stride']}p{c['padding']}d{c['dilation']}"))
def test_forward_matches_loops(name, impl, cfg, rng):
    x = rng.standard_normal((cfg["b"], cfg["cin"], cfg["h"], cfg["h"]))
    w = rng.standard_normal((cfg["cout"], cfg["cin"], cfg["k"], cfg["k"]))
    ref = loop_conv2d(x, w, cfg["stride"], cfg["padding"], cfg["dilation"])
    got = impl.conv2d_forward(x, w, cfg["stride"], cfg["padding"],
                              cfg["dilation"])
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name,impl", BACKENDS)
@pytest.mark.parametrize("cfg", CONFIGS[:4], ids=lambda c: (
    f"k{c['k']}s{c['stride']}p{c['padding']}d{c['dilation']}"))
def test_gradients_match_loop_adjoints(name, impl, cfg, rng):
    """grad_input / grad_weight are the exact adjoints of the loop forward:
    check <conv(x,w), g> inner-product identities elementwise instead of
    re-deriving the adjoint loops."""
    x = rng.standard_normal((cfg["b"], cfg["cin"], cfg["h"], cfg["h"]))
    w = rng.standard_normal((cfg["cout"], cfg["cin"], cfg["k"], cfg["k"]))
    out = impl.conv2d_forward(x, w, cfg["stride"], cfg["padding"],
                              cfg["dilation"])
    g = rng.standard_normal(out.shape)

    gx = impl.conv2d_grad_input(g, w, cfg["stride"], cfg["padding"],
                                cfg["dilation"], in_h=cfg["h"], in_w=cfg["h"])
    gw = impl.conv2d_grad_weight(x, g, cfg["stride"], cfg["padding"],
                                 cfg["dilation"], k=cfg["k"])

    # adjoint identity  <A x, g> == <x, A* g>  (A linear in x for fixed w)
    lhs = float(np.sum(out * g))
    assert abs(lhs - float(np.sum(x * gx))) < 1e-9 * max(1.0, abs(lhs))
    assert abs(lhs - float(np.sum(w * gw))) < 1e-9 * max(1.0, abs(lhs))

    # elementwise against finite differences on a few random coordinates
    idx = rng.integers(0, x.size, size=6)
    for flat in idx:
        e = np.zeros(x.size)
        e[flat] = 1e-6
        xp = (x.reshape(-1) + e).reshape(x.shape)
        xm = (x.reshape(-1) - e).reshape(x.shape)
        op = impl.conv2d_forward(xp, w, cfg["stride"], cfg["padding"],
                                 cfg["dilation"])
        om = impl.conv2d_forward(xm, w, cfg["stride"], cfg["padding"],
                                 cfg["dilation"])
        num = float(np.sum((op - om) * g) / 2e-6)
        assert abs(num - gx.reshape(-1)[flat]) < 1e-5, flat


def test_backends_agree_exactly(rng):
    if native_impl is None:
        pytest.skip("native extension not built")
    x = rng.standard_normal((2, 3, 12, 12))
    w = rng.standard_normal((5, 3, 3, 3))
    a = np_impl.conv2d_forward(x, w, 1, 1, 1)
    b = native_impl.conv2d_forward(x, w, 1, 1, 1)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


def test_native_backend_is_active_by_default():
    # the build ships the extension; auto selection must pick it up
    assert get_backend() == "native"
