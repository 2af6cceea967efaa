"""Gate routing properties: normalization, usage damping, load balance."""

import numpy as np
import pytest

from moesr import autodiff as ad
from moesr.autodiff import Tensor
from moesr.gating import Gate, UsageState, warmup_gate


@pytest.fixture
def gate():
    return Gate(np.random.default_rng(0), dim=16)


def test_gates_sum_to_one(gate, rng):
    tokens = Tensor(rng.standard_normal((5, 7, 16)))
    g, _, _, _ = gate(tokens, np.full(3, 1 / 3))
    np.testing.assert_allclose(g.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(g.data > 0)
    ad.clear_tape()


def test_route_balanced_usage_is_pure_softmax(gate):
    scores = Tensor(np.array([[0.2, -0.1, 0.4]]))
    g = gate.route(scores, np.full(3, 1 / 3))
    np.testing.assert_allclose(g.data, ad.softmax(scores, -1).data, atol=1e-12)
    ad.clear_tape()


def test_route_hand_example(gate):
    """Equal scores with usage (1,0,0): gate follows exp(-gamma*c)."""
    scores = Tensor(np.zeros((1, 3)))
    g = gate.route(scores, np.array([1.0, 0.0, 0.0]))
    f = np.exp(-0.1 * np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(g.data[0], f / f.sum(), atol=1e-12)
    np.testing.assert_allclose(g.data[0], [0.311493, 0.344253, 0.344253],
                               atol=1e-6)
    ad.clear_tape()


def test_monotone_balancing(gate, rng):
    """Raising one expert's usage strictly lowers its routed gate."""
    for trial in range(50):
        r = np.random.default_rng(trial)
        scores = Tensor(r.standard_normal((1, 3)))
        usage = r.dirichlet(np.ones(3))
        j = trial % 3
        g0 = gate.route(scores, usage).data[0, j]
        bumped = usage.copy()
        bumped[j] += 0.2
        g1 = gate.route(scores, bumped).data[0, j]
        assert g1 < g0
    ad.clear_tape()


def test_zero_token_cosine_is_zero(gate):
    tokens = Tensor(np.zeros((1, 4, 16)))
    refined_zero = Tensor(np.zeros((1, 4, 16)))
    _, cos = gate.token_attention(refined_zero)
    np.testing.assert_array_equal(cos.data, 0.0)
    ad.clear_tape()


def test_usage_state_stays_probability_vector(rng):
    u = UsageState(3)
    np.testing.assert_allclose(u.vector(), 1 / 3)
    for _ in range(200):
        g = rng.dirichlet(np.ones(3), size=4)
        u.update(g)
        assert abs(u.vector().sum() - 1.0) < 1e-12
        assert np.all(u.vector() >= 0)


def test_usage_ema_tracks_constant_stream():
    u = UsageState(3, decay=0.9)
    target = np.array([0.7, 0.2, 0.1])
    for _ in range(200):
        u.update(target)
    np.testing.assert_allclose(u.vector(), target, atol=1e-8)


def test_load_balance_closed_loop(gate):
    """Random symmetric tokens through route+EMA keep usage within 0.15."""
    u = UsageState(3)
    for step in range(2000):
        r = np.random.default_rng(step)
        scores = Tensor(0.5 * r.standard_normal((2, 3)))
        g = gate.route(scores, u.vector())
        u.update(g.data)
        if step % 200 == 0:
            ad.clear_tape()
    ad.clear_tape()
    spread = float(u.vector().max() - u.vector().min())
    assert spread < 0.15, spread


def test_warmup_boundary_half_open():
    g = Tensor(np.array([[0.6, 0.3, 0.1]]))
    during = warmup_gate(g, 4, 5)
    np.testing.assert_allclose(during.data, 1 / 3)
    after = warmup_gate(g, 5, 5)
    assert after is g


def test_gate_gradients_flow(gate, rng):
    tokens = Tensor(rng.standard_normal((2, 6, 16)), requires_grad=True)
    g, _, _, _ = gate(tokens, np.full(3, 1 / 3))
    ad.backward(ad.sum_(g * Tensor(np.array([[1.0, 2.0, 3.0]]))))
    assert tokens.grad is not None and np.any(tokens.grad != 0)
    for name, p in gate.named_parameters():
        assert p.grad is not None, name
    ad.clear_tape()
