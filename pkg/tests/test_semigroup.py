import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from conftest import random_model, random_policy
from ctmdp.errors import DomainError
from ctmdp.model import (PIECEWISE_CONSTANT, ActionGrid, QPairModel, RelaxedMarkovPolicy,
                         mixed_generator)
from ctmdp.semigroup import (dyson_order, dyson_transition, generator_at, ode_transition,
                             tail_bound, transition_matrix)

# sum_{m >= 10} 2^m / m!, summed term by term in 40-digit arithmetic
TAIL_M1_T1_N10 = 3.4357688479484804171e-4


def _constant_policy(rng, model, T=1.0):
    w = rng.dirichlet(np.ones(model.n_actions), model.n_states)
    return RelaxedMarkovPolicy([0.0, T], np.stack([w, w]), PIECEWISE_CONSTANT)


def test_tail_bound_values():
    assert tail_bound(1.0, 0.0, 1.0, 10) == pytest.approx(TAIL_M1_T1_N10, rel=1e-13)
    assert tail_bound(1.0, 0.0, 1.0, 0) == pytest.approx(np.exp(2.0), rel=1e-15)
    assert tail_bound(0.0, 0.0, 1.0, 3) == 0.0
    assert tail_bound(2.0, 0.3, 0.3, 1) == 0.0
    # n = 1: e^x - 1
    assert tail_bound(0.5, 0.0, 1.0, 1) == pytest.approx(np.e - 1, rel=1e-14)
    with pytest.raises(DomainError):
        tail_bound(1.0, 1.0, 0.5, 3)
    with pytest.raises(DomainError):
        tail_bound(1.0, 0.0, 1.0, -1)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 5), st.floats(0.01, 1), st.integers(1, 40))
def test_tail_bound_decreasing_in_n(M, length, n):
    assert tail_bound(M, 0, length, n + 1) <= tail_bound(M, 0, length, n)


def test_dyson_order_meets_tolerance():
    n = dyson_order(3.0, 0.0, 1.0, 2.0, 1e-9)
    assert tail_bound(3.0, 0, 1, n) * 2.0 < 1e-9 <= tail_bound(3.0, 0, 1, n - 1) * 2.0


def test_generator_example():
    r = np.zeros((2, 2, 2))
    r[0, 1] = [0.2, 0.8]
    r[1, 0] = [1.0, 1.0]
    m = QPairModel(("1", "2"), ActionGrid([0.2, 0.8]), r)
    pol = RelaxedMarkovPolicy([0.0, 1.0], np.full((2, 2, 2), 0.5))
    Q = generator_at(m, pol, 0.3).Q
    assert Q[0, 1] == pytest.approx(0.5, abs=1e-15)
    assert np.allclose(Q.sum(1), 0.0, atol=1e-15)
    with pytest.raises(DomainError):
        generator_at(m, pol, 1.5)


def test_generator_norm_bounded_by_2M(rng):
    for _ in range(50):
        m = random_model(rng)
        pol = random_policy(rng, m.n_states, m.n_actions)
        Q = generator_at(m, pol, float(rng.uniform())).Q
        assert np.abs(Q).sum(1).max() <= 2 * m.M + 1e-12


def test_constant_policy_matches_expm(rng):
    for _ in range(10):
        m = random_model(rng)
        pol = _constant_policy(rng, m)
        s, t = sorted(rng.uniform(0, 1, 2))
        P_ref = expm((t - s) * mixed_generator(m, pol.weights_at(s)))
        P, _ = transition_matrix(m, pol, s, t)
        assert np.abs(P - P_ref).max() < 1e-9
        h = rng.normal(size=m.n_states)
        assert np.abs(dyson_transition(m, pol, s, t, h).values - P_ref @ h).max() < 1e-9


def test_piecewise_constant_policy_is_product_of_exponentials(rng):
    m = random_model(rng, n_states=4, n_actions=3)
    pol = random_policy(rng, 4, 3, n_knots=4, interpolation=PIECEWISE_CONSTANT)
    P_ref = np.eye(4)
    for a, b in zip(pol.knots[:-1], pol.knots[1:]):
        P_ref = P_ref @ expm((b - a) * mixed_generator(m, pol.weights_at(a)))
    P, _ = transition_matrix(m, pol, 0.0, 1.0, tol=1e-11)
    assert np.abs(P - P_ref).max() < 1e-10
    h = rng.normal(size=4)
    assert np.abs(dyson_transition(m, pol, 0.0, 1.0, h, tol=1e-12).values - P_ref @ h).max() < 1e-10


def test_dyson_and_rk4_agree_on_varying_policy(rng):
    for _ in range(10):
        m = random_model(rng)
        pol = random_policy(rng, m.n_states, m.n_actions)
        h = rng.normal(size=m.n_states)
        d = dyson_transition(m, pol, 0.1, 0.9, h, tol=1e-11).values
        o = ode_transition(m, pol, 0.1, 0.9, h, tol=1e-11).values
        assert np.abs(d - o).max() < 1e-9


def test_stochastic_matrix_and_positivity(rng):
    for _ in range(30):
        m = random_model(rng)
        pol = random_policy(rng, m.n_states, m.n_actions)
        P, _ = transition_matrix(m, pol, 0.0, 1.0)
        assert np.allclose(P.sum(1), 1.0, atol=1e-12)
        assert P.min() > -1e-12
        ones = dyson_transition(m, pol, 0.0, 1.0, np.ones(m.n_states)).values
        assert np.allclose(ones, 1.0, atol=1e-12)


def test_chapman_kolmogorov(rng):
    for _ in range(20):
        m = random_model(rng)
        pol = random_policy(rng, m.n_states, m.n_actions)
        s, u, t = np.sort(rng.uniform(0, 1, 3))
        Pst, _ = transition_matrix(m, pol, s, t)
        Psu, _ = transition_matrix(m, pol, s, u)
        Put, _ = transition_matrix(m, pol, u, t)
        assert np.abs(Pst - Psu @ Put).max() < 3e-8


def test_dyson_truncation_honesty(rng):
    for _ in range(20):
        m = random_model(rng)
        pol = random_policy(rng, m.n_states, m.n_actions)
        s, t = np.sort(rng.uniform(0, 1, 2))
        h = rng.uniform(-1, 1, m.n_states)
        hn = np.abs(h).max()
        for n in (1, 3, 6):
            a = dyson_transition(m, pol, s, t, h, n_terms=n).values
            b = dyson_transition(m, pol, s, t, h, n_terms=n + 1).values
            assert np.abs(a - b).max() <= tail_bound(m.M, s, t, n) * hn


def test_zero_interval_is_identity(rng):
    m = random_model(rng)
    pol = random_policy(rng, m.n_states, m.n_actions)
    h = rng.normal(size=m.n_states)
    assert np.array_equal(dyson_transition(m, pol, 0.4, 0.4, h).values, h)
    P, steps = transition_matrix(m, pol, 0.4, 0.4)
    assert steps == 0 and np.array_equal(P, np.eye(m.n_states))


def test_domain_errors(rng):
    m = random_model(rng)
    pol = random_policy(rng, m.n_states, m.n_actions)
    h = np.ones(m.n_states)
    with pytest.raises(DomainError):
        dyson_transition(m, pol, 0.5, 0.4, h)
    with pytest.raises(DomainError):
        ode_transition(m, pol, 0.0, 2.0, h)
    with pytest.raises(DomainError):
        dyson_transition(m, pol, 0.0, 1.0, h, tol=0.0)


def test_dirac_policy_generator_is_rate_matrix(rng):
    m = random_model(rng, n_states=4, n_actions=3)
    for a in range(3):
        w = np.zeros((2, 4, 3))
        w[:, :, a] = 1.0
        pol = RelaxedMarkovPolicy([0.0, 1.0], w)
        Q = generator_at(m, pol, 0.5).Q
        plain = m.rates[:, :, a] - np.diag(m.rates[:, :, a].sum(1))
        assert np.array_equal(Q, plain)


def test_ode_and_dyson_agree_within_twice_tol(rng):
    tol = 1e-8
    worst = 0.0
    for _ in range(100):
        m = random_model(rng)
        pol = random_policy(rng, m.n_states, m.n_actions)
        s, t = np.sort(rng.uniform(0, 1, 2))
        h = rng.uniform(-1, 1, m.n_states)
        d = dyson_transition(m, pol, s, t, h, tol=tol).values
        o = ode_transition(m, pol, s, t, h, tol=tol).values
        worst = max(worst, np.abs(d - o).max())
    assert worst <= 2 * tol
