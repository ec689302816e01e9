import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from conftest import random_model
from ctmdp.errors import ConfigurationError, DomainError
from ctmdp.model import (MIXTURE_LINEAR, PIECEWISE_CONSTANT, ActionGrid, CostSpec, DiffusionEnv,
                         LyapunovSpec, MeasureOnU, PsiModulus, QPairModel,
                         RandomizedStationaryPolicy, RelaxedMarkovPolicy, lift_stationary,
                         lipschitz_vertices, lyapunov_drift, mixed_generator, mixed_rate,
                         modulus_report, validate_hypotheses, w1_dense, w1_distance, w1_pairwise)

UNIT = ActionGrid([0.0, 1.0])


# ---------------------------------------------------------------------------
# construction


def test_action_grid_rejects_duplicates_and_box_violations():
    with pytest.raises(ConfigurationError):
        ActionGrid([0.0, 0.0])
    with pytest.raises(ConfigurationError):
        ActionGrid([0.0, 2.0], lower=[0.0], upper=[1.0])
    with pytest.raises(ConfigurationError):
        ActionGrid(np.zeros((0, 1)))
    g = ActionGrid([[0, 0], [3, 4]])
    assert g.dim == 2 and g.diameter == 5.0


def test_measure_invariants():
    with pytest.raises(ConfigurationError):
        MeasureOnU((0, 1), [0.5, 0.6])
    with pytest.raises(ConfigurationError):
        MeasureOnU((0, 0), [0.5, 0.5])
    with pytest.raises(ConfigurationError):
        MeasureOnU((0,), [-1.0])
    with pytest.raises(ConfigurationError):
        MeasureOnU.dirac(3).dense(2)
    m = MeasureOnU((1, 0), [0.25, 0.75])
    assert np.array_equal(m.dense(3), [0.75, 0.25, 0.0])
    assert MeasureOnU.uniform([0, 1, 2]).weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_qpair_invariants():
    g = UNIT
    with pytest.raises(ConfigurationError):
        QPairModel(("a", "b"), g, np.ones((2, 2, 2)))          # nonzero diagonal
    r = np.zeros((2, 2, 2))
    r[0, 1] = [-1, 1]
    with pytest.raises(ConfigurationError):
        QPairModel(("a", "b"), g, r)
    r[0, 1] = [1, 2]
    m = QPairModel(("a", "b"), g, r)
    assert m.M == 2.0 and m.total_rate(0, 1) == 2.0 and m.total_rate(1, 0) == 0.0
    assert np.array_equal(m.total, m.rates.sum(axis=1))
    assert not m.rates.flags.writeable
    f = QPairModel.from_function(("a", "b"), g, lambda i, j, u: u if i == 0 else 1.0)
    assert f.rate(0, 1, 1) == 1.0 and f.rate(1, 0, 0) == 1.0


def test_policy_construction_errors():
    w = np.full((2, 1, 2), 0.5)
    with pytest.raises(ConfigurationError):
        RelaxedMarkovPolicy([0.1, 1.0], w)
    with pytest.raises(ConfigurationError):
        RelaxedMarkovPolicy([0.0, 0.0], w)
    with pytest.raises(ConfigurationError):
        RelaxedMarkovPolicy([0.0, 1.0], w, "cubic")
    with pytest.raises(ConfigurationError):
        RelaxedMarkovPolicy([0.0, 1.0], np.full((2, 1, 2), 0.6))
    p = RelaxedMarkovPolicy([0.0, 1.0], w)
    with pytest.raises(DomainError):
        p.weights_at(1.5)


def test_psi_forms():
    assert PsiModulus.linear(2.0)(0.5) == 1.0
    p = PsiModulus("power", {"c": 2.0, "beta": 0.5})
    assert p(0.25) == pytest.approx(1.0)
    assert p.max_slope(1.0) == pytest.approx(2.0)
    t = PsiModulus("tabulated", {"r": [0, 1, 2], "values": [0, 1, 1.5]})
    assert t(1.5) == pytest.approx(1.25)
    assert t.max_slope(2.0) == pytest.approx(0.75)
    with pytest.raises(ConfigurationError):
        PsiModulus("tabulated", {"r": [0, 1], "values": [0.1, 1]})
    with pytest.raises(ConfigurationError):
        PsiModulus("tabulated", {"r": [0, 1], "values": [1, 0.5]})


# ---------------------------------------------------------------------------
# W1


def _w1_cdf_oracle(p, q, x):
    """Integral of |F - G| on a fine mesh, independent of the library."""
    mesh = np.linspace(x.min(), x.max(), 200001)
    F = (p[None, :] * (x[None, :] <= mesh[:, None])).sum(1)
    G = (q[None, :] * (x[None, :] <= mesh[:, None])).sum(1)
    return np.trapezoid(np.abs(F - G), mesh)


def _w1_assignment_oracle(p, q, pts, n):
    """Weights on a 1/n lattice: expand to n unit atoms and solve the assignment."""
    a = np.repeat(np.arange(len(p)), np.round(p * n).astype(int))
    b = np.repeat(np.arange(len(q)), np.round(q * n).astype(int))
    cost = np.linalg.norm(pts[a][:, None, :] - pts[b][None, :, :], axis=-1)
    r, c = linear_sum_assignment(cost)
    return cost[r, c].sum() / n


def test_w1_examples():
    assert w1_distance(MeasureOnU.dirac(0), MeasureOnU.dirac(0), UNIT) == 0.0
    assert w1_distance(MeasureOnU.dirac(0), MeasureOnU.dirac(1), UNIT) == 1.0
    half = MeasureOnU.uniform([0, 1])
    assert w1_distance(half, MeasureOnU.dirac(0), UNIT) == pytest.approx(0.5, abs=1e-15)
    p, q = np.array([0.5, 0.5]), np.array([1.0, 0.0])
    assert _w1_cdf_oracle(p, q, UNIT.points[:, 0]) == pytest.approx(0.5, abs=1e-5)


def test_w1_one_dimensional_matches_cdf_oracle(rng):
    x = np.sort(rng.uniform(0, 3, 5))
    grid = ActionGrid(x)
    for _ in range(5):
        p, q = rng.dirichlet(np.ones(5), 2)
        assert w1_dense(p, q, grid) == pytest.approx(_w1_cdf_oracle(p, q, x), abs=1e-4)


def test_w1_multidimensional_matches_assignment_oracle(rng):
    n = 12
    for A in (3, 4, 5, 7):
        pts = rng.uniform(0, 1, size=(A, 2))
        grid = ActionGrid(pts)
        P = rng.multinomial(n, np.ones(A) / A, size=6) / n
        lp = np.array([[w1_dense(a, b, grid) for b in P] for a in P])
        pw = w1_pairwise(P, grid)
        oracle = np.array([[_w1_assignment_oracle(a, b, pts, n) for b in P] for a in P])
        assert np.allclose(lp, oracle, atol=1e-9)
        assert np.allclose(pw, oracle, atol=1e-9)


def test_lipschitz_vertices_are_feasible_and_tight(rng):
    grid = ActionGrid(rng.uniform(0, 1, size=(4, 3)))
    V = lipschitz_vertices(grid)
    d = grid.distances()
    assert np.all(np.abs(V[:, :, None] - V[:, None, :]) <= d + 1e-12)
    assert np.all(V[:, 0] == 0)


@st.composite
def _measures(draw, n):
    raw = draw(st.lists(st.floats(0, 1), min_size=n, max_size=n))
    w = np.asarray(raw) + 1e-3
    return w / w.sum()


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_w1_metric_axioms(data):
    k = data.draw(st.sampled_from([1, 2]))
    A = 4
    seed = data.draw(st.integers(0, 10_000))
    pts = np.random.default_rng(seed).uniform(0, 1, size=(A, k))
    grid = ActionGrid(pts)
    p, q, r = (data.draw(_measures(A)) for _ in range(3))
    dpq, dqp = w1_dense(p, q, grid), w1_dense(q, p, grid)
    assert dpq >= 0
    assert dpq == pytest.approx(dqp, abs=1e-12)
    assert w1_dense(p, p, grid) == pytest.approx(0.0, abs=1e-12)
    assert dpq <= w1_dense(p, r, grid) + w1_dense(r, q, grid) + 1e-12
    if not np.allclose(p, q):
        assert dpq > 0


def test_w1_grid_mismatch():
    with pytest.raises(ConfigurationError):
        w1_distance(np.array([0.5, 0.25, 0.25]), MeasureOnU.dirac(0), UNIT)


# ---------------------------------------------------------------------------
# mixed rates


def _two_state(rate01=(0.2, 0.8), rate10=(1.0, 1.0), points=(0.2, 0.8)):
    r = np.zeros((2, 2, 2))
    r[0, 1], r[1, 0] = rate01, rate10
    return QPairModel(("1", "2"), ActionGrid(list(points)), r)


def test_mixed_rate_examples():
    m = _two_state()
    assert np.array_equal(mixed_rate(m, 0, MeasureOnU.dirac(1)), m.rates[0, :, 1])
    # hand sum 0.5*0.2 + 0.5*0.8
    assert mixed_rate(m, 0, MeasureOnU.uniform([0, 1]))[1] == pytest.approx(0.5, abs=1e-15)
    mix = mixed_rate(m, 1, MeasureOnU.uniform([0, 1]))
    assert np.allclose(mix, 0.5 * (m.rates[1, :, 0] + m.rates[1, :, 1]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_mixed_rate_affine_and_conservative(seed, t):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    A = m.n_actions
    mu, nu = rng.dirichlet(np.ones(A), 2)
    th = int(rng.integers(m.n_states))
    lhs = mixed_rate(m, th, t * mu + (1 - t) * nu)
    rhs = t * mixed_rate(m, th, mu) + (1 - t) * mixed_rate(m, th, nu)
    assert np.allclose(lhs, rhs, atol=1e-12)
    # conservative: components sum to the mixed total rate
    assert lhs.sum() == pytest.approx(m.total[th] @ (t * mu + (1 - t) * nu), abs=1e-12)


def test_mixed_generator_rows_sum_to_zero(rng):
    for _ in range(100):
        m = random_model(rng)
        w = rng.dirichlet(np.ones(m.n_actions), m.n_states)
        Q = mixed_generator(m, w)
        assert np.all(Q.sum(1) == pytest.approx(0.0, abs=1e-12))
        off = Q - np.diag(np.diag(Q))
        assert np.all(off >= 0)


# ---------------------------------------------------------------------------
# hypotheses


def test_h4_constant_phi_passes():
    rep = validate_hypotheses(_two_state(), LyapunovSpec(np.ones(2), 1.0))
    assert rep.h1 and rep.h2 and rep.h4 and rep.passed
    assert rep.h4_max_violation == pytest.approx(-1.0)


def test_h2_violation_is_reported():
    r = np.zeros((2, 2, 2))
    r[0, 1] = [1.0, 3.0]
    m = QPairModel(("a", "b"), UNIT, r, M=2.0)
    rep = validate_hypotheses(m)
    assert not rep.h2 and not rep.passed
    assert rep.h2_violations == (("a", 1),)
    assert "violations" in rep.table()


def test_birth_death_lambda_min_brute_force():
    N = 8
    grid = ActionGrid([0.2, 0.5, 0.9])
    r = np.zeros((N + 1, N + 1, 3))
    for n in range(N + 1):
        for a, u in enumerate(grid.points[:, 0]):
            if n < N:
                r[n, n + 1, a] = 0.3 + u * n
            if n > 0:
                r[n, n - 1, a] = 0.4 * n
    m = QPairModel(tuple(range(N + 1)), grid, r)
    phi = np.arange(N + 1) + 1.0
    kappa0, B0 = 0.2, {0, 1}
    # brute force over the grid, written independently of the library
    best = -np.inf
    for n in range(N + 1):
        for a in range(3):
            qphi = sum(r[n, g, a] * (phi[g] - phi[n]) for g in range(N + 1) if g != n)
            best = max(best, (qphi - kappa0 * (n in B0)) / phi[n])
    rep = validate_hypotheses(m, LyapunovSpec(phi, 1.0, kappa0, frozenset(B0)))
    assert rep.h4_lambda_min == pytest.approx(best, abs=1e-12)
    assert rep.h4
    tight = validate_hypotheses(m, LyapunovSpec(phi, best * 0.99, kappa0, frozenset(B0)))
    assert not tight.h4


def test_lyapunov_drift_formula(rng):
    m = random_model(rng)
    phi = rng.uniform(1, 3, m.n_states)
    d = lyapunov_drift(m, phi)
    th, a = 0, 0
    expect = sum(m.rate(th, g, a) * phi[g] for g in range(m.n_states)) - m.total_rate(th, a) * phi[th]
    assert d[th, a] == pytest.approx(expect, abs=1e-12)


def test_h5_h6_sampled_constants():
    env = DiffusionEnv.affine([0.0, 1.0], [0.5, -1.0], [0.3, 0.3], [0.0, 0.2])
    m = _two_state()
    rep = validate_hypotheses(m, env=env)
    assert rep.h5 and rep.h6
    assert rep.C1_estimate == pytest.approx(1.04, rel=1e-9)
    bad = DiffusionEnv.affine([0.0, 1.0], [0.5, -1.0], [0.3, 0.3], [0.0, 0.2], C1=0.5, C2=0.1)
    rep = validate_hypotheses(m, env=bad)
    assert not rep.h5 and not rep.h6 and not rep.passed


def test_cost_lower_bound_flag():
    c = CostSpec.from_tables(np.array([[0.0, -1.0], [1.0, 1.0]]), np.zeros(2), lower_bound=0.0)
    rep = validate_hypotheses(_two_state(), cost=c)
    assert rep.cost_bounded_below is False


def test_validate_is_deterministic(rng):
    m = random_model(rng)
    env = DiffusionEnv.affine(np.zeros(m.n_states), -np.ones(m.n_states), np.ones(m.n_states),
                              np.zeros(m.n_states))
    a = validate_hypotheses(m, env=env, seed=3)
    b = validate_hypotheses(m, env=env, seed=3)
    assert a == b
    assert a.table() == b.table()


# ---------------------------------------------------------------------------
# policies and moduli


def test_weights_right_continuous_with_left_limits():
    w = np.stack([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]])])
    p = RelaxedMarkovPolicy([0.0, 0.5, 1.0], w, PIECEWISE_CONSTANT)
    assert np.array_equal(p.weights_at(0.5)[0], [0.0, 1.0])
    assert np.array_equal(p.weights_at(0.5, left=True)[0], [1.0, 0.0])
    assert np.array_equal(p.weights_at(1.0)[0], [0.0, 1.0])
    lin = RelaxedMarkovPolicy([0.0, 0.5, 1.0], w, MIXTURE_LINEAR)
    assert np.allclose(lin.weights_at(0.25)[0], [0.5, 0.5])
    assert np.array_equal(lin.weights_for([0.25, 0.75], [0, 0]), lin.weights_at(np.array([0.25, 0.75]))[:, 0])


def test_lift_stationary_dirac_curves():
    xi = [1, 0]
    pol = lift_stationary(RandomizedStationaryPolicy.deterministic(xi), 2.0, 2)
    assert pol.is_stationary and pol.horizon == 2.0
    for t in (0.0, 0.7, 2.0):
        for th, a in enumerate(xi):
            m = pol.measure(t, th)
            assert m.support == (a,) and m.weights[0] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["linear", "power", "tabulated"]))
def test_lift_stationary_passes_every_psi(seed, form):
    rng = np.random.default_rng(seed)
    A, S = 3, 2
    grid = ActionGrid(rng.uniform(0, 1, (A, 2)))
    pi = RandomizedStationaryPolicy(tuple(MeasureOnU.from_dense(rng.dirichlet(np.ones(A))) for _ in range(S)))
    psi = {"linear": PsiModulus.linear(1e-6),
           "power": PsiModulus("power", {"c": 1e-6, "beta": 3.0}),
           "tabulated": PsiModulus("tabulated", {"r": [0, 1], "values": [0, 1e-9]})}[form]
    pol = lift_stationary(pi, 1.0, A, psi)
    rep = modulus_report(pol, grid=grid)
    assert rep.passed and rep.w2_pass and rep.max_w() == 0.0


def test_modulus_of_linear_mixture():
    # slope L between Diracs at distance D: w on [t1, t2) is L*D*(t2 - t1)
    D, L = 2.0, 0.8
    grid = ActionGrid([0.0, D])
    w = np.stack([[[1.0, 0.0]], [[0.2, 0.8]]])
    pol = RelaxedMarkovPolicy([0.0, 1.0], w, MIXTURE_LINEAR, PsiModulus.linear(L * D))
    tg = np.linspace(0, 1, 41)
    rep = modulus_report(pol, tg, grid=grid)
    ii, jj = np.triu_indices(41, 1)
    assert np.allclose(rep.w[0, ii, jj], L * D * (tg[jj] - tg[ii]), atol=1e-12)
    assert rep.passed
    tight = modulus_report(pol, tg, psi=PsiModulus.linear(0.99 * L * D), grid=grid)
    assert not tight.passed


def test_modulus_of_step_policy_w_fails_w2_passes():
    grid = UNIT
    w = np.stack([[[1.0, 0.0]], [[0.0, 1.0]], [[0.0, 1.0]]])
    pol = RelaxedMarkovPolicy([0.0, 0.5, 1.0], w, PIECEWISE_CONSTANT, PsiModulus.linear(1.0))
    tg = np.linspace(0, 1, 101)
    rep = modulus_report(pol, tg, grid=grid)
    assert not rep.w_pass
    i, j = 49, 51                      # interval straddling the jump
    assert rep.w[0, i, j] == pytest.approx(1.0)
    assert rep.w_worst[0] == 0
    # w'' sees no oscillation with a single jump
    assert rep.w2_pass and rep.w2.max() == 0.0
    assert modulus_report(pol, tg, grid=grid, criterion="w2").passed


def test_modulus_w_includes_left_limit_at_right_end():
    w = np.stack([[[1.0, 0.0]], [[0.0, 1.0]], [[0.0, 1.0]]])
    pol = RelaxedMarkovPolicy([0.0, 0.5, 1.0], w, PIECEWISE_CONSTANT, PsiModulus.linear(1.0))
    rep = modulus_report(pol, [0.0, 0.5, 1.0], grid=UNIT)
    # [0.5, 1.0) contains only the post-jump value, so no oscillation
    assert rep.w[0, 1, 2] == 0.0
    assert rep.w[0, 0, 1] == 0.0          # [0, 0.5): constant, left limit at 0.5 equals it
    assert rep.w[0, 0, 2] == 1.0


def test_w2_detects_two_jumps():
    w = np.stack([[[1.0, 0.0]], [[0.0, 1.0]], [[1.0, 0.0]], [[1.0, 0.0]]])
    pol = RelaxedMarkovPolicy([0.0, 0.4, 0.6, 1.0], w, PIECEWISE_CONSTANT, PsiModulus.linear(1.0))
    rep = modulus_report(pol, np.linspace(0, 1, 21), grid=UNIT)
    # an excursion of length 0.2: three-point oscillation 1 once delta > 0.2
    small = rep.w2_delta < 0.2 - 1e-9
    big = rep.w2_delta > 0.2 + 1e-9
    assert np.all(rep.w2[0, small] == 0.0)
    assert np.all(rep.w2[0, big] == 1.0)


def test_modulus_report_needs_grid_and_psi():
    pol = lift_stationary(RandomizedStationaryPolicy.deterministic([0]), 1.0, 2)
    with pytest.raises(ConfigurationError):
        modulus_report(pol, grid=UNIT)
    with pytest.raises(ConfigurationError):
        modulus_report(pol.with_psi(PsiModulus.linear(1.0)))
