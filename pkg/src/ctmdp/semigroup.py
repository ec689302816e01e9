"""Transition semigroup P_{s,t} of the controlled chain.

Two independent evaluators are provided: the iterated-integral (Dyson)
series with an a priori truncation rule, and fixed-step RK4 on the forward
Kolmogorov equation dP/dt = P Q(t). Both split [s, t] at the policy knots so
that no quadrature panel or RK4 step straddles a discontinuity.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.polynomial import legendre
from scipy.special import gammainc

from .errors import DomainError
from .model import QPairModel, RelaxedMarkovPolicy, mixed_generator

DEFAULT_TOL = 1e-8


@dataclass(frozen=True)
class GeneratorAt:
    t: float
    Q: np.ndarray


@dataclass(frozen=True)
class TransitionResult:
    """(P_{s,t} h)(theta) for every state.

    ``order`` is the number of Dyson terms kept (None for RK4), ``steps`` the
    RK4 step count (None for Dyson), ``error_bound`` the a priori bound.
    """

    values: np.ndarray
    order: Optional[int]
    error_bound: float
    steps: Optional[int] = None


def generator_at(model: QPairModel, policy: RelaxedMarkovPolicy, t: float, left: bool = False) -> GeneratorAt:
    """Q^mu(t): off-diagonals are the mixed rates under nu_t(., theta)."""
    if not 0.0 <= t <= policy.horizon:
        raise DomainError(f"t={t} outside [0, {policy.horizon}]")
    return GeneratorAt(float(t), mixed_generator(model, policy.weights_at(t, left=left)))


def tail_bound(M: float, s: float, t: float, n: int) -> float:
    """sum_{m >= n} (2M(t-s))^m / m!, the truncation bound of the Dyson series.

    Evaluated as e^x P(n, x) with P the regularized lower incomplete gamma
    function, which avoids the cancellation in e^x - partial sum.
    """
    if n < 0 or t < s or M < 0:
        raise DomainError("need n >= 0, t >= s, M >= 0")
    x = 2.0 * M * (t - s)
    if n == 0:
        return float(np.exp(x))
    if x == 0.0:
        return 0.0
    return float(np.exp(x) * gammainc(n, x))


def _check_interval(policy, s, t):
    if not (0.0 <= s <= t <= policy.horizon * (1 + 1e-12)):
        raise DomainError(f"need 0 <= s <= t <= T, got s={s}, t={t}")


def _pieces(policy: RelaxedMarkovPolicy, s: float, t: float, extra=()) -> np.ndarray:
    inner = [k for k in list(policy.knots) + list(extra) if s < k < t]
    return np.unique(np.concatenate([[s, t], inner]))


def _piece_generators(model, policy, edges):
    """Generator at the left end and left limit at the right end of each piece.

    Within a piece the generator is affine in time (constant for step
    policies), so these two matrices determine it.
    """
    qa = mixed_generator(model, policy.weights_at(edges[:-1]))
    qb = mixed_generator(model, policy.weights_at(edges[1:], left=True))
    return qa, qb


@lru_cache(maxsize=8)
def _gauss_panel(p: int):
    """Gauss-Legendre nodes/weights on [-1, 1] and the matrix S with
    (S f)_i = integral from x_i to 1 of the interpolant of f."""
    x, w = legendre.leggauss(p)
    vander = legendre.legvander(x, p - 1)
    tail = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = 1.0
        anti = legendre.legint(e)
        tail[:, j] = legendre.legval(1.0, anti) - legendre.legval(x, anti)
    return x, w, tail @ np.linalg.inv(vander)


def dyson_order(M: float, s: float, t: float, hnorm: float, tol: float) -> int:
    """Smallest n with tail_bound(M, s, t, n) * ||h|| < tol."""
    if hnorm == 0.0:
        return 1
    n = 1
    while tail_bound(M, s, t, n) * hnorm >= tol:
        n += 1
        if n > 10_000:
            raise DomainError("Dyson series would need more than 10000 terms")
    return n


def dyson_transition(model: QPairModel, policy: RelaxedMarkovPolicy, s: float, t: float,
                     h, tol: float = DEFAULT_TOL, n_terms: Optional[int] = None,
                     nodes_per_panel: int = 16) -> TransitionResult:
    """P_{s,t} h as the time-ordered iterated-integral series.

    The n-th term is the integral over s < t_1 < ... < t_n < t of
    Q(t_1) ... Q(t_n) h, computed through the backward recursion
    K_n(r) = int_r^t Q(u) K_{n-1}(u) du on shared Gauss-Legendre nodes.
    Terms 0..n-1 are kept, n chosen from the factorial tail bound unless
    ``n_terms`` is given.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    _check_interval(policy, s, t)
    h = np.asarray(h, dtype=float)
    hnorm = float(np.abs(h).max()) if h.size else 0.0
    M = model.M
    n = dyson_order(M, s, t, hnorm, tol) if n_terms is None else int(n_terms)
    if t == s or n <= 1:
        return TransitionResult(h.copy(), max(n, 1) if t > s else 0,
                                tail_bound(M, s, t, max(n, 1)) * hnorm if t > s else 0.0)

    edges = _pieces(policy, s, t)
    hmax = 0.5 / M if M > 0 else t - s
    panels = []
    for a, b in zip(edges[:-1], edges[1:]):
        m = max(1, int(np.ceil((b - a) / hmax)))
        panels.extend(np.linspace(a, b, m + 1)[:-1])
    panels = np.append(panels, t)
    a_, b_ = panels[:-1], panels[1:]
    x, w, smat = _gauss_panel(nodes_per_panel)
    half = 0.5 * (b_ - a_)
    nodes = (a_ + b_)[:, None] / 2 + half[:, None] * x[None, :]

    # the panel endpoints are piece boundaries or interior points, so the
    # generator is affine on every panel
    qa, qb = _piece_generators(model, policy, panels)
    lam = (x + 1.0) / 2.0
    qn = qa[:, None] + lam[None, :, None, None] * (qb - qa)[:, None]

    K = np.broadcast_to(h, nodes.shape + h.shape).copy()
    result = h.copy()
    for _ in range(1, n):
        G = np.einsum("pkij,pkj->pki", qn, K)
        local = half[:, None, None] * np.einsum("ik,pks->pis", smat, G)
        tot = half[:, None] * np.einsum("k,pks->ps", w, G)
        after = np.cumsum(tot[::-1], axis=0)[::-1] - tot
        K = local + after[:, None, :]
        result += tot.sum(axis=0)
    return TransitionResult(result, n, tail_bound(M, s, t, n) * hnorm)


def rk4_step_size(M: float, length: float, tol: float) -> float:
    """Step k with n_steps * sum_{m>=5} (2Mk)^m/m! <= tol/2 over ``length``.

    That sum is the per-step defect of RK4 on a constant generator with
    norm <= 2M.
    """
    if M == 0 or length == 0:
        return max(length, 1e-300)
    k = (0.5 * tol * 120.0 / ((2 * M) ** 5 * length)) ** 0.25
    k = min(k, length)
    while np.ceil(length / k) * tail_bound(M, 0.0, k, 5) > 0.5 * tol:
        k *= 0.9
    return k


def transition_matrix(model: QPairModel, policy: RelaxedMarkovPolicy, s: float, t: float,
                      tol: float = DEFAULT_TOL) -> tuple:
    """Integrate dP/dr = P Q(r), P(s) = I with RK4; returns (P, steps)."""
    if tol <= 0:
        raise DomainError("tol must be positive")
    _check_interval(policy, s, t)
    P = np.eye(model.n_states)
    if t == s:
        return P, 0
    edges = _pieces(policy, s, t)
    qa, qb = _piece_generators(model, policy, edges)
    k_target = rk4_step_size(model.M, t - s, tol)
    steps = 0
    for a, b, Qa, Qb in zip(edges[:-1], edges[1:], qa, qb):
        m = max(1, int(np.ceil((b - a) / k_target)))
        k = (b - a) / m
        dQ = (Qb - Qa) / m          # generator change per step
        for j in range(m):
            q0 = Qa + j * dQ
            qh = q0 + 0.5 * dQ
            q1 = q0 + dQ
            k1 = P @ q0
            k2 = (P + 0.5 * k * k1) @ qh
            k3 = (P + 0.5 * k * k2) @ qh
            k4 = (P + k * k3) @ q1
            P = P + (k / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        steps += m
    return P, steps


def ode_transition(model: QPairModel, policy: RelaxedMarkovPolicy, s: float, t: float,
                   h, tol: float = DEFAULT_TOL) -> TransitionResult:
    """P_{s,t} h via RK4 on the forward Kolmogorov equation."""
    h = np.asarray(h, dtype=float)
    P, steps = transition_matrix(model, policy, s, t, tol)
    return TransitionResult(P @ h, None, tol, steps)
