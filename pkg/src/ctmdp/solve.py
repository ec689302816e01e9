"""Policy evaluation, backward dynamic programming, the lower-bound
certificate and psi-feasible smoothing of step policies."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DomainError, RefusalError
from .model import (MIXTURE_LINEAR, PIECEWISE_CONSTANT, ActionGrid, CostSpec, DiffusionEnv,
                    ModulusReport, PsiModulus, QPairModel, RelaxedMarkovPolicy, default_eval_grid,
                    h2_holds, mixed_generator, modulus_report, w1_dense)
from .semigroup import DEFAULT_TOL, rk4_step_size
from .simulate import sample_chains, sample_coupled_batch


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    se: float
    npaths: int
    seed: int

    def interval(self, n_se: float = 4.0) -> tuple:
        return self.mean - n_se * self.se, self.mean + n_se * self.se


def _require_h2(model):
    if not h2_holds(model):
        raise RefusalError(
            f"H2 fails: total rate {model.max_total_rate():.6g} exceeds declared M={model.M:.6g}")


def check_admissible(policy: RelaxedMarkovPolicy, grid: ActionGrid, criterion: str = "w",
                     eval_grid=None) -> Optional[ModulusReport]:
    """Refuse a policy whose per-state curves break its psi modulus.

    Stationary policies are always admissible. A time-varying policy must
    carry a psi.
    """
    if policy.is_stationary:
        return None
    if policy.psi is None:
        raise RefusalError("time-varying policy declares no psi modulus")
    rep = modulus_report(policy, eval_grid, grid=grid, criterion=criterion)
    if not rep.passed:
        if criterion == "w":
            th, t1, t2, ex = rep.w_worst
            raise RefusalError(f"inadmissible policy: w on [{t1:.6g}, {t2:.6g}) in state {th} "
                               f"exceeds psi by {ex:.3g}")
        th, d, ex = rep.w2_worst
        raise RefusalError(f"inadmissible policy: w'' at delta={d:.6g} in state {th} exceeds psi by {ex:.3g}")
    return rep


# ---------------------------------------------------------------------------
# exact evaluation of chain-only costs


def _mixed_running(cost: CostSpec, policy, t, left=False) -> np.ndarray:
    """f(t, theta, nu_t(., theta)) for every state, shape (S,)."""
    table = cost.running_left(t) if left else cost.running(t)
    return np.einsum("ia,ia->i", np.asarray(table, float), policy.weights_at(t, left=left))


def _cut_points(policy, cost, s, T, extra=()):
    inner = [k for k in list(policy.knots) + list(cost.breaks) + list(extra) if s < k < T]
    return np.unique(np.concatenate([[s, T], inner]))


class _RunningIntegral:
    """Antiderivative of t -> f(t, theta, nu_t) on [s, T] for every theta.

    Between cut points the integrand is affine in t, so the trapezoid rule
    on the cut points is exact and partial pieces integrate in closed form.
    """

    def __init__(self, cost, policy, s, T):
        self.nodes = _cut_points(policy, cost, s, T)
        a, b = self.nodes[:-1], self.nodes[1:]
        self.fa = np.stack([_mixed_running(cost, policy, t) for t in a])
        self.fb = np.stack([_mixed_running(cost, policy, t, left=True) for t in b])
        seg = 0.5 * (b - a)[:, None] * (self.fa + self.fb)
        self.F = np.vstack([np.zeros(self.fa.shape[1]), np.cumsum(seg, axis=0)])

    def __call__(self, t, states):
        t = np.asarray(t, float)
        k = np.clip(np.searchsorted(self.nodes, t, side="right") - 1, 0, len(self.nodes) - 2)
        a, b = self.nodes[k], self.nodes[k + 1]
        fa, fb = self.fa[k, states], self.fb[k, states]
        lam = (t - a) / (b - a)
        ft = fa + lam * (fb - fa)
        return self.F[k, states] + 0.5 * (t - a) * (fa + ft)


def evaluate_exact_chain(model: QPairModel, cost: CostSpec, policy: RelaxedMarkovPolicy,
                         s: float = 0.0, tol: float = DEFAULT_TOL, T: Optional[float] = None,
                         require_admissible: bool = True, criterion: str = "w") -> np.ndarray:
    """Expected cost from (s, theta) for every theta.

    Integrates v' = -Q(t) v - f(t, ., nu_t) backwards from v(T) = g with RK4,
    on pieces cut at the policy knots and the cost breaks.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    if cost.uses_x:
        raise ConfigurationError("exact evaluation needs a chain-only cost")
    _require_h2(model)
    if require_admissible:
        check_admissible(policy, model.grid, criterion)
    T = policy.horizon if T is None else float(T)
    if not 0 <= s <= T <= policy.horizon * (1 + 1e-12):
        raise DomainError("need 0 <= s <= T <= policy horizon")
    v = np.array(cost.terminal(), dtype=float)
    if s == T:
        return v
    edges = _cut_points(policy, cost, s, T)
    a_, b_ = edges[:-1], edges[1:]
    qa = mixed_generator(model, policy.weights_at(a_))
    qb = mixed_generator(model, policy.weights_at(b_, left=True))
    fa = np.stack([_mixed_running(cost, policy, t) for t in a_])
    fb = np.stack([_mixed_running(cost, policy, t, left=True) for t in b_])
    k_target = rk4_step_size(model.M, T - s, tol)
    for p in range(len(a_) - 1, -1, -1):
        a, b = a_[p], b_[p]
        m = max(1, int(np.ceil((b - a) / k_target)))
        k = (b - a) / m
        # reversed time: tau runs from b down to a
        dQ, df = (qa[p] - qb[p]) / m, (fa[p] - fb[p]) / m
        for j in range(m):
            q0, f0 = qb[p] + j * dQ, fb[p] + j * df
            qh, fh = q0 + 0.5 * dQ, f0 + 0.5 * df
            q1, f1 = q0 + dQ, f0 + df
            k1 = q0 @ v + f0
            k2 = qh @ (v + 0.5 * k * k1) + fh
            k3 = qh @ (v + 0.5 * k * k2) + fh
            k4 = q1 @ (v + k * k3) + f1
            v = v + (k / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return v


def cost_exact_chain(model: QPairModel, cost: CostSpec, policy: RelaxedMarkovPolicy, s: float,
                     theta: int, tol: float = DEFAULT_TOL, require_admissible: bool = True,
                     criterion: str = "w") -> float:
    """J(s, theta, policy) for a chain-only cost."""
    return float(evaluate_exact_chain(model, cost, policy, s, tol,
                                      require_admissible=require_admissible, criterion=criterion)[theta])


# ---------------------------------------------------------------------------
# Monte Carlo evaluation


def cost_mc(model: QPairModel, cost: CostSpec, policy: RelaxedMarkovPolicy, s: float, theta: int,
            npaths: int, seed: int = 0, env: Optional[DiffusionEnv] = None, x=None,
            dt: Optional[float] = None, require_admissible: bool = True,
            criterion: str = "w") -> CostEstimate:
    """Sample-mean estimate of J with its standard error.

    Without an environment the running cost along each path is integrated
    exactly (it is affine in t between knots and jumps). With one, the
    trapezoid rule is applied on the Euler mesh (uniform grid plus jumps).
    """
    if npaths < 2:
        raise DomainError("need at least 2 paths")
    if require_admissible:
        check_admissible(policy, model.grid, criterion)
    T = policy.horizon
    if env is None:
        if cost.uses_x:
            raise ConfigurationError("cost depends on x but no environment was given")
        batch = sample_chains(model, policy, s, theta, T, npaths, seed)
        paths, start, end, states = batch.holding_intervals()
        F = _RunningIntegral(cost, policy, s, T)
        pieces = F(end, states) - F(start, states)
        total = np.bincount(paths, weights=pieces, minlength=npaths)
        total += np.asarray(cost.terminal(), float)[batch.states_at(T)]
    else:
        if x is None:
            raise ConfigurationError("environment evaluation needs an initial x")
        batch = sample_coupled_batch(model, env, policy, s, x, theta, T, npaths, dt, seed,
                                     record=False, cost=cost)
        xT = batch.terminal_x
        if cost.uses_x:
            g = np.asarray(cost.terminal(xT[:, 0] if env.dim == 1 else xT), float)
            g = g[np.arange(npaths), batch.terminal_state]
        else:
            g = np.asarray(cost.terminal(), float)[batch.terminal_state]
        total = batch.running_cost + g
    se = float(total.std(ddof=1) / np.sqrt(npaths))
    return CostEstimate(float(total.mean()), se, int(npaths), int(seed))


# ---------------------------------------------------------------------------
# dynamic programming on the chain


@dataclass(frozen=True)
class ValueGridChain:
    """v[k, theta] at times[k]; actions[k, theta] is the minimizer used on
    [times[k], times[k+1])."""

    times: np.ndarray
    values: np.ndarray
    actions: np.ndarray
    n_actions: int

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def step_policy(self) -> RelaxedMarkovPolicy:
        """Right-continuous step policy of Dirac measures at the minimizers."""
        acts = np.vstack([self.actions, self.actions[-1:]])
        knots = self.times
        if knots[0] > 0:
            knots = np.concatenate([[0.0], knots])
            acts = np.vstack([acts[:1], acts])
        w = np.zeros(acts.shape + (self.n_actions,))
        np.put_along_axis(w, acts[..., None], 1.0, axis=-1)
        return RelaxedMarkovPolicy(knots, w, PIECEWISE_CONSTANT)

    def time_modulus(self) -> float:
        """Largest change of v across adjacent time knots (diagnostic)."""
        return float(np.abs(np.diff(self.values, axis=0)).max()) if len(self.times) > 1 else 0.0

    def rows(self, states=None):
        S = self.values.shape[1]
        labels = states if states is not None else range(S)
        for k, t in enumerate(self.times):
            for th, lab in enumerate(labels):
                a = int(self.actions[k, th]) if k < len(self.actions) else ""
                yield (t, lab, self.values[k, th], a)


def _stability_steps(rate_sum: float, length: float) -> int:
    """Smallest step count n with (length / n) * rate_sum < 1."""
    return int(np.floor(length * rate_sum)) + 1


def dp_chain(model: QPairModel, cost: CostSpec, T: float, n_steps: int, s: float = 0.0) -> ValueGridChain:
    """Backward explicit recursion on t_k = s + k dt.

    v_k(theta) = min_a { f(t_k, theta, a) dt + v_{k+1}(theta)
                         + dt sum_l q(theta, l; a) (v_{k+1}(l) - v_{k+1}(theta)) },
    ties to the lowest action index, v_N = g.
    """
    _require_h2(model)
    if cost.uses_x:
        raise ConfigurationError("dp_chain needs a chain-only cost")
    if n_steps < 1 or not T > s:
        raise DomainError("need n_steps >= 1 and T > s")
    dt = (T - s) / n_steps
    if dt * 2 * model.M >= 1:
        raise RefusalError(f"explicit scheme unstable: dt*2M = {dt * 2 * model.M:.4g} >= 1; "
                           f"need at least {_stability_steps(2 * model.M, T - s)} steps")
    times = s + dt * np.arange(n_steps + 1)
    times[-1] = T
    S, A = model.n_states, model.n_actions
    values = np.empty((n_steps + 1, S))
    actions = np.empty((n_steps, S), dtype=np.int64)
    values[-1] = np.asarray(cost.terminal(), float)
    rates, total = model.rates, model.total
    for k in range(n_steps - 1, -1, -1):
        v = values[k + 1]
        jump = np.einsum("iga,g->ia", rates, v) - total * v[:, None]
        obj = np.asarray(cost.running(times[k]), float) * dt + v[:, None] + dt * jump
        a = np.argmin(obj, axis=1)
        actions[k] = a
        values[k] = obj[np.arange(S), a]
    return ValueGridChain(times, values, actions, A)


def dp_chain_fixed(model: QPairModel, cost: CostSpec, T: float, actions: np.ndarray,
                   s: float = 0.0) -> np.ndarray:
    """The same recursion with a prescribed action table (n_steps, S);
    returns v_0."""
    n_steps = actions.shape[0]
    dt = (T - s) / n_steps
    S = model.n_states
    v = np.asarray(cost.terminal(), float).copy()
    idx = np.arange(S)
    for k in range(n_steps - 1, -1, -1):
        a = actions[k]
        q = model.rates[idx, :, a]
        jump = q @ v - model.total[idx, a] * v
        f = np.asarray(cost.running(s + k * dt), float)[idx, a]
        v = f * dt + v + dt * jump
    return v


def richardson_constant(model: QPairModel, cost: CostSpec, T: float, n_steps: int,
                        s: float = 0.0) -> float:
    """C with |v_dt - v_0| ~ C dt for the first-order scheme, from two
    resolutions: C = 2 max|v_dt - v_{dt/2}| / dt at time s."""
    a = dp_chain(model, cost, T, n_steps, s).values[0]
    b = dp_chain(model, cost, T, 2 * n_steps, s).values[0]
    return float(2 * np.abs(a - b).max() / ((T - s) / n_steps))


# ---------------------------------------------------------------------------
# dynamic programming with the environment


@dataclass(frozen=True)
class ValueGridEnv:
    """v[k, i, theta] at (times[k], x[i]); actions[k, i, theta] used on
    [times[k], times[k+1]). Boundary rows use a zero second derivative."""

    times: np.ndarray
    x: np.ndarray
    values: np.ndarray
    actions: np.ndarray
    n_actions: int

    def value_at(self, x: float, theta: int, k: int = 0) -> float:
        return float(np.interp(x, self.x, self.values[k, :, theta]))

    def rows(self, states=None):
        S = self.values.shape[2]
        labels = states if states is not None else range(S)
        for k, t in enumerate(self.times):
            for i, xv in enumerate(self.x):
                for th, lab in enumerate(labels):
                    a = int(self.actions[k, i, th]) if k < len(self.actions) else ""
                    yield (t, lab, xv, self.values[k, i, th], a)


def default_x_domain(env: DiffusionEnv, x0: float, T: float, s: float = 0.0) -> tuple:
    half = 6.0 * np.sqrt(env.C2 * (1.0 + x0 ** 2)) * (T - s)
    return x0 - half, x0 + half


def dp_env(model: QPairModel, env: DiffusionEnv, cost: CostSpec, T: float, n_steps: Optional[int],
           x_lo: float, x_hi: float, n_x: int, s: float = 0.0) -> ValueGridEnv:
    """Explicit finite-difference recursion for the coupled value.

    Central differences for (1/2) sigma^2 v'', upwind differences for b v',
    the jump coupling of the chain, minimized over the action grid. Ghost
    values at the ends are linear extrapolations, i.e. v'' = 0 there.
    ``n_steps=None`` picks the smallest stable count.
    """
    _require_h2(model)
    if env.dim != 1:
        raise RefusalError("the environment solver handles d = 1 only")
    if n_x < 3 or not x_hi > x_lo or not T > s:
        raise DomainError("need n_x >= 3, x_hi > x_lo and T > s")
    x = np.linspace(x_lo, x_hi, n_x)
    dx = x[1] - x[0]
    S, A = model.n_states, model.n_actions
    th_all = np.repeat(np.arange(S), n_x)
    xx = np.tile(x, S)[:, None]
    b = env.b(xx, th_all)[:, 0].reshape(S, n_x).T                 # (n_x, S)
    sig2 = (env.sigma(xx, th_all)[:, 0, 0] ** 2).reshape(S, n_x).T
    rate_sum = float(sig2.max() / dx ** 2 + np.abs(b).max() / dx + 2 * model.M)
    need = _stability_steps(rate_sum, T - s) if rate_sum * (T - s) >= 1 else 1
    if n_steps is None:
        n_steps = need
    dt = (T - s) / n_steps
    if dt * rate_sum > 1:
        raise RefusalError(f"explicit scheme unstable: dt*(sigma^2/dx^2 + |b|/dx + 2M) = "
                           f"{dt * rate_sum:.4g} > 1; need at least {need} steps")
    times = s + dt * np.arange(n_steps + 1)
    times[-1] = T

    def running(t):
        if cost.uses_x:
            return np.asarray(cost.running(t, x), float)          # (n_x, S, A)
        return np.broadcast_to(np.asarray(cost.running(t), float), (n_x, S, A))

    g = np.asarray(cost.terminal(x), float) if cost.uses_x else np.broadcast_to(
        np.asarray(cost.terminal(), float), (n_x, S))
    values = np.empty((n_steps + 1, n_x, S))
    actions = np.empty((n_steps, n_x, S), dtype=np.int64)
    values[-1] = g
    bp, bm = np.maximum(b, 0.0), np.minimum(b, 0.0)
    rates, total = model.rates, model.total
    for k in range(n_steps - 1, -1, -1):
        v = values[k + 1]
        ext = np.vstack([2 * v[:1] - v[1:2], v, 2 * v[-1:] - v[-2:-1]])
        fwd = (ext[2:] - ext[1:-1]) / dx
        bwd = (ext[1:-1] - ext[:-2]) / dx
        second = (ext[2:] - 2 * ext[1:-1] + ext[:-2]) / dx ** 2
        diff = 0.5 * sig2 * second + bp * fwd + bm * bwd
        jump = np.einsum("iga,xg->xia", rates, v) - total[None] * v[:, :, None]
        obj = running(times[k]) * dt + (v + dt * diff)[:, :, None] + dt * jump
        a = np.argmin(obj, axis=2)
        actions[k] = a
        values[k] = np.take_along_axis(obj, a[..., None], axis=2)[..., 0]
    return ValueGridEnv(times, x, values, actions, A)


# ---------------------------------------------------------------------------
# verification certificate


@dataclass(frozen=True)
class VerificationReport:
    passed: bool
    terminal_ok: bool
    terminal_worst: Optional[tuple]     # (state, phi(T) - g) at the worst state
    min_residual: float
    residual_location: tuple            # (t, state, action)
    tolerance: float
    max_gap: Optional[float] = None     # max over (t, theta) of phi - v_dp

    def summary(self) -> str:
        lines = [f"certificate: {'pass' if self.passed else 'FAIL'}",
                 f"terminal phi(T) <= g: {'yes' if self.terminal_ok else 'no'}"
                 + ("" if self.terminal_ok else f" (worst {self.terminal_worst})"),
                 f"min residual {self.min_residual:.6g} at {self.residual_location}; "
                 f"tolerance {self.tolerance:.3g}"]
        if self.max_gap is not None:
            lines.append(f"max phi - v_dp {self.max_gap:.6g}")
        return "\n".join(lines)


def verification_residual(phi: np.ndarray, times: np.ndarray, model: QPairModel,
                          cost: CostSpec) -> np.ndarray:
    """phi' + f + sum_l q(., l; u) phi(l) - q(.; u) phi(.), shape (N, S, A).

    The time derivative is the forward difference on ``times``; the other
    terms are taken at the left end t_k.
    """
    phi = np.asarray(phi, float)
    dphi = np.diff(phi, axis=0) / np.diff(times)[:, None]
    jump = np.einsum("iga,kg->kia", model.rates, phi[:-1]) - model.total[None] * phi[:-1, :, None]
    f = np.stack([np.asarray(cost.running(t), float) for t in times[:-1]])
    return dphi[:, :, None] + f + jump


def verify_lower_bound(phi, times, model: QPairModel, cost: CostSpec,
                       v_dp: Optional[np.ndarray] = None, tol: Optional[float] = None,
                       terminal_atol: float = 1e-12) -> VerificationReport:
    """Check that phi certifies V >= phi on the grid.

    Requires the residual of the verification inequality to be >= -tol at
    every (t_k, theta, u) and phi(T, .) <= g. The default tol is
    10 dt (max|f| + 2M max|phi|).
    """
    phi = np.asarray(phi, float)
    times = np.asarray(times, float)
    if phi.shape != (len(times), model.n_states):
        raise ConfigurationError("phi must have shape (len(times), n_states)")
    g = np.asarray(cost.terminal(), float)
    over = phi[-1] - g
    worst = int(np.argmax(over))
    terminal_ok = bool(over[worst] <= terminal_atol)
    res = verification_residual(phi, times, model, cost)
    if tol is None:
        fmax = max(float(np.abs(np.asarray(cost.running(t), float)).max()) for t in times[:-1])
        dt = float(np.diff(times).max())
        tol = 10 * dt * (fmax + 2 * model.M * float(np.abs(phi).max()))
    k, th, a = np.unravel_index(np.argmin(res), res.shape)
    min_res = float(res[k, th, a])
    gap = None if v_dp is None else float((phi - np.asarray(v_dp, float)).max())
    return VerificationReport(terminal_ok and min_res >= -tol, terminal_ok,
                              None if terminal_ok else (worst, float(over[worst])),
                              min_res, (float(times[k]), int(th), int(a)), float(tol), gap)


def trivial_lower_bound(times, cost: CostSpec, n_states: int) -> np.ndarray:
    """phi(t, .) = min g + lb_f (T - t), which certifies itself."""
    times = np.asarray(times, float)
    g = np.asarray(cost.terminal(), float)
    return np.broadcast_to((g.min() + cost.lower_bound * (times[-1] - times))[:, None],
                           (len(times), n_states)).copy()


# ---------------------------------------------------------------------------
# psi-feasible smoothing


@dataclass(frozen=True)
class SmoothingResult:
    policy: RelaxedMarkovPolicy
    report: Optional[ModulusReport]
    widths: np.ndarray              # ramp width at each smoothed knot
    ramp_knots: np.ndarray
    cost_delta: Optional[np.ndarray] = None   # smoothed minus step cost, per state


def default_smoothing_psi(step: RelaxedMarkovPolicy, grid: ActionGrid) -> PsiModulus:
    """Linear psi whose ramps at the largest jump span one knot spacing."""
    D, _ = _jumps(step, grid)
    if D.size == 0 or D.max() == 0:
        return PsiModulus.linear(1.0)
    return PsiModulus.linear(float(D.max()) / float(np.diff(step.knots).min()))


def _jumps(step: RelaxedMarkovPolicy, grid: ActionGrid):
    w = step.weights
    idx = []
    sizes = []
    for k in range(1, len(step.knots) - 1):
        if np.any(w[k] != w[k - 1]):
            idx.append(k)
            sizes.append(max(w1_dense(w[k - 1, th], w[k, th], grid) for th in range(w.shape[1])))
    return np.array(sizes), np.array(idx, dtype=np.int64)


def psi_feasible_interpolation(step: RelaxedMarkovPolicy, psi: PsiModulus, grid: ActionGrid,
                               model: Optional[QPairModel] = None, cost: Optional[CostSpec] = None,
                               s: float = 0.0, tol: float = DEFAULT_TOL) -> SmoothingResult:
    """Replace each jump of a step policy by a centred mixture-linear ramp.

    A jump of W1 size D (largest over states) gets width D / L, where L is
    the largest slope with psi(r) >= L r on [0, T]; then every curve is
    W1-Lipschitz with constant L and meets psi. Widths must fit in the
    neighbouring knot spacings. With ``model`` and ``cost`` the exact cost
    change against the step policy is returned too.
    """
    if step.interpolation != PIECEWISE_CONSTANT:
        raise ConfigurationError("smoothing expects a piecewise-constant step policy")
    sizes, idx = _jumps(step, grid)
    knots, w = step.knots, step.weights
    if len(idx) == 0:
        smooth = step.with_psi(psi)
        delta = None if model is None else np.zeros(model.n_states)
        return SmoothingResult(smooth, modulus_report(smooth, grid=grid), np.zeros(0), np.zeros(0), delta)
    L = psi.max_slope(step.horizon)
    gaps = np.diff(knots)
    room = np.minimum(gaps[idx - 1], gaps[idx])
    need = sizes / room                         # slope at which each ramp just fits
    if L <= 0 or np.any(sizes / L > room * (1 + 1e-12)):
        raise RefusalError(f"psi too strict for any ramp within the knot spacing; "
                           f"minimal feasible psi: linear L >= {need.max():.17g}")
    widths = np.minimum(sizes / L, room)

    pts_t = [0.0]
    pts_w = [w[0]]
    for k, width in zip(idx, widths):
        t = knots[k]
        for tt, ww in ((t - width / 2, w[k - 1]), (t + width / 2, w[k])):
            if tt <= pts_t[-1] + 1e-12 * max(1.0, abs(tt)):
                if not np.array_equal(ww, pts_w[-1]):    # pragma: no cover - widths fit by construction
                    raise RefusalError("ramps overlap")
                continue
            pts_t.append(tt)
            pts_w.append(ww)
    T = step.horizon
    if T > pts_t[-1] + 1e-12 * max(1.0, T):
        pts_t.append(T)
        pts_w.append(w[-1])
    else:
        pts_t[-1] = T
    smooth = RelaxedMarkovPolicy(np.array(pts_t), np.stack(pts_w), MIXTURE_LINEAR, psi)
    report = modulus_report(smooth, default_eval_grid(smooth), grid=grid)
    if not report.passed:    # pragma: no cover - guaranteed by the width rule
        raise RefusalError("smoothed policy failed its modulus check")
    delta = None
    if model is not None and cost is not None:
        a = evaluate_exact_chain(model, cost, smooth, s, tol, require_admissible=False)
        b = evaluate_exact_chain(model, cost, step, s, tol, require_admissible=False)
        delta = a - b
    return SmoothingResult(smooth, report, widths, knots[idx], delta)


# ---------------------------------------------------------------------------
# Dirac reduction


@dataclass(frozen=True)
class DiracReductionReport:
    passed: bool
    dirac_min: float
    sampled_min: float
    worst_gap: float       # min over trials of (objective - dirac_min)
    trials: int


def one_step_objective(model: QPairModel, cost: CostSpec, t: float, theta: int, v) -> np.ndarray:
    """f(t, theta, u) + sum_l q(theta, l; u)(v(l) - v(theta)) for each action."""
    v = np.asarray(v, float)
    f = np.asarray(cost.running(t), float)[theta]
    return f + model.rates[theta].T @ v - model.total[theta] * v[theta]


def dirac_reduction_check(model: QPairModel, cost: CostSpec, t: float, theta: int, v,
                          trials: int = 1000, seed: int = 0, atol: float = 1e-12) -> DiracReductionReport:
    """Random measures never beat the best Dirac on the one-step objective."""
    obj = one_step_objective(model, cost, t, theta, v)
    rng = np.random.default_rng(seed)
    A = len(obj)
    mus = rng.dirichlet(np.ones(A), size=trials)
    # sparse measures too, to reach the faces of the simplex
    mask = rng.random((trials, A)) < 0.5
    mask[np.arange(trials), rng.integers(0, A, trials)] = True
    mus = np.vstack([mus, mus * mask / (mus * mask).sum(1, keepdims=True)])
    vals = mus @ obj
    dmin = float(obj.min())
    gap = float(vals.min() - dmin)
    return DiracReductionReport(gap >= -atol, dmin, float(vals.min()), gap, len(mus))
