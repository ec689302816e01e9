"""Path sampling: uniformization for the chain, Euler-Maruyama for the
environment, and empirical checks of the moment bounds.

Paths are produced in blocks of ``BLOCK`` indices. Each block draws from
its own counter-based (Philox) stream keyed by (seed, block, purpose), so
results depend only on the seed and the path count, and blocks can be run
in any order or in parallel.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, RefusalError
from .model import (CostSpec, DiffusionEnv, LyapunovSpec, QPairModel, RelaxedMarkovPolicy,
                    h2_holds)

BLOCK = 8192
CHAIN_STREAM, DIFFUSION_STREAM = 0, 1


def stream(seed: int, block: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), block, purpose])))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CTMDP_THREADS", "1")))
    except ValueError:
        return 1


def _blocks(npaths: int):
    return [(b, min(BLOCK, npaths - b * BLOCK)) for b in range((npaths + BLOCK - 1) // BLOCK)]


def _map_blocks(fn, npaths):
    blocks = _blocks(npaths)
    n = worker_count()
    if n == 1 or len(blocks) == 1:
        return [fn(b, m) for b, m in blocks]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(lambda bm: fn(*bm), blocks))


# ---------------------------------------------------------------------------
# chain paths


@dataclass(frozen=True)
class ChainPath:
    """One right-continuous step path on [s, T]."""

    s: float
    T: float
    jump_times: np.ndarray
    states: np.ndarray      # initial state followed by post-jump states
    seed: int
    index: int

    def state_at(self, t: float) -> int:
        k = np.searchsorted(self.jump_times, t, side="right")
        return int(self.states[k])

    def holding_times(self) -> np.ndarray:
        return np.diff(np.concatenate([[self.s], self.jump_times]))


@dataclass(frozen=True)
class ChainBatch:
    """Many chain paths from a common (s, theta), stored as flat jump arrays.

    Jumps of path i are ``jump_times[offsets[i]:offsets[i]+counts[i]]``.
    """

    s: float
    T: float
    theta: int
    counts: np.ndarray
    jump_times: np.ndarray
    jump_states: np.ndarray
    seed: int

    @property
    def npaths(self) -> int:
        return len(self.counts)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.int64)

    @property
    def path_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.npaths), self.counts)

    def path(self, i: int) -> ChainPath:
        o, c = self.offsets[i], self.counts[i]
        return ChainPath(self.s, self.T, self.jump_times[o:o + c].copy(),
                         np.concatenate([[self.theta], self.jump_states[o:o + c]]),
                         self.seed, i)

    def paths(self):
        return [self.path(i) for i in range(self.npaths)]

    def states_at(self, t: float) -> np.ndarray:
        """Lambda_t for every path (right-continuous)."""
        cs = np.concatenate([[0], np.cumsum(self.jump_times <= t)])
        n_before = cs[self.offsets + self.counts] - cs[self.offsets]
        out = np.full(self.npaths, self.theta, dtype=np.int64)
        has = n_before > 0
        out[has] = self.jump_states[self.offsets[has] + n_before[has] - 1]
        return out

    def holding_intervals(self):
        """Flat (path, start, end, state) arrays covering [s, T] for every path."""
        n = self.npaths
        pidx = self.path_index
        starts = np.concatenate([np.full(n, self.s), self.jump_times])
        paths = np.concatenate([np.arange(n), pidx])
        states = np.concatenate([np.full(n, self.theta), self.jump_states])
        order = np.lexsort((starts, paths))
        starts, paths, states = starts[order], paths[order], states[order]
        ends = np.append(starts[1:], self.T)
        last = np.append(paths[1:] != paths[:-1], True)
        ends[last] = self.T
        return paths, starts, ends, states

    def first_holding_times(self) -> tuple:
        """Time to first jump from the initial state, and whether it happened."""
        first = np.full(self.npaths, self.T)
        has = self.counts > 0
        first[has] = self.jump_times[self.offsets[has]]
        return first - self.s, has


def _require_h2(model: QPairModel):
    if not h2_holds(model):
        raise RefusalError(
            f"H2 fails: total rate {model.max_total_rate():.6g} exceeds declared M={model.M:.6g}")


def _uniformize(model, policy, s, theta, T, n, rng):
    """Jump arrays for n paths by thinning a rate-M Poisson stream."""
    M = model.M
    if M == 0 or T == s:
        return np.zeros(n, np.int64), np.zeros(0), np.zeros(0, np.int64)
    cand = rng.poisson(M * (T - s), size=n)
    owner = np.repeat(np.arange(n), cand)
    times = s + (T - s) * rng.random(owner.size)
    order = np.lexsort((times, owner))
    times = times[order]
    offsets = np.concatenate([[0], np.cumsum(cand)[:-1]])
    state = np.full(n, theta, dtype=np.int64)
    accepted = np.zeros(owner.size, dtype=bool)
    new_state = np.zeros(owner.size, dtype=np.int64)
    rates = model.rates
    for k in range(int(cand.max()) if n else 0):
        active = np.flatnonzero(cand > k)
        pos = offsets[active] + k
        tau = times[pos]
        cur = state[active]
        w = policy.weights_for(tau, cur)
        out = np.einsum("nga,na->ng", rates[cur], w) / M
        cdf = np.cumsum(out, axis=1)
        u = rng.random(len(active))
        jump = u < cdf[:, -1]
        target = (u[:, None] < cdf).argmax(axis=1)
        j = active[jump]
        state[j] = target[jump]
        accepted[pos[jump]] = True
        new_state[pos[jump]] = target[jump]
    counts = np.bincount(owner[accepted], minlength=n).astype(np.int64)
    return counts, times[accepted], new_state[accepted]


def sample_chains(model: QPairModel, policy: RelaxedMarkovPolicy, s: float, theta: int,
                  T: float, npaths: int, seed: int = 0) -> ChainBatch:
    """Sample ``npaths`` chain paths on [s, T] by uniformization.

    At a candidate time tau of the rate-M stream, a path in state theta'
    jumps to gamma with probability q(theta', gamma; nu_tau(., theta'))/M.
    """
    _require_h2(model)
    if not 0 <= s <= T <= policy.horizon * (1 + 1e-12):
        raise DomainError("need 0 <= s <= T <= policy horizon")

    def run(block, m):
        return _uniformize(model, policy, s, theta, T, m, stream(seed, block, CHAIN_STREAM))

    parts = _map_blocks(run, npaths)
    return ChainBatch(float(s), float(T), int(theta),
                      np.concatenate([p[0] for p in parts]),
                      np.concatenate([p[1] for p in parts]),
                      np.concatenate([p[2] for p in parts]), int(seed))


def sample_chain(model, policy, s, theta, T, seed=0) -> ChainPath:
    """A single path; identical to path 0 of ``sample_chains(..., npaths=1)``."""
    return sample_chains(model, policy, s, theta, T, 1, seed).path(0)


# ---------------------------------------------------------------------------
# coupled paths


@dataclass(frozen=True)
class CoupledPath:
    chain: ChainPath
    times: np.ndarray
    x: np.ndarray       # (len(times), d)


@dataclass(frozen=True)
class CoupledBatch:
    """Environment paths on a shared uniform grid plus each path's values at
    its own jump times (aligned with ``chain.jump_times``)."""

    chain: ChainBatch
    grid: np.ndarray
    x_grid: Optional[np.ndarray]    # (npaths, len(grid), d) or None
    x_jump: Optional[np.ndarray]    # (total jumps, d) or None
    x0: np.ndarray
    running_cost: Optional[np.ndarray] = None   # per-path integral of f, if requested
    terminal_x: Optional[np.ndarray] = None     # (npaths, d)
    terminal_state: Optional[np.ndarray] = None

    def path(self, i: int) -> CoupledPath:
        cp = self.chain.path(i)
        o, c = self.chain.offsets[i], self.chain.counts[i]
        t = np.concatenate([self.grid, cp.jump_times])
        x = np.concatenate([self.x_grid[i], self.x_jump[o:o + c]])
        order = np.argsort(t, kind="stable")
        return CoupledPath(cp, t[order], x[order])

    def x_at_grid(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.grid - t)))
        if not np.isclose(self.grid[k], t, rtol=0, atol=1e-12 * max(1.0, abs(t))):
            raise DomainError(f"{t} is not a mesh time")
        return self.x_grid[:, k]


def _euler_block(model, env, policy, chain: ChainBatch, x0, dt, rng, record, cost):
    s, T = chain.s, chain.T
    n = chain.npaths
    d = env.dim
    m = max(1, int(np.ceil((T - s) / dt - 1e-9)))
    grid = np.linspace(s, T, m + 1)
    x = np.broadcast_to(np.asarray(x0, float).reshape(1, d), (n, d)).copy()
    state = np.full(n, chain.theta, dtype=np.int64)
    t_cur = np.full(n, s)
    nxt = chain.offsets.copy()
    end = nxt + chain.counts
    xg = np.empty((n, m + 1, d)) if record else None
    xj = np.empty((len(chain.jump_times), d)) if record else None
    if record:
        xg[:, 0] = x
    acc = np.zeros(n) if cost is not None else None

    def advance(idx, t_to):
        h = t_to - t_cur[idx]
        xi, th = x[idx], state[idx]
        if acc is not None:
            f0 = _path_cost(cost, policy, t_cur[idx], xi, th, left=False, d=d)
        z = rng.standard_normal((len(idx), d))
        dw = np.sqrt(h)[:, None] * z
        xn = xi + env.b(xi, th) * h[:, None] + np.einsum("nij,nj->ni", env.sigma(xi, th), dw)
        if acc is not None:
            f1 = _path_cost(cost, policy, t_to if np.ndim(t_to) else np.full(len(idx), t_to),
                            xn, th, left=True, d=d)
            acc[idx] += 0.5 * h * (f0 + f1)
        x[idx] = xn
        t_cur[idx] = t_to

    jt, js = chain.jump_times, chain.jump_states
    for k in range(m):
        b = grid[k + 1]
        while True:
            pending = np.flatnonzero(nxt < end)
            if pending.size == 0:
                break
            pending = pending[jt[nxt[pending]] < b]
            if pending.size == 0:
                break
            advance(pending, jt[nxt[pending]])
            if record:
                xj[nxt[pending]] = x[pending]
            state[pending] = js[nxt[pending]]
            nxt[pending] += 1
        advance(np.arange(n), b)
        t_cur[:] = b
        if record:
            xg[:, k + 1] = x
    return grid, xg, xj, acc, x.copy(), state.copy()


def _path_cost(cost: CostSpec, policy, t, x, th, left, d):
    """f(t, X_t, Lambda_t, nu_t) for paths, linear in the action measure."""
    t = np.asarray(t, float)
    xs = x[:, 0] if d == 1 else x
    n = len(th)
    out = np.empty(n)
    w = policy.weights_for(t, th, left=left)
    if cost.stepwise:
        # one evaluation per time segment, at a representative time in it
        seg = np.searchsorted(np.asarray(cost.breaks, float), t, side="left" if left else "right")
        segs, inv = np.unique(seg, return_inverse=True)
        uniq = t[np.unique(inv, return_index=True)[1]]
    else:
        uniq, inv = np.unique(t, return_inverse=True)
    for j, tv in enumerate(uniq):
        sel = inv == j
        if cost.uses_x:
            f = cost.running_left(tv, xs[sel]) if left else cost.running(tv, xs[sel])
            f = f[np.arange(sel.sum()), th[sel]]
        else:
            f = (cost.running_left(tv) if left else cost.running(tv))[th[sel]]
        out[sel] = np.einsum("na,na->n", f, w[sel])
    return out


def sample_coupled_batch(model: QPairModel, env: DiffusionEnv, policy: RelaxedMarkovPolicy,
                         s: float, x, theta: int, T: float, npaths: int, dt: Optional[float] = None,
                         seed: int = 0, record: bool = True, cost: Optional[CostSpec] = None,
                         diffusion_seed: Optional[int] = None) -> CoupledBatch:
    """Chain by uniformization, then X by Euler-Maruyama on grid + jump times.

    The chain does not see X, so it is sampled first from its own stream;
    ``diffusion_seed`` (default ``seed``) only changes the Gaussian draws.
    With ``cost`` the running cost is integrated along each path by the
    trapezoid rule on the same mesh.
    """
    if dt is None:
        dt = (T - s) / 512
    if dt <= 0:
        raise DomainError("dt must be positive")
    chain = sample_chains(model, policy, s, theta, T, npaths, seed)
    dseed = seed if diffusion_seed is None else diffusion_seed
    x0 = np.asarray(x, float).reshape(env.dim)

    def run(block, m):
        lo = block * BLOCK
        sub = _sub_batch(chain, lo, lo + m)
        return _euler_block(model, env, policy, sub, x0, dt, stream(dseed, block, DIFFUSION_STREAM),
                            record, cost)

    parts = _map_blocks(run, npaths)
    grid = parts[0][0]
    cat = (lambda i: np.concatenate([p[i] for p in parts]))
    return CoupledBatch(chain, grid,
                        cat(1) if record else None, cat(2) if record else None, x0,
                        cat(3) if cost is not None else None, cat(4), cat(5))


def _sub_batch(chain: ChainBatch, lo: int, hi: int) -> ChainBatch:
    off = chain.offsets
    a = off[lo] if lo < chain.npaths else len(chain.jump_times)
    b = off[hi] if hi < chain.npaths else len(chain.jump_times)
    return ChainBatch(chain.s, chain.T, chain.theta, chain.counts[lo:hi],
                      chain.jump_times[a:b], chain.jump_states[a:b], chain.seed)


def sample_coupled(model, env, policy, s, x, theta, T, dt=None, seed=0, diffusion_seed=None) -> CoupledPath:
    return sample_coupled_batch(model, env, policy, s, x, theta, T, 1, dt, seed,
                                diffusion_seed=diffusion_seed).path(0)


# ---------------------------------------------------------------------------
# empirical checks


@dataclass(frozen=True)
class MomentCheck:
    """Per-time empirical value, its standard error, the bound, and margin.

    A time passes when value - n_se * se <= bound.
    """

    times: np.ndarray
    empirical: np.ndarray
    se: np.ndarray
    bound: np.ndarray
    n_se: float = 4.0

    @property
    def margins(self) -> np.ndarray:
        return self.bound - (self.empirical - self.n_se * self.se)

    @property
    def passed(self) -> bool:
        return bool(np.all(self.margins >= 0))


def phi_moment_check(paths: ChainBatch, lyap: LyapunovSpec, times=None, n_se: float = 4.0) -> MomentCheck:
    """E Phi(Lambda_t) against (Phi(theta) + kappa0 T) exp(lambda (t - s))."""
    if times is None:
        times = np.linspace(paths.s, paths.T, 11)
    times = np.asarray(times, float)
    emp, se, bound = [], [], []
    horizon = paths.T - paths.s
    for t in times:
        v = lyap.phi[paths.states_at(t)]
        emp.append(v.mean())
        se.append(v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else 0.0)
        bound.append(lyap.moment_bound(paths.theta, t - paths.s, horizon))
    return MomentCheck(times, np.array(emp), np.array(se), np.array(bound), n_se)


def increment_constant(C2: float, T: float) -> float:
    """C with E|X_t2 - X_t1|^4 <= C (t2-t1) int_{t1}^{t2} (1 + E|X_r|^4) dr.

    From |a+b|^4 <= 8(|a|^4+|b|^4), Hoelder on the drift, the p=4 BDG
    constant 36 on the martingale and (1+|x|^2)^2 <= 2(1+|x|^4).
    """
    return 16.0 * C2 ** 2 * (T ** 2 + 36.0)


def increment_moment_check(paths: CoupledBatch, t1: float, t2: float, C2: float,
                           n_se: float = 4.0) -> MomentCheck:
    """Fourth moment of X_t2 - X_t1 against the growth-constant bound."""
    if not t1 < t2:
        raise DomainError("need t1 < t2")
    a, b = paths.x_at_grid(t1), paths.x_at_grid(t2)
    inc = (((b - a) ** 2).sum(-1)) ** 2
    sel = (paths.grid >= t1 - 1e-12) & (paths.grid <= t2 + 1e-12)
    r = paths.grid[sel]
    m4 = ((paths.x_grid[:, sel] ** 2).sum(-1) ** 2).mean(0)
    integral = np.trapezoid(1 + m4, r)
    C = increment_constant(C2, paths.chain.T - paths.chain.s)
    bound = C * (t2 - t1) * integral
    se = inc.std(ddof=1) / np.sqrt(len(inc)) if len(inc) > 1 else 0.0
    return MomentCheck(np.array([t2 - t1]), np.array([inc.mean()]), np.array([se]),
                       np.array([bound]), n_se)


def holding_probability_check(paths: ChainBatch, M: float, t: float, u: float,
                              n_se: float = 4.0) -> MomentCheck:
    """P(no jump in [t, t+u]) against exp(-M u); here the check is a lower bound,
    so the stored values are negated to reuse the upper-bound convention."""
    if not paths.s <= t < t + u <= paths.T:
        raise DomainError("[t, t+u] must lie inside the path horizon")
    pidx = paths.path_index
    inside = (paths.jump_times >= t) & (paths.jump_times <= t + u)
    jumped = np.zeros(paths.npaths, bool)
    jumped[pidx[inside]] = True
    stay = (~jumped).astype(float)
    p = stay.mean()
    se = stay.std(ddof=1) / np.sqrt(len(stay)) if len(stay) > 1 else 0.0
    return MomentCheck(np.array([u]), np.array([-p]), np.array([se]),
                       np.array([-np.exp(-M * u)]), n_se)
