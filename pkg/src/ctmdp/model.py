"""Domain types: action grids, measures on actions, q-pairs, policies, and
the hypothesis validators.

Everything here is immutable after construction. Arrays held by the types
are flagged read-only.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import ConfigurationError, DomainError

MEASURE_ATOL = 1e-12
MODULUS_ATOL = 1e-9

PIECEWISE_CONSTANT = "piecewise-constant"
MIXTURE_LINEAR = "mixture-linear"


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# action set and measures


@dataclass(frozen=True)
class ActionGrid:
    """Finite discretization of the compact action set U in R^k.

    ``points`` has shape (A, k). ``lower``/``upper`` describe the declared
    bounding box; when omitted the box is the hull of the points.
    """

    points: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ConfigurationError("action grid must be a non-empty list of points")
        lo = pts.min(axis=0) if self.lower is None else np.broadcast_to(
            np.asarray(self.lower, dtype=float), pts.shape[1:])
        hi = pts.max(axis=0) if self.upper is None else np.broadcast_to(
            np.asarray(self.upper, dtype=float), pts.shape[1:])
        if np.any(lo > hi):
            raise ConfigurationError("bounding box has lower > upper")
        if np.any(pts < lo) or np.any(pts > hi):
            raise ConfigurationError("action point outside the declared bounding box")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ConfigurationError("action points must be distinct")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "lower", _frozen(lo))
        object.__setattr__(self, "upper", _frozen(hi))

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def diameter(self) -> float:
        d = self.points[:, None, :] - self.points[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())

    def distances(self) -> np.ndarray:
        d = self.points[:, None, :] - self.points[None, :, :]
        return np.sqrt((d ** 2).sum(-1))


@dataclass(frozen=True)
class MeasureOnU:
    """Finitely supported probability measure on an :class:`ActionGrid`."""

    support: tuple
    weights: np.ndarray

    def __post_init__(self):
        support = tuple(int(i) for i in np.atleast_1d(self.support))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if len(support) == 0 or len(support) != len(w):
            raise ConfigurationError("support and weights must be non-empty and equal length")
        if len(set(support)) != len(support):
            raise ConfigurationError("support indices must be distinct")
        if min(support) < 0:
            raise ConfigurationError("support indices must be nonnegative")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConfigurationError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > MEASURE_ATOL:
            raise ConfigurationError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def dirac(cls, index: int) -> "MeasureOnU":
        return cls((index,), [1.0])

    @classmethod
    def uniform(cls, indices: Sequence[int]) -> "MeasureOnU":
        n = len(indices)
        return cls(tuple(indices), np.full(n, 1.0 / n))

    @classmethod
    def from_dense(cls, w, atol: float = 0.0) -> "MeasureOnU":
        w = np.asarray(w, dtype=float)
        idx = np.flatnonzero(w > atol)
        return cls(tuple(idx), w[idx])

    def dense(self, n_actions: int) -> np.ndarray:
        if max(self.support) >= n_actions:
            raise ConfigurationError(
                f"support index {max(self.support)} outside grid of size {n_actions}")
        out = np.zeros(n_actions)
        out[list(self.support)] = self.weights
        return out


def _as_dense(mu, grid: ActionGrid) -> np.ndarray:
    if isinstance(mu, MeasureOnU):
        return mu.dense(len(grid))
    w = np.asarray(mu, dtype=float)
    if w.shape != (len(grid),):
        raise ConfigurationError(f"dense measure of length {w.shape} on grid of size {len(grid)}")
    return w


def w1_dense(p: np.ndarray, q: np.ndarray, grid: ActionGrid) -> float:
    """W1 between two dense weight vectors on ``grid``."""
    if grid.dim == 1:
        x = grid.points[:, 0]
        order = np.argsort(x)
        cdf_gap = np.cumsum(p[order] - q[order])[:-1]
        return float(np.abs(cdf_gap) @ np.diff(x[order]))
    i = np.flatnonzero(p > 0)
    j = np.flatnonzero(q > 0)
    if len(i) == 1 or len(j) == 1:
        # one side is a Dirac: the only coupling is the product
        d = grid.distances()[np.ix_(i, j)]
        return float(p[i] @ d @ q[j])
    d = grid.distances()[np.ix_(i, j)]
    ni, nj = len(i), len(j)
    a_eq = np.zeros((ni + nj, ni * nj))
    for r in range(ni):
        a_eq[r, r * nj:(r + 1) * nj] = 1.0
    for c in range(nj):
        a_eq[ni + c, c::nj] = 1.0
    b_eq = np.concatenate([p[i], q[j]])
    res = linprog(d.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:  # pragma: no cover - highs is robust on these tiny LPs
        raise RuntimeError(f"transport LP failed: {res.message}")
    return max(float(res.fun), 0.0)


def w1_distance(mu, nu, grid: ActionGrid) -> float:
    """L1-Wasserstein distance between two measures on the same action grid.

    Uses the CDF formula when the actions are scalars and a small transport
    LP otherwise.
    """
    return w1_dense(_as_dense(mu, grid), _as_dense(nu, grid), grid)


def w1_pairwise(weights: np.ndarray, grid: ActionGrid, others: Optional[np.ndarray] = None) -> np.ndarray:
    """Matrix of W1 distances between rows of ``weights`` (and ``others``)."""
    a = np.asarray(weights, dtype=float)
    b = a if others is None else np.asarray(others, dtype=float)
    if grid.dim == 1:
        x = grid.points[:, 0]
        order = np.argsort(x)
        gaps = np.diff(x[order])
        ca = np.cumsum(a[:, order], axis=1)[:, :-1]
        cb = np.cumsum(b[:, order], axis=1)[:, :-1]
        return np.abs(ca[:, None, :] - cb[None, :, :]) @ gaps
    ua, inv_a = np.unique(a, axis=0, return_inverse=True)
    ub, inv_b = np.unique(b, axis=0, return_inverse=True)
    if len(grid) <= LIPSCHITZ_VERTEX_MAX:
        # dual: max of f.(p - q) over the vertices of the 1-Lipschitz polytope
        verts = lipschitz_vertices(grid)
        d = np.empty((len(ua), len(ub)))
        chunk = max(1, 2 ** 22 // max(1, len(ub) * len(verts)))
        for i in range(0, len(ua), chunk):
            diff = ua[i:i + chunk, None, :] - ub[None, :, :]
            d[i:i + chunk] = np.maximum((diff @ verts.T).max(-1), 0.0)
    else:
        d = np.array([[w1_dense(p, q, grid) for q in ub] for p in ua])
    return d[np.ix_(inv_a.ravel(), inv_b.ravel())]


LIPSCHITZ_VERTEX_MAX = 6
_VERTEX_CACHE: dict = {}


def _prufer_trees(n: int):
    """Edge lists of all labelled trees on n nodes."""
    if n == 1:
        yield []
        return
    if n == 2:
        yield [(0, 1)]
        return
    for seq in itertools.product(range(n), repeat=n - 2):
        degree = [1] * n
        for x in seq:
            degree[x] += 1
        edges = []
        for x in seq:
            leaf = next(i for i in range(n) if degree[i] == 1)
            edges.append((leaf, x))
            degree[leaf] -= 1
            degree[x] -= 1
        u, v = (i for i in range(n) if degree[i] == 1)
        edges.append((u, v))
        yield edges


def lipschitz_vertices(grid: ActionGrid) -> np.ndarray:
    """Vertices of {f : f(0) = 0, |f_i - f_j| <= d_ij} for the grid metric.

    Every vertex makes the constraints tight along a spanning tree, so the
    candidates are f = signed sums of edge lengths along tree paths from
    node 0; the feasible ones are kept.
    """
    key = grid.points.tobytes() + bytes(str(grid.points.shape), "ascii")
    if key in _VERTEX_CACHE:
        return _VERTEX_CACHE[key]
    d = grid.distances()
    n = len(d)
    if n == 1:
        out = np.zeros((1, 1))
        _VERTEX_CACHE[key] = out
        return out
    signs = np.array(list(itertools.product((1.0, -1.0), repeat=n - 1)))
    found = []
    scale = max(d.max(), 1.0)
    for edges in _prufer_trees(n):
        adj = {i: [] for i in range(n)}
        for e, (u, v) in enumerate(edges):
            adj[u].append((v, e))
            adj[v].append((u, e))
        # path incidence from the root: P[e, j] = +-1 if edge e lies on the path 0 -> j
        P = np.zeros((n - 1, n))
        stack = [(0, np.zeros(n - 1))]
        seen = {0}
        while stack:
            node, path = stack.pop()
            P[:, node] = path
            for nxt, e in adj[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    step = path.copy()
                    step[e] = d[node, nxt]
                    stack.append((nxt, step))
        F = signs @ P
        gap = np.abs(F[:, :, None] - F[:, None, :]) - d[None]
        ok = np.all(gap <= 1e-12 * scale, axis=(1, 2))
        found.append(F[ok])
    allv = np.vstack(found)
    _, first = np.unique(np.round(allv / scale, 9), axis=0, return_index=True)
    verts = allv[np.sort(first)]
    verts.setflags(write=False)
    _VERTEX_CACHE[key] = verts
    return verts


# ---------------------------------------------------------------------------
# q-pair


@dataclass(frozen=True)
class QPairModel:
    """Action-parameterized conservative jump rates on a finite state list.

    ``rates[i, j, a]`` is q(state_i, {state_j}; u_a). The total rate is the
    row sum, so the pair is conservative by construction. ``M`` is the
    declared dominating rate; it defaults to the largest total rate.
    """

    states: tuple
    grid: ActionGrid
    rates: np.ndarray
    M: Optional[float] = None

    def __post_init__(self):
        states = tuple(self.states)
        if len(set(states)) != len(states) or not states:
            raise ConfigurationError("states must be a non-empty list of distinct labels")
        r = np.array(self.rates, dtype=float)
        n, a = len(states), len(self.grid)
        if r.shape != (n, n, a):
            raise ConfigurationError(f"rates must have shape {(n, n, a)}, got {r.shape}")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ConfigurationError("rates must be finite and nonnegative")
        if np.any(r[np.arange(n), np.arange(n), :] != 0):
            raise ConfigurationError("q(theta, {theta}; u) must be zero")
        total = r.sum(axis=1)
        m = float(total.max()) if self.M is None else float(self.M)
        if m < 0:
            raise ConfigurationError("dominating rate M must be nonnegative")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "rates", _frozen(r))
        object.__setattr__(self, "M", m)
        object.__setattr__(self, "_total", _frozen(total))

    @classmethod
    def from_function(cls, states, grid: ActionGrid, rate: Callable, M=None) -> "QPairModel":
        """Tabulate ``rate(i, j, u)`` (state indices, action point) on the grid."""
        n = len(states)
        r = np.zeros((n, n, len(grid)))
        for i in range(n):
            for j in range(n):
                if i != j:
                    for a, u in enumerate(grid.points):
                        r[i, j, a] = rate(i, j, u if len(u) > 1 else u[0])
        return cls(tuple(states), grid, r, M)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.grid)

    @property
    def total(self) -> np.ndarray:
        """Total jump rate q(theta; u), shape (S, A)."""
        return self._total

    def index(self, label) -> int:
        if isinstance(label, (int, np.integer)) and label not in self.states:
            if 0 <= label < self.n_states:
                return int(label)
        try:
            return self.states.index(label)
        except ValueError:
            raise ConfigurationError(f"unknown state {label!r}") from None

    def rate(self, theta: int, gamma: int, a: int) -> float:
        return float(self.rates[theta, gamma, a])

    def total_rate(self, theta: int, a: int) -> float:
        return float(self._total[theta, a])

    def generator(self, a: int) -> np.ndarray:
        """Rate matrix under the constant action ``a`` in every state."""
        q = np.array(self.rates[:, :, a])
        q[np.diag_indices_from(q)] = -q.sum(axis=1)
        return q

    def max_total_rate(self) -> float:
        return float(self._total.max())


def mixed_rate(model: QPairModel, theta: int, mu) -> np.ndarray:
    """Jump-rate vector out of ``theta`` when the action is drawn from ``mu``.

    Component gamma is sum_i w_i q(theta, gamma; u_i). The mixed total rate is
    the sum of the vector.
    """
    w = _as_dense(mu, model.grid)
    return model.rates[theta] @ w


def mixed_generator(model: QPairModel, weights: np.ndarray) -> np.ndarray:
    """Generator for per-state action weights ``weights`` (S, A) or (n, S, A)."""
    q = np.einsum("iga,...ia->...ig", model.rates, weights)
    idx = np.arange(model.n_states)
    q[..., idx, idx] = -q.sum(axis=-1)
    return q


# ---------------------------------------------------------------------------
# Lyapunov function and psi modulus


@dataclass(frozen=True)
class LyapunovSpec:
    """Drift-condition data: Q_u phi <= lam * phi + kappa0 * 1_{B0}.

    ``core`` is an optional set of state indices used for the truncation
    diagnostic (rate of phi-mass leaving the core).
    """

    phi: np.ndarray
    lam: float
    kappa0: float = 0.0
    B0: frozenset = frozenset()
    core: Optional[frozenset] = None

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        if np.any(phi < 1):
            raise ConfigurationError("phi must be >= 1 on every state")
        if not self.lam > 0:
            raise ConfigurationError("lambda must be positive")
        if self.kappa0 < 0:
            raise ConfigurationError("kappa0 must be nonnegative")
        b0 = frozenset(int(i) for i in self.B0)
        if b0 and (min(b0) < 0 or max(b0) >= len(phi)):
            raise ConfigurationError("B0 must be a subset of the states")
        object.__setattr__(self, "phi", _frozen(phi))
        object.__setattr__(self, "B0", b0)
        if self.core is not None:
            object.__setattr__(self, "core", frozenset(int(i) for i in self.core))

    def indicator_b0(self) -> np.ndarray:
        out = np.zeros(len(self.phi))
        out[list(self.B0)] = 1.0
        return out

    def moment_bound(self, theta: int, t: float, horizon: float) -> float:
        """Gronwall bound (phi(theta) + kappa0*T) * exp(lam*t)."""
        return float((self.phi[theta] + self.kappa0 * horizon) * np.exp(self.lam * t))


@dataclass(frozen=True)
class PsiModulus:
    """Nondecreasing modulus with psi(0+) = 0.

    Forms: ``linear`` (L*r), ``power`` (c*r**beta) and ``tabulated``
    (piecewise-linear through (r_i, v_i), constant beyond the last point).
    """

    form: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        p = dict(self.params)
        if self.form == "linear":
            if not p.get("L", -1) > 0:
                raise ConfigurationError("linear psi needs L > 0")
        elif self.form == "power":
            if not (p.get("c", -1) > 0 and p.get("beta", -1) > 0):
                raise ConfigurationError("power psi needs c > 0 and beta > 0")
        elif self.form == "tabulated":
            r = np.asarray(p.get("r", []), dtype=float)
            v = np.asarray(p.get("values", []), dtype=float)
            if len(r) < 2 or r.shape != v.shape:
                raise ConfigurationError("tabulated psi needs matching r and values")
            if r[0] != 0 or v[0] != 0:
                raise ConfigurationError("tabulated psi must start at (0, 0)")
            if np.any(np.diff(r) <= 0) or np.any(np.diff(v) < 0):
                raise ConfigurationError("tabulated psi must be nondecreasing on increasing r")
            p["r"], p["values"] = tuple(r), tuple(v)
        else:
            raise ConfigurationError(f"unknown psi form {self.form!r}")
        object.__setattr__(self, "params", p)

    @classmethod
    def linear(cls, L: float) -> "PsiModulus":
        return cls("linear", {"L": float(L)})

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        p = self.params
        if self.form == "linear":
            out = p["L"] * r
        elif self.form == "power":
            out = p["c"] * np.power(np.maximum(r, 0.0), p["beta"])
        else:
            out = np.interp(r, p["r"], p["values"])
        return out if out.ndim else float(out)

    def max_slope(self, horizon: float, n: int = 4096) -> float:
        """inf over r in (0, horizon] of psi(r)/r.

        A W1-Lipschitz curve with at most this slope satisfies the modulus.
        """
        p = self.params
        if self.form == "linear":
            return p["L"]
        if self.form == "power":
            beta = p["beta"]
            if beta > 1:
                return 0.0
            return p["c"] * horizon ** (beta - 1)
        r = np.concatenate([np.geomspace(horizon * 1e-9, horizon, n),
                            [x for x in p["r"] if 0 < x <= horizon]])
        return float(np.min(self(r) / r))

    def to_dict(self) -> dict:
        p = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.params.items()}
        return {"form": self.form, **p}


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class RandomizedStationaryPolicy:
    """A measure on actions for every state, constant in time."""

    measures: tuple

    def __post_init__(self):
        object.__setattr__(self, "measures", tuple(self.measures))

    @classmethod
    def deterministic(cls, actions: Sequence[int]) -> "RandomizedStationaryPolicy":
        return cls(tuple(MeasureOnU.dirac(a) for a in actions))

    def dense(self, n_actions: int) -> np.ndarray:
        return np.stack([m.dense(n_actions) for m in self.measures])


@dataclass(frozen=True)
class RelaxedMarkovPolicy:
    """Per-state measure-valued curves t -> nu_t(., theta) on [0, T].

    ``weights[k, i, a]`` is the weight of action a in state i at knot k.
    Between knots the curve is either held (right-continuous step) or the
    linear mixture of the neighbouring knot measures.
    """

    knots: np.ndarray
    weights: np.ndarray
    interpolation: str = PIECEWISE_CONSTANT
    psi: Optional[PsiModulus] = None

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if knots.ndim != 1 or len(knots) < 2:
            raise ConfigurationError("need at least two knots")
        if knots[0] != 0.0:
            raise ConfigurationError("knots must start at 0")
        if np.any(np.diff(knots) <= 0):
            raise ConfigurationError("knots must be strictly increasing")
        if w.ndim != 3 or w.shape[0] != len(knots):
            raise ConfigurationError("weights must have shape (knots, states, actions)")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=2) - 1.0) > MEASURE_ATOL):
            raise ConfigurationError("each knot/state weight vector must be a probability vector")
        if self.interpolation not in (PIECEWISE_CONSTANT, MIXTURE_LINEAR):
            raise ConfigurationError(f"unknown interpolation {self.interpolation!r}")
        object.__setattr__(self, "knots", _frozen(knots))
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def from_measures(cls, knots, curves: Sequence[Sequence[MeasureOnU]], n_actions: int,
                      interpolation: str = PIECEWISE_CONSTANT, psi=None) -> "RelaxedMarkovPolicy":
        """Build from one list of measures per state (one measure per knot)."""
        if any(len(c) != len(knots) for c in curves):
            raise ConfigurationError("every curve needs one measure per knot")
        w = np.stack([[m.dense(n_actions) for m in c] for c in curves], axis=1)
        return cls(knots, w, interpolation, psi)

    @property
    def horizon(self) -> float:
        return float(self.knots[-1])

    @property
    def n_states(self) -> int:
        return self.weights.shape[1]

    @property
    def n_actions(self) -> int:
        return self.weights.shape[2]

    @property
    def is_stationary(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def _check_time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.horizon * (1 + 1e-12)):
            raise DomainError(f"time outside [0, {self.horizon}]")
        return t

    def _locate(self, t, left: bool):
        k = np.searchsorted(self.knots, t, side="left" if left else "right") - 1
        return np.clip(k, 0, len(self.knots) - 2)

    def weights_at(self, t, left: bool = False) -> np.ndarray:
        """Weights (..., S, A) at time(s) ``t``; ``left`` gives the left limit."""
        t = self._check_time(t)
        k = self._locate(t, left)
        if self.interpolation == PIECEWISE_CONSTANT:
            k_hold = np.where(t >= self.knots[-1], len(self.knots) - 1, k) if not left else k
            return self.weights[k_hold]
        t0, t1 = self.knots[k], self.knots[k + 1]
        lam = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)[..., None, None]
        return (1 - lam) * self.weights[k] + lam * self.weights[k + 1]

    def weights_for(self, t, states, left: bool = False) -> np.ndarray:
        """Weights (n, A) for per-path times and states."""
        t = self._check_time(t)
        states = np.asarray(states)
        k = self._locate(t, left)
        if self.interpolation == PIECEWISE_CONSTANT:
            if not left:
                k = np.where(t >= self.knots[-1], len(self.knots) - 1, k)
            return self.weights[k, states]
        t0, t1 = self.knots[k], self.knots[k + 1]
        lam = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)[..., None]
        return (1 - lam) * self.weights[k, states] + lam * self.weights[k + 1, states]

    def measure(self, t: float, theta: int) -> MeasureOnU:
        w = self.weights_at(t)[theta]
        return MeasureOnU.from_dense(w / w.sum())

    def breakpoints(self) -> np.ndarray:
        return np.array(self.knots)

    def with_psi(self, psi: PsiModulus) -> "RelaxedMarkovPolicy":
        return RelaxedMarkovPolicy(self.knots, self.weights, self.interpolation, psi)


def lift_stationary(pi: RandomizedStationaryPolicy, T: float, n_actions: int,
                    psi: Optional[PsiModulus] = None) -> RelaxedMarkovPolicy:
    """Constant-in-time curves nu_t(., theta) = pi(. | theta) on [0, T]."""
    w = pi.dense(n_actions)
    return RelaxedMarkovPolicy([0.0, float(T)], np.stack([w, w]), PIECEWISE_CONSTANT, psi)


# ---------------------------------------------------------------------------
# environment and costs


@dataclass(frozen=True)
class DiffusionEnv:
    """Per-regime coefficients of dX = b(X, theta) dt + sigma(X, theta) dB.

    ``drift(x, theta)`` takes x of shape (n, d) and integer regimes (n,) and
    returns (n, d); ``diffusion`` returns (n, d, d). ``C1``/``C2`` are the
    declared Lipschitz and growth constants.
    """

    dim: int
    drift: Callable
    diffusion: Callable
    C1: float
    C2: float

    @classmethod
    def affine(cls, b0, b1, s0, s1, C1=None, C2=None) -> "DiffusionEnv":
        """Scalar env with b = b0[theta] + b1[theta] x, sigma = s0[theta] + s1[theta] x."""
        b0, b1, s0, s1 = (np.asarray(v, dtype=float) for v in (b0, b1, s0, s1))

        def drift(x, th):
            return b0[th][:, None] + b1[th][:, None] * x

        def diffusion(x, th):
            return (s0[th][:, None] + s1[th][:, None] * x)[:, :, None]

        if C1 is None:
            C1 = float(np.max(b1 ** 2 + s1 ** 2))
        if C2 is None:
            C2 = float(2 * max(np.max(b0 ** 2 + s0 ** 2), np.max(b1 ** 2 + s1 ** 2)))
        env = cls(1, drift, diffusion, float(C1), float(C2))
        object.__setattr__(env, "coefficients", {"b0": b0, "b1": b1, "s0": s0, "s1": s1})
        return env

    def b(self, x, theta) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        th = np.broadcast_to(np.asarray(theta, dtype=int), (x.shape[0],))
        return np.asarray(self.drift(x, th), dtype=float).reshape(x.shape[0], self.dim)

    def sigma(self, x, theta) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        th = np.broadcast_to(np.asarray(theta, dtype=int), (x.shape[0],))
        return np.asarray(self.diffusion(x, th), dtype=float).reshape(x.shape[0], self.dim, self.dim)


@dataclass(frozen=True)
class CostSpec:
    """Running cost f and terminal cost g, vectorized.

    Chain-only costs: ``running(t)`` -> (S, A), ``terminal()`` -> (S,).
    Environment costs (``uses_x``): ``running(t, x)`` -> (n, S, A) for x of
    shape (n,) or (n, d), and ``terminal(x)`` -> (n, S).
    ``breaks`` lists times where f may jump in t (right-continuous there).
    ``stepwise`` declares that f depends on t only through the segment
    between breaks, which lets path integrals batch their evaluations.
    """

    running: Callable
    terminal: Callable
    lower_bound: float
    uses_x: bool = False
    breaks: tuple = ()
    stepwise: bool = False

    @classmethod
    def from_tables(cls, running, terminal, lower_bound=None, breaks=(), tables=None) -> "CostSpec":
        """Chain-only cost from an (S, A) table and an (S,) terminal vector.

        With ``breaks`` = (b_1, ...) and ``tables`` = [F_0, F_1, ...] the running
        cost is F_j on [b_j, b_{j+1}).
        """
        g = _frozen(terminal)
        if tables is None:
            f = _frozen(running)
            tables = [f]
            breaks = ()
        else:
            tables = [_frozen(t) for t in tables]
            if len(tables) != len(breaks) + 1:
                raise ConfigurationError("need one running table per time segment")
        edges = np.asarray(breaks, dtype=float)

        def run(t, x=None):
            return tables[int(np.searchsorted(edges, t, side="right"))]

        def term(x=None):
            return g

        lb = lower_bound
        if lb is None:
            lb = float(min(min(t.min() for t in tables), g.min()))
        return cls(run, term, float(lb), False, tuple(float(b) for b in breaks), True)

    def running_left(self, t, x=None):
        """Left limit of the running cost at t."""
        tl = np.nextafter(t, -np.inf)
        return self.running(tl) if x is None else self.running(tl, x)

    def check_lower_bound(self, times, states_n: int, x_samples=None) -> tuple:
        """Smallest sampled value of f and g, compared to ``lower_bound``."""
        if self.uses_x:
            xs = np.asarray(x_samples if x_samples is not None else np.linspace(-10, 10, 41))
            fmin = min(float(np.min(self.running(t, xs))) for t in times)
            gmin = float(np.min(self.terminal(xs)))
        else:
            fmin = min(float(np.min(self.running(t))) for t in times)
            gmin = float(np.min(self.terminal()))
        return min(fmin, gmin) >= self.lower_bound, fmin, gmin


# ---------------------------------------------------------------------------
# hypotheses


@dataclass(frozen=True)
class HypothesisReport:
    """Outcome of :func:`validate_hypotheses`. Pure data."""

    h1: bool
    h2: bool
    h3: str
    h4: bool
    h5: Optional[bool]
    h6: Optional[bool]
    M_declared: float
    M_measured: float
    h2_violations: tuple
    h4_max_violation: float
    h4_location: Optional[tuple]
    h4_lambda_min: float
    truncation_outflow: float
    C1_estimate: Optional[float] = None
    C2_estimate: Optional[float] = None
    cost_bounded_below: Optional[bool] = None

    @property
    def passed(self) -> bool:
        flags = [self.h1, self.h2, self.h4, self.h5, self.h6, self.cost_bounded_below]
        return all(f for f in flags if f is not None)

    def table(self) -> str:
        def mark(v):
            return "n/a" if v is None else ("pass" if v else "FAIL")

        rows = [
            ("H1", mark(self.h1), "action grid compact, inside bounding box"),
            ("H2", mark(self.h2), f"M declared={self.M_declared:.6g} measured={self.M_measured:.6g}"
             + (f" violations={list(self.h2_violations)[:5]}" if self.h2_violations else "")),
            ("H3", "vacuous", self.h3),
            ("H4", mark(self.h4), f"max violation={self.h4_max_violation:.6g} at {self.h4_location}; "
             f"minimal lambda={self.h4_lambda_min:.6g}; core outflow={self.truncation_outflow:.6g}"),
            ("H5", mark(self.h5), "" if self.C1_estimate is None else f"C1 estimate={self.C1_estimate:.6g}"),
            ("H6", mark(self.h6), "" if self.C2_estimate is None else f"C2 estimate={self.C2_estimate:.6g}"),
            ("f,g>=lb", mark(self.cost_bounded_below), ""),
        ]
        return "\n".join(f"{name:8s} {flag:8s} {detail}" for name, flag, detail in rows)


def h2_holds(model: QPairModel) -> bool:
    return bool(model.max_total_rate() <= model.M)


def lyapunov_drift(model: QPairModel, phi: np.ndarray) -> np.ndarray:
    """Q_u phi(theta) for every (theta, a), shape (S, A)."""
    phi = np.asarray(phi, dtype=float)
    return np.einsum("iga,g->ia", model.rates, phi) - model.total * phi[:, None]


def validate_hypotheses(model: QPairModel, lyap: Optional[LyapunovSpec] = None,
                        env: Optional[DiffusionEnv] = None, cost: Optional[CostSpec] = None,
                        n_samples: int = 41, x_range: float = 10.0, horizon: float = 1.0,
                        seed: int = 0) -> HypothesisReport:
    """Check H1, H2, H4 on the grid and H5, H6 on sampled x points.

    H3 and lower semicontinuity hold trivially on a finite discretization.
    The sampled checks are necessary conditions, not proofs.
    """
    grid = model.grid
    h1 = bool(np.all(grid.points >= grid.lower) and np.all(grid.points <= grid.upper))

    total = model.total
    bad = np.argwhere(total > model.M)
    h2 = len(bad) == 0
    violations = tuple((model.states[i], int(a)) for i, a in bad)

    if lyap is None:
        lyap = LyapunovSpec(np.ones(model.n_states), 1.0)
    if len(lyap.phi) != model.n_states:
        raise ConfigurationError("phi must have one value per state")
    drift = lyapunov_drift(model, lyap.phi)
    ind = lyap.indicator_b0()
    rhs = lyap.lam * lyap.phi[:, None] + lyap.kappa0 * ind[:, None]
    slack = drift - rhs
    i, a = np.unravel_index(np.argmax(slack), slack.shape)
    h4_max = float(slack[i, a])
    lam_min = float(np.max((drift - lyap.kappa0 * ind[:, None]) / lyap.phi[:, None]))
    outflow = 0.0
    if lyap.core is not None:
        outside = np.array([k not in lyap.core for k in range(model.n_states)])
        inside = ~outside
        if outside.any() and inside.any():
            mass = np.einsum("iga,g->ia", model.rates[:, outside, :], lyap.phi[outside])
            outflow = float(mass[inside].max())

    h5 = h6 = None
    c1 = c2 = None
    if env is not None:
        rng = np.random.default_rng(seed)
        if env.dim == 1:
            xs = np.linspace(-x_range, x_range, n_samples)[:, None]
        else:
            xs = rng.uniform(-x_range, x_range, size=(n_samples, env.dim))
        c1 = c2 = 0.0
        for th in range(model.n_states):
            b = env.b(xs, th)
            s = env.sigma(xs, th)
            growth = ((b ** 2).sum(1) + (s ** 2).sum((1, 2))) / (1 + (xs ** 2).sum(1))
            c2 = max(c2, float(growth.max()))
            db = b[:, None, :] - b[None, :, :]
            ds = s[:, None] - s[None, :]
            dx2 = ((xs[:, None, :] - xs[None, :, :]) ** 2).sum(-1)
            off = dx2 > 0
            lip = ((db ** 2).sum(-1) + (ds ** 2).sum((-1, -2)))[off] / dx2[off]
            c1 = max(c1, float(lip.max()) if lip.size else 0.0)
        tol = 1e-9
        h5 = c1 <= env.C1 * (1 + tol) + tol
        h6 = c2 <= env.C2 * (1 + tol) + tol

    bounded = None
    if cost is not None:
        times = np.linspace(0.0, horizon, 17)
        bounded = bool(cost.check_lower_bound(times, model.n_states)[0])

    return HypothesisReport(
        h1=h1, h2=h2, h3="vacuous on finite discretization", h4=h4_max <= 1e-12,
        h5=h5, h6=h6, M_declared=model.M, M_measured=model.max_total_rate(),
        h2_violations=violations, h4_max_violation=h4_max,
        h4_location=(model.states[i], int(a)), h4_lambda_min=lam_min,
        truncation_outflow=outflow, C1_estimate=c1, C2_estimate=c2,
        cost_bounded_below=bounded,
    )


# ---------------------------------------------------------------------------
# moduli of continuity


@dataclass(frozen=True)
class ModulusReport:
    """Grid evaluation of w_nu([t_i, t_j)) and w''_nu(delta) for each state."""

    grid: np.ndarray
    w: np.ndarray          # (S, G, G); entry [i, j] for t_i < t_j, else 0
    w2_delta: np.ndarray   # (D,)
    w2: np.ndarray         # (S, D)
    w_pass: bool
    w2_pass: bool
    w_worst: Optional[tuple]
    w2_worst: Optional[tuple]
    criterion: str = "w"

    @property
    def passed(self) -> bool:
        return self.w_pass if self.criterion == "w" else self.w2_pass

    def max_w(self) -> float:
        return float(self.w.max()) if self.w.size else 0.0


def default_eval_grid(policy: RelaxedMarkovPolicy, n: int = 129) -> np.ndarray:
    return np.unique(np.concatenate([np.linspace(0.0, policy.horizon, n), policy.knots]))


def modulus_report(policy: RelaxedMarkovPolicy, eval_grid=None, psi: Optional[PsiModulus] = None,
                   grid: Optional[ActionGrid] = None, criterion: str = "w",
                   atol: float = MODULUS_ATOL) -> ModulusReport:
    """Moduli of the per-state curves on a time grid, checked against psi.

    ``w[θ, i, j]`` is the sup of W1 over the curve values on [t_i, t_j),
    including the left limit at t_j. ``w2`` follows the three-point
    definition over grid triples. ``grid`` is the action grid (the W1 ground
    space); it defaults to scalar actions 0..A-1 only when absent.
    """
    psi = psi or policy.psi
    if psi is None:
        raise ConfigurationError("no psi modulus given")
    if criterion not in ("w", "w2"):
        raise ConfigurationError("criterion must be 'w' or 'w2'")
    if grid is None:
        raise ConfigurationError("modulus_report needs the action grid")
    tg = default_eval_grid(policy) if eval_grid is None else np.unique(np.asarray(eval_grid, float))
    if tg[0] < 0 or tg[-1] > policy.horizon * (1 + 1e-12):
        raise DomainError("evaluation grid must lie in [0, T]")
    G, S = len(tg), policy.n_states
    w_all = np.zeros((S, G, G))
    v_pairs = np.zeros((S, G, G))
    right = policy.weights_at(tg)
    left = policy.weights_at(tg, left=True)
    if not policy.is_stationary:
        for th in range(S):
            d_pp = w1_pairwise(right[:, th], grid)
            d_lp = w1_pairwise(left[:, th], grid, right[:, th])
            for i in range(G - 1):
                block = np.triu(d_pp[i:, i:])
                colmax = np.maximum.accumulate(block.max(axis=0))   # over points i..j-1 at col j-1
                inner = np.concatenate([[0.0], colmax[:-1]])        # points in [t_i, t_j)
                ll = np.tril(d_lp[i:, i:], -1).max(axis=1)           # left limit at t_j vs points
                w_all[th, i, i:] = np.maximum(inner, ll)
                w_all[th, i, i] = 0.0
                # three-point: max over m in [i, j] of min(d(m, i), d(m, j))
                mins = np.minimum(d_pp[i:, i][:, None], d_pp[i:, i:])
                v_pairs[th, i, i:] = _three_point(mins)

    ii, jj = np.triu_indices(G, 1)
    lengths = tg[jj] - tg[ii]
    bound = psi(lengths)
    excess = w_all[:, ii, jj] - bound[None, :]
    w_pass = bool(np.all(excess <= atol))
    w_worst = None
    if excess.size:
        s_, p_ = np.unravel_index(np.argmax(excess), excess.shape)
        w_worst = (int(s_), float(tg[ii[p_]]), float(tg[jj[p_]]), float(excess[s_, p_]))

    deltas = np.unique(tg[1:] - tg[0])
    order = np.argsort(lengths, kind="stable")
    sorted_len = lengths[order]
    w2 = np.zeros((S, len(deltas)))
    for th in range(S):
        cm = np.maximum.accumulate(v_pairs[th, ii, jj][order]) if len(order) else np.zeros(0)
        pos = np.searchsorted(sorted_len, deltas * (1 + 1e-12), side="right") - 1
        w2[th] = np.where(pos >= 0, cm[np.maximum(pos, 0)] if len(cm) else 0.0, 0.0)
    excess2 = w2 - psi(deltas)[None, :]
    w2_pass = bool(np.all(excess2 <= atol))
    w2_worst = None
    if excess2.size:
        s_, d_ = np.unravel_index(np.argmax(excess2), excess2.shape)
        w2_worst = (int(s_), float(deltas[d_]), float(excess2[s_, d_]))
    return ModulusReport(tg, w_all, deltas, w2, w_pass, w2_pass, w_worst, w2_worst, criterion)


def _three_point(mins: np.ndarray) -> np.ndarray:
    # mins[m, j] = min(d(t_m, t_i), d(t_m, t_j)) for m, j >= i; keep m <= j
    return np.triu(mins).max(axis=0)
