"""JSON scenario and policy documents, and deterministic CSV output."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .model import (PIECEWISE_CONSTANT, ActionGrid, CostSpec, DiffusionEnv, LyapunovSpec,
                    MeasureOnU, PsiModulus, QPairModel, RandomizedStationaryPolicy,
                    RelaxedMarkovPolicy, lift_stationary)

SCENARIO_VERSION = 1

_SCENARIO_KEYS = {"version", "name", "description", "horizon", "states", "actions", "rates", "M",
                  "lyapunov", "psi", "admissibility", "environment", "cost", "initial", "numerics",
                  "policy"}
_NUMERIC_KEYS = {"dt", "n_steps", "dx", "n_x", "x_range", "tol", "npaths", "seed", "modulus_points"}


@dataclass(frozen=True)
class Numerics:
    n_steps: Optional[int] = None
    dt: Optional[float] = None
    dx: Optional[float] = None
    n_x: Optional[int] = None
    x_range: Optional[tuple] = None
    tol: float = 1e-8
    npaths: int = 1000
    seed: int = 0
    modulus_points: int = 129

    def steps_for(self, length: float) -> Optional[int]:
        if self.dt is not None:
            return max(1, int(round(length / self.dt)))
        return self.n_steps


@dataclass(frozen=True)
class Scenario:
    name: str
    T: float
    model: QPairModel
    lyapunov: LyapunovSpec
    psi: Optional[PsiModulus]
    admissibility: str
    env: Optional[DiffusionEnv]
    cost: CostSpec
    s: float
    theta: int
    x0: Optional[float]
    numerics: Numerics
    policy: Optional[RelaxedMarkovPolicy] = None
    description: str = ""


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{where} must be an object")
    extra = set(obj) - set(allowed)
    if extra:
        raise ConfigurationError(f"unknown field(s) in {where}: {sorted(extra)}")


def _require(obj, key, where):
    if key not in obj:
        raise ConfigurationError(f"missing field {where}.{key}")
    return obj[key]


def _state_indices(labels, states, where):
    out = []
    for lab in labels:
        if lab not in states:
            raise ConfigurationError(f"{where}: unknown state {lab!r}")
        out.append(states.index(lab))
    return out


# ---------------------------------------------------------------------------
# rates


def birth_death_rates(n_states: int, n_actions: int, params: dict) -> np.ndarray:
    """Birth n -> n+1 at birth_const[a] + birth_per_capita[a] * n, death
    n -> n-1 at death_const + death_per_capita * n; no birth from the top."""
    _check_keys(params, {"birth_const", "birth_per_capita", "death_const", "death_per_capita"},
                "rates.params")
    bc = np.broadcast_to(np.asarray(params.get("birth_const", 0.0), float), (n_actions,))
    bp = np.broadcast_to(np.asarray(params.get("birth_per_capita", 0.0), float), (n_actions,))
    dc = float(params.get("death_const", 0.0))
    dp = float(params.get("death_per_capita", 0.0))
    r = np.zeros((n_states, n_states, n_actions))
    for n in range(n_states):
        if n + 1 < n_states:
            r[n, n + 1] = bc + bp * n
        if n > 0:
            r[n, n - 1] = dc + dp * n
    return r


def admission_control_rates(n_states: int, grid: ActionGrid, params: dict) -> np.ndarray:
    """Queue with capacity n_states-1: arrivals admitted with probability u
    (the scalar action), service at a constant rate."""
    _check_keys(params, {"arrival", "service"}, "rates.params")
    lam = float(_require(params, "arrival", "rates.params"))
    mu = float(_require(params, "service", "rates.params"))
    if grid.dim != 1 or np.any(grid.points < 0) or np.any(grid.points > 1):
        raise ConfigurationError("admission_control needs scalar actions in [0, 1]")
    u = grid.points[:, 0]
    r = np.zeros((n_states, n_states, len(grid)))
    for n in range(n_states):
        if n + 1 < n_states:
            r[n, n + 1] = lam * u
        if n > 0:
            r[n, n - 1] = mu
    return r


def _rates(spec, states, grid):
    S, A = len(states), len(grid)
    if not isinstance(spec, dict):
        raise ConfigurationError("rates must be an object")
    if "table" in spec:
        _check_keys(spec, {"table"}, "rates")
        r = np.asarray(spec["table"], float)
        if r.shape != (S, S, A):
            raise ConfigurationError(f"rates.table must have shape {(S, S, A)}, got {r.shape}")
        return r
    _check_keys(spec, {"family", "params"}, "rates")
    fam = _require(spec, "family", "rates")
    params = spec.get("params", {})
    if fam == "birth_death":
        return birth_death_rates(S, A, params)
    if fam == "admission_control":
        return admission_control_rates(S, grid, params)
    raise ConfigurationError(f"unknown rate family {fam!r}")


# ---------------------------------------------------------------------------
# costs


def _table(values, shape, where):
    a = np.asarray(values, float)
    try:
        return np.broadcast_to(a, shape).copy()
    except ValueError:
        raise ConfigurationError(f"{where} has shape {a.shape}, expected {shape}") from None


def _poly(coef, x):
    """sum_j coef[..., j] x^j for x (n,), returning (n, ...)."""
    coef = np.asarray(coef, float)
    powers = np.asarray(x, float)[:, None] ** np.arange(coef.shape[-1])
    return np.einsum("nj,...j->n...", powers, coef)


def _cost(spec, S, A, T, uses_env):
    _check_keys(spec, {"running", "terminal", "lower_bound"}, "cost")
    run = _require(spec, "running", "cost")
    term = _require(spec, "terminal", "cost")
    _check_keys(run, {"form", "values", "value", "breaks", "tables", "coefficients"}, "cost.running")
    _check_keys(term, {"form", "values", "value", "coefficients"}, "cost.terminal")
    rform, tform = run.get("form", "table"), term.get("form", "table")
    poly = rform == "poly_x" or tform == "poly_x"
    if poly and not uses_env:
        raise ConfigurationError("poly_x costs need an environment")
    lb = spec.get("lower_bound")

    if not poly:
        if rform == "table":
            F = _table(_require(run, "values", "cost.running"), (S, A), "cost.running.values")
            tables, breaks = [F], ()
        elif rform == "constant":
            tables, breaks = [np.full((S, A), float(_require(run, "value", "cost.running")))], ()
        elif rform == "piecewise_time":
            breaks = tuple(float(b) for b in _require(run, "breaks", "cost.running"))
            if any(not 0 < b < T for b in breaks) or list(breaks) != sorted(set(breaks)):
                raise ConfigurationError("cost.running.breaks must be increasing inside (0, T)")
            tables = [_table(t, (S, A), "cost.running.tables")
                      for t in _require(run, "tables", "cost.running")]
        else:
            raise ConfigurationError(f"unknown running cost form {rform!r}")
        if tform == "table":
            g = _table(_require(term, "values", "cost.terminal"), (S,), "cost.terminal.values")
        elif tform == "constant":
            g = np.full(S, float(_require(term, "value", "cost.terminal")))
        else:
            raise ConfigurationError(f"unknown terminal cost form {tform!r}")
        return CostSpec.from_tables(None, g, lb, breaks, tables)

    # polynomial in x: f = sum_j c[theta, a, j] x^j, g = sum_j c[theta, j] x^j
    if rform == "poly_x":
        fc = np.asarray(_require(run, "coefficients", "cost.running"), float)
        if fc.ndim != 3 or fc.shape[:2] != (S, A):
            raise ConfigurationError("cost.running.coefficients must be [state][action][power]")
    elif rform == "constant":
        fc = np.full((S, A, 1), float(_require(run, "value", "cost.running")))
    elif rform == "table":
        fc = _table(_require(run, "values", "cost.running"), (S, A), "cost.running.values")[..., None]
    else:
        raise ConfigurationError(f"unknown running cost form {rform!r} with an x-dependent cost")
    if tform == "poly_x":
        gc = np.asarray(_require(term, "coefficients", "cost.terminal"), float)
        if gc.ndim != 2 or gc.shape[0] != S:
            raise ConfigurationError("cost.terminal.coefficients must be [state][power]")
    elif tform == "constant":
        gc = np.full((S, 1), float(_require(term, "value", "cost.terminal")))
    elif tform == "table":
        gc = _table(_require(term, "values", "cost.terminal"), (S,), "cost.terminal.values")[:, None]
    else:
        raise ConfigurationError(f"unknown terminal cost form {tform!r}")
    if lb is None:
        raise ConfigurationError("x-dependent costs need an explicit cost.lower_bound")

    def running(t, x):
        return _poly(fc, np.atleast_1d(x))

    def terminal(x):
        return _poly(gc, np.atleast_1d(x))

    cs = CostSpec(running, terminal, float(lb), True, (), True)
    object.__setattr__(cs, "coefficients", {"running": fc, "terminal": gc})
    return cs


# ---------------------------------------------------------------------------
# scenario


def _psi(spec):
    if spec is None:
        return None
    _check_keys(spec, {"form", "L", "c", "beta", "r", "values"}, "psi")
    form = _require(spec, "form", "psi")
    return PsiModulus(form, {k: v for k, v in spec.items() if k != "form"})


def _env(spec, S):
    _check_keys(spec, {"drift", "diffusion", "C1", "C2"}, "environment")
    dr, di = _require(spec, "drift", "environment"), _require(spec, "diffusion", "environment")
    _check_keys(dr, {"form", "b0", "b1"}, "environment.drift")
    _check_keys(di, {"form", "s0", "s1"}, "environment.diffusion")
    if dr.get("form", "affine") != "affine" or di.get("form", "affine") != "affine":
        raise ConfigurationError("environment coefficients support the affine form only")
    vec = lambda v, w: _table(v if v is not None else 0.0, (S,), w)
    return DiffusionEnv.affine(vec(dr.get("b0"), "b0"), vec(dr.get("b1"), "b1"),
                               vec(di.get("s0"), "s0"), vec(di.get("s1"), "s1"),
                               spec.get("C1"), spec.get("C2"))


def scenario_from_dict(doc: dict, base: Optional[Path] = None) -> Scenario:
    _check_keys(doc, _SCENARIO_KEYS, "scenario")
    if doc.get("version") != SCENARIO_VERSION:
        raise ConfigurationError(f"scenario version must be {SCENARIO_VERSION}")
    T = float(_require(doc, "horizon", "scenario"))
    if not T > 0:
        raise ConfigurationError("horizon must be positive")
    states = list(_require(doc, "states", "scenario"))
    acts = _require(doc, "actions", "scenario")
    if isinstance(acts, list):
        acts = {"points": acts}
    _check_keys(acts, {"points", "lower", "upper"}, "actions")
    grid = ActionGrid(np.asarray(_require(acts, "points", "actions"), float),
                      acts.get("lower"), acts.get("upper"))
    model = QPairModel(tuple(states), grid, _rates(_require(doc, "rates", "scenario"), states, grid),
                       doc.get("M"))
    S, A = model.n_states, model.n_actions

    ly = doc.get("lyapunov", {"phi": [1.0] * S, "lambda": 1.0})
    _check_keys(ly, {"phi", "lambda", "kappa0", "B0", "core"}, "lyapunov")
    phi = _require(ly, "phi", "lyapunov")
    if isinstance(phi, dict):
        _check_keys(phi, {"form", "a", "b"}, "lyapunov.phi")
        if phi.get("form") != "affine_index":
            raise ConfigurationError("lyapunov.phi form must be affine_index")
        phi = float(phi.get("a", 1.0)) + float(phi.get("b", 1.0)) * np.arange(S)
    core = ly.get("core")
    lyap = LyapunovSpec(np.asarray(phi, float), float(_require(ly, "lambda", "lyapunov")),
                        float(ly.get("kappa0", 0.0)),
                        frozenset(_state_indices(ly.get("B0", []), states, "lyapunov.B0")),
                        None if core is None else frozenset(_state_indices(core, states, "lyapunov.core")))
    if len(lyap.phi) != S:
        raise ConfigurationError("lyapunov.phi needs one value per state")

    crit = doc.get("admissibility", "w")
    if crit not in ("w", "w2"):
        raise ConfigurationError("admissibility must be 'w' or 'w2'")
    env = _env(doc["environment"], S) if "environment" in doc else None
    cost = _cost(_require(doc, "cost", "scenario"), S, A, T, env is not None)

    init = doc.get("initial", {})
    _check_keys(init, {"s", "state", "x"}, "initial")
    s = float(init.get("s", 0.0))
    if not 0 <= s < T:
        raise ConfigurationError("initial.s must lie in [0, T)")
    theta = model.index(init.get("state", states[0]))
    x0 = init.get("x")
    if env is not None and x0 is None:
        x0 = 0.0

    num = doc.get("numerics", {})
    _check_keys(num, _NUMERIC_KEYS, "numerics")
    xr = num.get("x_range")
    numerics = Numerics(num.get("n_steps"), num.get("dt"), num.get("dx"), num.get("n_x"),
                        None if xr is None else (float(xr[0]), float(xr[1])),
                        float(num.get("tol", 1e-8)), int(num.get("npaths", 1000)),
                        int(num.get("seed", 0)), int(num.get("modulus_points", 129)))
    sc = Scenario(str(doc.get("name", "scenario")), T, model, lyap, _psi(doc.get("psi")), crit, env,
                  cost, s, theta, None if x0 is None else float(x0), numerics, None,
                  str(doc.get("description", "")))
    if "policy" in doc:
        object.__setattr__(sc, "policy", policy_from_dict(doc["policy"], sc))
    return sc


def resolve_path(path: str) -> Path:
    """A file path, or the name of a bundled scenario."""
    p = Path(path)
    if p.exists():
        return p
    name = p.name if p.suffix == ".json" else p.name + ".json"
    bundled = resources.files("ctmdp") / "scenarios" / name
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigurationError(f"no such scenario or policy file: {path}")


def load_scenario(path) -> Scenario:
    p = resolve_path(str(path))
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{p}: {e}") from None
    return scenario_from_dict(doc, p.parent)


def bundled_scenarios() -> list:
    root = resources.files("ctmdp") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir()
                  if p.name.endswith(".json") and not p.name.endswith(".policy.json"))


# ---------------------------------------------------------------------------
# policies


def _measure(spec, A, where):
    if isinstance(spec, int):
        return MeasureOnU.dirac(spec)
    _check_keys(spec, {"support", "weights"}, where)
    m = MeasureOnU(tuple(_require(spec, "support", where)), _require(spec, "weights", where))
    m.dense(A)
    return m


def policy_from_dict(doc: dict, sc: Scenario) -> RelaxedMarkovPolicy:
    """Policy document: either ``stationary`` (state -> measure) or
    ``knots`` + ``measures`` (state -> one measure per knot)."""
    _check_keys(doc, {"version", "stationary", "knots", "measures", "interpolation", "psi"}, "policy")
    if doc.get("version", SCENARIO_VERSION) != SCENARIO_VERSION:
        raise ConfigurationError(f"policy version must be {SCENARIO_VERSION}")
    states, A = list(sc.model.states), sc.model.n_actions
    psi = _psi(doc["psi"]) if "psi" in doc else sc.psi

    def per_state(mapping, where):
        if not isinstance(mapping, dict) or set(map(str, mapping)) != set(map(str, states)):
            raise ConfigurationError(f"{where} must give every state exactly once")
        lookup = {str(k): v for k, v in mapping.items()}
        return [lookup[str(st)] for st in states]

    if "stationary" in doc:
        if "knots" in doc or "measures" in doc:
            raise ConfigurationError("policy is either stationary or knotted, not both")
        ms = [_measure(m, A, "policy.stationary") for m in per_state(doc["stationary"], "policy.stationary")]
        return lift_stationary(RandomizedStationaryPolicy(tuple(ms)), sc.T, A, psi)
    knots = np.asarray(_require(doc, "knots", "policy"), float)
    if abs(knots[-1] - sc.T) > 1e-12 * max(1.0, sc.T):
        raise ConfigurationError("policy knots must end at the horizon")
    curves = [[_measure(m, A, "policy.measures") for m in c]
              for c in per_state(_require(doc, "measures", "policy"), "policy.measures")]
    return RelaxedMarkovPolicy.from_measures(knots, curves, A, doc.get("interpolation", PIECEWISE_CONSTANT), psi)


def load_policy(path, sc: Scenario) -> RelaxedMarkovPolicy:
    p = resolve_path(str(path))
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{p}: {e}") from None
    return policy_from_dict(doc, sc)


def policy_to_dict(policy: RelaxedMarkovPolicy, states) -> dict:
    """Inverse of :func:`policy_from_dict`; floats survive the round trip."""
    measures = {}
    for th, lab in enumerate(states):
        curve = []
        for w in policy.weights[:, th]:
            idx = np.flatnonzero(w > 0)
            curve.append({"support": [int(i) for i in idx], "weights": [float(v) for v in w[idx]]})
        measures[str(lab)] = curve
    doc = {"version": SCENARIO_VERSION, "knots": [float(t) for t in policy.knots],
           "interpolation": policy.interpolation, "measures": measures}
    if policy.psi is not None:
        doc["psi"] = policy.psi.to_dict()
    return doc


# ---------------------------------------------------------------------------
# output


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def atomic_write(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    atomic_write(path, buf.getvalue())


def write_json(path: Path, doc: dict):
    atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
