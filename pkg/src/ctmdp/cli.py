"""Command-line front end: ``ctmdp validate | simulate | evaluate | solve``.

Exit codes: 0 success, 1 a check failed or a solver refused, 2 bad input.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError, RefusalError
from .model import validate_hypotheses
from .scenario import (Scenario, load_policy, load_scenario, policy_to_dict, write_csv,
                       write_json)
from .simulate import (holding_probability_check, increment_moment_check, phi_moment_check,
                       sample_chains, sample_coupled_batch)
from .solve import (check_admissible, cost_exact_chain, cost_mc, default_smoothing_psi,
                    default_x_domain, dp_chain, dp_env, psi_feasible_interpolation,
                    verify_lower_bound)

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _out(args) -> Path:
    return Path(args.out)


def _seed(args, sc: Scenario) -> int:
    return sc.numerics.seed if args.seed is None else args.seed


def _npaths(args, sc: Scenario) -> int:
    return sc.numerics.npaths if args.npaths is None else args.npaths


def _tol(args, sc: Scenario) -> float:
    return sc.numerics.tol if args.tol is None else args.tol


def _policy(args, sc: Scenario):
    if args.policy is not None:
        return load_policy(args.policy, sc)
    if sc.policy is None:
        raise ConfigurationError("no --policy given and the scenario bundles none")
    return sc.policy


def cmd_validate(args) -> int:
    sc = load_scenario(args.scenario)
    rep = validate_hypotheses(sc.model, sc.lyapunov, sc.env, sc.cost, horizon=sc.T)
    print(f"scenario {sc.name}: {sc.model.n_states} states, {sc.model.n_actions} actions")
    print(rep.table())
    rows = [("H1", rep.h1, ""), ("H2", rep.h2, rep.M_measured), ("H4", rep.h4, rep.h4_max_violation),
            ("H4_lambda_min", "", rep.h4_lambda_min), ("H5", rep.h5, rep.C1_estimate),
            ("H6", rep.h6, rep.C2_estimate), ("cost_lower_bound", rep.cost_bounded_below, "")]
    write_csv(_out(args) / "validate.csv", ["check", "pass", "value"],
              [(n, "" if p is None or p == "" else int(bool(p)), "" if v is None else v)
               for n, p, v in rows])
    return EXIT_OK if rep.h2 else EXIT_FAIL


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    pol = _policy(args, sc)
    seed, npaths = _seed(args, sc), _npaths(args, sc)
    check_admissible(pol, sc.model.grid, sc.admissibility)
    out = _out(args)
    T, s = sc.T, sc.s
    states = sc.model.states
    checks = []
    if sc.env is not None:
        dt = args.dt if args.dt is not None else (sc.numerics.dt or (T - s) / 512)
        cb = sample_coupled_batch(sc.model, sc.env, pol, s, sc.x0, sc.theta, T, npaths, dt, seed)
        chain = cb.chain

        def rows():
            for i in range(npaths):
                p = cb.path(i)
                for t, x in zip(p.times, p.x):
                    yield (i, t, states[p.chain.state_at(t)], x[0])
        write_csv(out / "paths.csv", ["path", "t", "state", "x"], rows())
        mid = cb.grid[len(cb.grid) // 2]
        ic = increment_moment_check(cb, s, mid, sc.env.C2)
        checks.append(("increment_4th_moment", ic))
    else:
        chain = sample_chains(sc.model, pol, s, sc.theta, T, npaths, seed)

        def rows():
            for i in range(npaths):
                p = chain.path(i)
                times = np.concatenate([[s], p.jump_times, [T]])
                visited = np.concatenate([p.states, p.states[-1:]])
                for t, st in zip(times, visited):
                    yield (i, t, states[st])
        write_csv(out / "paths.csv", ["path", "t", "state"], rows())
    checks.append(("phi_moment", phi_moment_check(chain, sc.lyapunov)))
    checks.append(("holding_probability",
                   holding_probability_check(chain, sc.model.M, s, 0.5 * (T - s))))
    ok = True
    table = []
    for name, c in checks:
        sign = -1.0 if name == "holding_probability" else 1.0
        for t, e, se, b, m in zip(c.times, c.empirical, c.se, c.bound, c.margins):
            table.append((name, t, sign * e, se, sign * b, m, int(m >= 0)))
        ok &= c.passed
        print(f"{name:22s} {'pass' if c.passed else 'FAIL'}  min margin {c.margins.min():.6g}")
    write_csv(out / "checks.csv", ["check", "t", "empirical", "se", "bound", "margin", "pass"], table)
    print(f"mean jumps per path {chain.counts.mean():.6g}; seed {seed}; paths {npaths}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_evaluate(args) -> int:
    sc = load_scenario(args.scenario)
    pol = _policy(args, sc)
    seed, npaths, tol = _seed(args, sc), _npaths(args, sc), _tol(args, sc)
    mode = args.mode or ("mc" if sc.cost.uses_x or sc.env is not None else "exact")
    check_admissible(pol, sc.model.grid, sc.admissibility)
    chain_only = sc.env is None and not sc.cost.uses_x
    exact = cost_exact_chain(sc.model, sc.cost, pol, sc.s, sc.theta, tol, criterion=sc.admissibility) \
        if chain_only else None
    state = sc.model.states[sc.theta]
    ok = True
    if mode == "exact":
        if exact is None:
            raise ConfigurationError("exact evaluation needs a chain-only scenario")
        print(f"J(s={sc.s:.17g}, {state}) = {exact:.17g}  (exact, tol {tol:g})")
        row = ("exact", sc.s, state, "" if sc.x0 is None else sc.x0, exact, 0.0, "", "", exact)
    else:
        dt = args.dt if args.dt is not None else sc.numerics.dt
        est = cost_mc(sc.model, sc.cost, pol, sc.s, sc.theta, npaths, seed, sc.env, sc.x0, dt,
                      criterion=sc.admissibility)
        print(f"J(s={sc.s:.17g}, {state}) = {est.mean:.17g} +- {est.se:.6g}  "
              f"(mc, {est.npaths} paths, seed {est.seed})")
        if exact is not None:
            gap = abs(est.mean - exact)
            ok = gap <= 4 * est.se + 1e-12
            print(f"exact {exact:.17g}; |mc - exact| = {gap:.3g} = {gap / max(est.se, 1e-300):.2f} SE"
                  + ("" if ok else "  DISCREPANCY"))
        row = ("mc", sc.s, state, "" if sc.x0 is None else sc.x0, est.mean, est.se, est.npaths,
               est.seed, "" if exact is None else exact)
    write_csv(_out(args) / "evaluate.csv",
              ["mode", "s", "state", "x", "mean", "se", "npaths", "seed", "exact"], [row])
    return EXIT_OK if ok else EXIT_FAIL


def cmd_solve(args) -> int:
    sc = load_scenario(args.scenario)
    out = _out(args)
    T, s = sc.T, sc.s
    states = sc.model.states
    if args.env:
        if sc.env is None:
            raise ConfigurationError("--env needs a scenario with an environment")
        lo, hi = sc.numerics.x_range or default_x_domain(sc.env, sc.x0, T, s)
        if args.dx is not None:
            n_x = int(round((hi - lo) / args.dx)) + 1
        else:
            n_x = sc.numerics.n_x or (int(round((hi - lo) / sc.numerics.dx)) + 1 if sc.numerics.dx else 401)
        n_steps = max(1, int(round((T - s) / args.dt))) if args.dt is not None else sc.numerics.steps_for(T - s)
        vg = dp_env(sc.model, sc.env, sc.cost, T, n_steps, lo, hi, n_x, s)
        v0 = vg.value_at(sc.x0, sc.theta)
        print(f"V(s={s:.17g}, x={sc.x0:.17g}, {states[sc.theta]}) = {v0:.17g}")
        print(f"grid: {len(vg.times) - 1} time steps, {n_x} x points on [{lo:.6g}, {hi:.6g}]")
        write_csv(out / "value_env.csv", ["t", "state", "x", "v", "a"], vg.rows(states))
        return EXIT_OK

    n_steps = max(1, int(round((T - s) / args.dt))) if args.dt is not None else sc.numerics.steps_for(T - s)
    if n_steps is None:
        n_steps = max(64, int(np.floor(2 * sc.model.M * (T - s))) + 1)
    vg = dp_chain(sc.model, sc.cost, T, n_steps, s)
    step = vg.step_policy()
    psi = sc.psi or default_smoothing_psi(step, sc.model.grid)
    sm = psi_feasible_interpolation(step, psi, sc.model.grid, sc.model, sc.cost, s, _tol(args, sc))
    cert = verify_lower_bound(vg.values, vg.times, sc.model, sc.cost)
    v0 = vg.values[0, sc.theta]
    print(f"V(s={s:.17g}, {states[sc.theta]}) = {v0:.17g}  ({n_steps} steps, dt {vg.dt:.6g})")
    print(f"verification residual min {cert.min_residual:.6g} (tolerance {cert.tolerance:.3g}); "
          f"certificate {'pass' if cert.passed else 'FAIL'}")
    L = psi.params.get("L") if psi.form == "linear" else psi.max_slope(T)
    print(f"smoothing: {len(sm.widths)} ramps, psi {psi.form} slope {L:.17g}, "
          f"cost delta {sm.cost_delta[sc.theta]:.6g}")
    j_smooth = cost_exact_chain(sc.model, sc.cost, sm.policy, s, sc.theta, _tol(args, sc),
                                require_admissible=False)
    print(f"smoothed policy cost {j_smooth:.17g}; gap to DP value {j_smooth - v0:.6g}")
    print(f"value time-modulus {vg.time_modulus():.6g}")
    write_csv(out / "value.csv", ["t", "state", "v", "a"], vg.rows(states))
    write_json(out / "policy.json", policy_to_dict(sm.policy, states))
    write_json(out / "step_policy.json", policy_to_dict(step, states))
    write_csv(out / "solve_summary.csv", ["quantity", "value"], [
        ("V", v0), ("n_steps", n_steps), ("min_residual", cert.min_residual),
        ("residual_tolerance", cert.tolerance), ("certificate", int(cert.passed)),
        ("psi_slope", L), ("smoothing_cost_delta", sm.cost_delta[sc.theta]),
        ("smoothed_policy_cost", j_smooth), ("gap_to_dp", j_smooth - v0),
        ("time_modulus", vg.time_modulus())])
    return EXIT_OK if cert.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True, help="scenario JSON path or bundled name")
    common.add_argument("--policy", help="policy JSON path (default: the scenario's own)")
    common.add_argument("--seed", type=int, help="master seed (default: scenario numerics.seed)")
    common.add_argument("--npaths", type=int)
    common.add_argument("--dt", type=float)
    common.add_argument("--dx", type=float)
    common.add_argument("--tol", type=float)
    common.add_argument("--out", default=".", help="directory for CSV/JSON output")
    common.add_argument("--env", action="store_true", help="solve the coupled problem")
    common.add_argument("--mode", choices=("mc", "exact"))
    p = argparse.ArgumentParser(prog="ctmdp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("validate", cmd_validate), ("simulate", cmd_simulate),
                     ("evaluate", cmd_evaluate), ("solve", cmd_solve)):
        sp = sub.add_parser(name, parents=[common])
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigurationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (RefusalError, DomainError) as e:
        print(f"refused: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
