"""A controlled regime chain driving a scalar diffusion.

The finite-difference solver gives a value over (t, x, regime) with
x-feedback actions. Stationary regime-only policies cannot use x, so their
simulated costs should sit above that value.
"""
import time

import numpy as np

from ctmdp import (PIECEWISE_CONSTANT, RelaxedMarkovPolicy, cost_mc, default_x_domain, dp_env,
                   load_scenario)

sc = load_scenario("env_regime")
lo, hi = default_x_domain(sc.env, sc.x0, sc.T, sc.s)
t0 = time.perf_counter()
vg = dp_env(sc.model, sc.env, sc.cost, sc.T, None, lo, hi, sc.numerics.n_x)
print(f"dp_env: {len(vg.times) - 1} stable time steps, {len(vg.x)} x points on [{lo:.2f}, {hi:.2f}], "
      f"{time.perf_counter() - t0:.2f} s")
V = vg.value_at(sc.x0, sc.theta)
print(f"V(0, x0={sc.x0}, {sc.model.states[sc.theta]}) = {V:.4f}")

rng = np.random.default_rng(0)
costs = []
for i in range(10):
    w = rng.dirichlet(np.ones(sc.model.n_actions), sc.model.n_states)
    pol = RelaxedMarkovPolicy([0.0, sc.T], np.stack([w, w]), PIECEWISE_CONSTANT)
    est = cost_mc(sc.model, sc.cost, pol, sc.s, sc.theta, 10_000, seed=i, env=sc.env, x=sc.x0, dt=1 / 128)
    costs.append(est.mean)
    print(f"random stationary policy {i}: J = {est.mean:.4f} +- {est.se:.4f}")
print(f"best sampled policy {min(costs):.4f} vs value {V:.4f}")

k = len(vg.times) // 2
for th, name in enumerate(sc.model.states):
    acts = vg.actions[k, :, th]
    inner = np.abs(vg.x - sc.x0) <= 1.0
    print(f"regime {name}: actions used at t={vg.times[k]:.2f} near x0: "
          f"{sorted(set(acts[inner].tolist()))}")
