"""Transition semigroup of a relaxed policy, computed two ways, and checked
against sampled paths.

A machine is good or bad. Under a policy that ramps from "do nothing" to
"maintain" over the horizon, the generator varies in time, so there is no
single matrix exponential. The time-ordered series and the forward ODE must
agree with each other and with the empirical law of uniformized paths.
"""
import numpy as np

from ctmdp import (MIXTURE_LINEAR, PsiModulus, RelaxedMarkovPolicy, dyson_transition,
                   load_scenario, modulus_report, ode_transition, sample_chains, tail_bound)

sc = load_scenario("two_state")
model = sc.model
T = sc.T

# per-state curve from Dirac(0) to Dirac(1), linear in the mixture weights
w = np.stack([np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([[0.0, 1.0], [0.0, 1.0]])])
policy = RelaxedMarkovPolicy([0.0, T], w, MIXTURE_LINEAR, PsiModulus.linear(1.0))
rep = modulus_report(policy, grid=model.grid)
print(f"policy modulus: max w = {rep.max_w():.3f}, within psi(r) = r: {rep.passed}")

h = np.array([0.0, 1.0])          # indicator of "bad"
d = dyson_transition(model, policy, 0.0, T, h, tol=1e-10)
o = ode_transition(model, policy, 0.0, T, h, tol=1e-10)
print(f"P(bad at T | start good): series {d.values[0]:.12f} ({d.order} terms, "
      f"tail bound {d.error_bound:.1e}), ODE {o.values[0]:.12f} ({o.steps} RK4 steps)")
print(f"tail bound for 2M(T-s) = {2 * model.M * T:g} with 10 terms: {tail_bound(model.M, 0, T, 10):.4e}")

n = 100_000
paths = sample_chains(model, policy, 0.0, 0, T, n, seed=1)
for t in (0.25, 0.5, 1.0):
    p = ode_transition(model, policy, 0.0, t, h).values[0]
    emp = (paths.states_at(t) == 1).mean()
    print(f"t={t:4.2f}: P(bad) exact {p:.4f}, sampled {emp:.4f} "
          f"({(emp - p) / np.sqrt(p * (1 - p) / n):+.2f} SE)")
print(f"mean number of jumps per path: {paths.counts.mean():.3f} (M T = {model.M * T:g})")
