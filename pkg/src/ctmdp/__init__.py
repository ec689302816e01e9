"""Finite-horizon control of continuous-time Markov decision processes with
relaxed policies, optionally coupled to a regime-switching diffusion."""
from .errors import ConfigurationError, CTMDPError, DomainError, RefusalError
from .model import (MIXTURE_LINEAR, PIECEWISE_CONSTANT, ActionGrid, CostSpec, DiffusionEnv,
                    HypothesisReport, LyapunovSpec, MeasureOnU, ModulusReport, PsiModulus,
                    QPairModel, RandomizedStationaryPolicy, RelaxedMarkovPolicy, lift_stationary,
                    mixed_generator, mixed_rate, modulus_report, validate_hypotheses, w1_distance)
from .semigroup import (GeneratorAt, TransitionResult, dyson_transition, generator_at,
                        ode_transition, tail_bound, transition_matrix)
from .simulate import (ChainBatch, ChainPath, CoupledBatch, CoupledPath, holding_probability_check,
                       increment_moment_check, phi_moment_check, sample_chain, sample_chains,
                       sample_coupled, sample_coupled_batch)
from .scenario import Scenario, bundled_scenarios, load_policy, load_scenario
from .solve import (CostEstimate, ValueGridChain, ValueGridEnv, cost_exact_chain, cost_mc,
                    default_smoothing_psi, default_x_domain, dirac_reduction_check, dp_chain,
                    dp_env, evaluate_exact_chain, psi_feasible_interpolation, richardson_constant,
                    trivial_lower_bound, verify_lower_bound)

__version__ = "0.1.0"
