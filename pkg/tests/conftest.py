import numpy as np
import pytest

from ctmdp.model import (MIXTURE_LINEAR, PIECEWISE_CONSTANT, ActionGrid, QPairModel,
                         RelaxedMarkovPolicy)

ACCEPTANCE = []


def random_model(rng, n_states=None, n_actions=None, M_max=5.0, dim=1):
    S = n_states or int(rng.integers(2, 9))
    A = n_actions or int(rng.integers(1, 4))
    grid = ActionGrid(np.sort(rng.uniform(0, 1, size=(A, dim)), axis=0) + np.arange(A)[:, None])
    r = rng.uniform(0.0, 1.0, size=(S, S, A)) * (rng.random((S, S, A)) < 0.7)
    r[np.arange(S), np.arange(S)] = 0.0
    tot = r.sum(axis=1).max()
    if tot > 0:
        r *= rng.uniform(0.2, M_max) / tot
    return QPairModel(tuple(range(S)), grid, r)


def random_policy(rng, n_states, n_actions, T=1.0, n_knots=None, interpolation=None):
    K = n_knots or int(rng.integers(2, 6))
    knots = np.concatenate([[0.0], np.sort(rng.uniform(0, T, K - 2)), [T]])
    knots = np.unique(knots)
    w = rng.dirichlet(np.ones(n_actions), size=(len(knots), n_states))
    interp = interpolation or (MIXTURE_LINEAR if rng.random() < 0.5 else PIECEWISE_CONSTANT)
    return RelaxedMarkovPolicy(knots, w, interp)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
