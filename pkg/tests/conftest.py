import numpy as np
import pytest

from ssrlab.core import Dataset, Trajectory
from ssrlab.envs import build_expected_composition_chain_dataset, make_chain_env

ACCEPTANCE_LINES: list[str] = []


def record_line(line: str):
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def chain_env():
    return make_chain_env()


@pytest.fixture(scope="session")
def chain_data(chain_env):
    return build_expected_composition_chain_dataset(chain_env, 200, seed=0)


def exact_frequency_data(n_states, n_actions, rng, gamma=1.0, max_count=5):
    """Single-step trajectories whose empirical model equals a rational MDP exactly.

    Returns ``(dataset, P, R, d0)`` where ``P[s, a, s'] = c / sum(c)`` for the
    integer counts used to build the data and ``d0`` is the first-state
    frequency.
    """
    c = rng.integers(1, max_count + 1, size=(n_states, n_actions, n_states))
    R = rng.uniform(0.0, 1.0, size=n_states)
    trajs = []
    for s in range(n_states):
        for a in range(n_actions):
            for sp in range(n_states):
                trajs += [Trajectory([s], [a], [R[sp]], [sp], [1.0 / n_actions])] * int(c[s, a, sp])
    P = c / c.sum(axis=-1, keepdims=True)
    visits = c.sum(axis=(1, 2))
    d0 = visits / visits.sum()
    return Dataset(tuple(trajs), gamma, n_states, n_actions), P, R, d0
