"""Ground-truth simulators and dataset builders.

Tabular environments collect the reward of the state an action leads to:
taking ``a`` in ``s`` and landing in ``s'`` yields ``reward[s']``.  Episodes
run for exactly ``horizon`` decisions from a state drawn from
``initial_dist``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .core import PROB_ATOL, Dataset, TabularPolicy, Trajectory, make_rng

DOWN, UP = 0, 1


@dataclass(frozen=True, eq=False)
class TabularEnv:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S,) reward for landing in a state
    horizon: int
    initial_dist: np.ndarray
    gamma: float = 1.0
    tag: str = "tabular"

    def __post_init__(self):
        P = np.array(self.transition, dtype=np.float64)
        R = np.array(self.reward, dtype=np.float64).reshape(-1)
        d0 = np.array(self.initial_dist, dtype=np.float64).reshape(-1)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S = P.shape[0]
        if R.shape != (S,) or d0.shape != (S,):
            raise ValueError("reward and initial_dist must have one entry per state")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > PROB_ATOL):
            raise ValueError("transition rows must be probability vectors")
        if np.any(d0 < 0) or abs(d0.sum() - 1.0) > PROB_ATOL:
            raise ValueError("initial_dist must be a probability vector")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        for name, arr in (("transition", P), ("reward", R), ("initial_dist", d0)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @cached_property
    def expected_reward(self) -> np.ndarray:
        """r(s, a) = sum_s' p(s'|s, a) R(s')."""
        return self.transition @ self.reward


@dataclass(frozen=True)
class ChainConfig:
    H: int = 6
    low_reward: float = 1.0 / 6.0
    high_reward: float = 201.0

    def __post_init__(self):
        if self.H < 2:
            raise ValueError("chain horizon H must be >= 2")


def make_chain_env(config: ChainConfig = ChainConfig()) -> TabularEnv:
    """Deterministic chain with positions ``0..H``.

    Position 0 is the start (floor for the down action, reward
    ``low_reward``); position ``H`` is the top (ceiling for the up action,
    reward ``high_reward``).  Reaching the top takes all ``H`` decisions, so
    the all-up sequence is the only one of the ``2**H`` that earns
    ``high_reward`` and staying at the bottom earns ``H * low_reward``.
    """
    if not isinstance(config, ChainConfig):
        raise TypeError("config must be a ChainConfig")
    H = config.H
    S = H + 1
    P = np.zeros((S, 2, S))
    for s in range(S):
        P[s, DOWN, max(s - 1, 0)] = 1.0
        P[s, UP, min(s + 1, H)] = 1.0
    R = np.zeros(S)
    R[0] = config.low_reward
    R[H] = config.high_reward
    d0 = np.zeros(S)
    d0[0] = 1.0
    return TabularEnv(P, R, H, d0, gamma=1.0, tag="chain")


def uniform_behavior_policy(env: TabularEnv) -> TabularPolicy:
    return TabularPolicy.uniform(env.n_states, env.n_actions)


def _check_dims(env: TabularEnv, policy: TabularPolicy):
    if policy.probs.shape != (env.n_states, env.n_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match env "
            f"({env.n_states}, {env.n_actions})"
        )


def _draw(rng: np.random.Generator, p: np.ndarray) -> int:
    i = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(i, len(p) - 1)


def rollout(env: TabularEnv, policy: TabularPolicy, n_episodes: int, seed: int) -> Dataset:
    """Sample ``n_episodes`` episodes, logging the acting policy's propensities.

    Episode ``i`` draws from its own stream ``(seed, i)``.
    """
    _check_dims(env, policy)
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    P, R, pi = env.transition, env.reward, policy.probs
    trajs = []
    for ep in range(n_episodes):
        rng = make_rng(seed, ep)
        s = _draw(rng, env.initial_dist)
        cols = ([], [], [], [], [])
        for _ in range(env.horizon):
            a = _draw(rng, pi[s])
            ns = _draw(rng, P[s, a])
            for col, v in zip(cols, (s, a, R[ns], ns, pi[s, a])):
                col.append(v)
            s = ns
        trajs.append(Trajectory(*cols))
    return Dataset(tuple(trajs), env.gamma, env.n_states, env.n_actions, env.tag)


def _chain_trajectory(env: TabularEnv, code: int) -> Trajectory:
    """Trajectory of the action sequence whose bit ``t`` (MSB first) is the action at step ``t``."""
    H = env.horizon
    s = int(np.argmax(env.initial_dist))
    cols = ([], [], [], [], [])
    for t in range(H):
        a = (code >> (H - 1 - t)) & 1
        ns = int(np.argmax(env.transition[s, a]))
        for col, v in zip(cols, (s, a, env.reward[ns], ns, 0.5)):
            col.append(v)
        s = ns
    return Trajectory(*cols)


_CHAIN_CACHE: dict = {}


def chain_trajectories(env: TabularEnv) -> tuple[Trajectory, ...]:
    """All ``2**H`` uniform-behavior chain trajectories, indexed by action code."""
    if env.tag != "chain" or env.n_actions != 2:
        raise ValueError("expected a chain environment")
    key = (env.horizon, env.reward.tobytes())
    if key not in _CHAIN_CACHE:
        _CHAIN_CACHE[key] = tuple(_chain_trajectory(env, c) for c in range(2**env.horizon))
    return _CHAIN_CACHE[key]


def expected_copies(n_episodes: int, H: int) -> int:
    return int(math.floor(n_episodes / 2**H + 0.5))


def build_expected_composition_chain_dataset(
    env: TabularEnv, n_episodes: int, seed: int, n_copies: int | None = None
) -> Dataset:
    """Chain dataset holding exactly ``round(n / 2**H)`` copies of the all-up trajectory.

    The remaining episodes are drawn uniformly (with replacement) from the
    other ``2**H - 1`` action sequences, and the order is shuffled.
    """
    trajs = chain_trajectories(env)
    H = env.horizon
    if n_copies is None:
        n_copies = expected_copies(n_episodes, H)
    if not 0 <= n_copies <= n_episodes:
        raise ValueError(f"cannot place {n_copies} copies in {n_episodes} episodes")
    rng = make_rng(seed)
    top = 2**H - 1
    codes = np.concatenate(
        [np.full(n_copies, top), rng.integers(0, top, size=n_episodes - n_copies)]
    )
    codes = codes[rng.permutation(n_episodes)]
    return Dataset(tuple(trajs[c] for c in codes), env.gamma, env.n_states, 2, env.tag)


def is_top_trajectory(traj: Trajectory) -> bool:
    return bool(np.all(traj.actions == UP))


def make_random_mdp(
    n_states: int, n_actions: int, horizon: int, reward_sparsity: float, seed: int, gamma: float = 1.0
) -> TabularEnv:
    """Random MDP: Dirichlet(1) transition rows, U(0, 1) rewards on a random subset of states."""
    if n_states < 1 or n_actions < 1 or horizon < 1:
        raise ValueError("n_states, n_actions and horizon must be >= 1")
    if not 0.0 <= reward_sparsity <= 1.0:
        raise ValueError("reward_sparsity must lie in [0, 1]")
    rng = make_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = np.zeros(n_states)
    k = int(round(reward_sparsity * n_states))
    if k:
        R[rng.choice(n_states, size=k, replace=False)] = rng.uniform(0.0, 1.0, size=k)
    d0 = rng.dirichlet(np.ones(n_states))
    return TabularEnv(P, R, horizon, d0, gamma=gamma, tag="random-mdp")


def policy_q_values(env: TabularEnv, policy: TabularPolicy) -> np.ndarray:
    """Finite-horizon Q of ``policy`` at t=0, shape (S, A)."""
    _check_dims(env, policy)
    r = env.expected_reward
    V = np.zeros(env.n_states)
    Q = np.zeros_like(r)
    for _ in range(env.horizon):
        Q = r + env.gamma * (env.transition @ V)
        V = np.sum(policy.probs * Q, axis=1)
    return Q


def exact_policy_value(env: TabularEnv, policy: TabularPolicy) -> float:
    """Expected H-step discounted return by backward induction."""
    Q = policy_q_values(env, policy)
    return float(env.initial_dist @ np.sum(policy.probs * Q, axis=1))


def optimal_q_values(env: TabularEnv) -> np.ndarray:
    r = env.expected_reward
    V = np.zeros(env.n_states)
    Q = np.zeros_like(r)
    for _ in range(env.horizon):
        Q = r + env.gamma * (env.transition @ V)
        V = Q.max(axis=1)
    return Q


def mc_policy_value(env: TabularEnv, policy: TabularPolicy, n_episodes: int, seed: int):
    """Monte-Carlo mean return and its standard error."""
    ds = rollout(env, policy, n_episodes, seed)
    G = ds.returns
    return float(G.mean()), float(G.std(ddof=1) / math.sqrt(len(G))) if len(G) > 1 else 0.0


# --- TutorBot -------------------------------------------------------------

THETA_ANXIETY = np.array([0.0, -0.05, -0.2, -0.5])
THETA_THINKING = np.array([0.5, 0.3, 0.2, 0.0])
N_PRETEST = 9
TUTOR_ACTIONS = ("encourage", "guided-prompt", "hint")


@dataclass(frozen=True)
class TutorBotConfig:
    """TutorBot simulator parameters.

    Each action contributes an engagement level (``action_effect``) to a
    four-step history; anxiety and thinking are the history weighted by
    ``THETA_ANXIETY`` and ``THETA_THINKING``, zero-padded before the first
    step.  The bucket edges define the 4x3x3x2 grid used for tabular
    learners.
    """

    mu_improv: float = 2.0
    mu_base: float = 1.0
    pretest_dist: tuple[float, ...] = (1.0 / 9,) * 9
    action_effect: tuple[float, float, float] = (0.0, 0.5, 1.0)
    pretest_edges: tuple[int, ...] = (3, 5, 7)
    anxiety_edges: tuple[float, ...] = (-0.4, -0.1)
    thinking_edges: tuple[float, ...] = (0.25, 0.6)

    def __post_init__(self):
        if not self.mu_improv > self.mu_base:
            raise ValueError("mu_improv must exceed mu_base")
        p = np.asarray(self.pretest_dist, dtype=float)
        if p.shape != (N_PRETEST,) or np.any(p < 0) or abs(p.sum() - 1.0) > PROB_ATOL:
            raise ValueError("pretest_dist must be a distribution over 0..8")
        if len(self.action_effect) != 3 or not all(0.0 <= e <= 1.0 for e in self.action_effect):
            raise ValueError("action_effect needs three values in [0, 1]")

    @property
    def n_cells(self) -> int:
        return (
            (len(self.pretest_edges) + 1)
            * (len(self.anxiety_edges) + 1)
            * (len(self.thinking_edges) + 1)
            * 2
        )


@dataclass(frozen=True)
class TutorBotStep:
    pretest: int
    anxiety: float
    thinking: float
    pre_termination: int


def episode_length(pretest, l):
    return np.rint(7.0 - 0.46 * np.asarray(pretest) + np.asarray(l)).astype(np.int64)


class TutorBot:
    """Simulator handle.  Stateless; all randomness comes from the caller's generator."""

    def __init__(self, config: TutorBotConfig = TutorBotConfig()):
        self.config = config
        self._effect = np.asarray(config.action_effect, dtype=float)
        self._d_pretest = np.asarray(config.pretest_dist, dtype=float)

    @property
    def n_states(self) -> int:
        return self.config.n_cells

    n_actions = 3

    def discretize(self, pretest, anxiety, thinking, pre_termination):
        c = self.config
        p = np.digitize(pretest, c.pretest_edges)
        x = np.digitize(anxiety, c.anxiety_edges)
        h = np.digitize(thinking, c.thinking_edges)
        nx, nh = len(c.anxiety_edges) + 1, len(c.thinking_edges) + 1
        return ((p * nx + x) * nh + h) * 2 + np.asarray(pre_termination, dtype=np.int64)

    def _latent(self, hist):
        return hist @ THETA_ANXIETY, hist @ THETA_THINKING

    def final_reward(self, anxiety, thinking, rng, size=None):
        p = np.clip(np.asarray(anxiety) + np.asarray(thinking), 0.0, 1.0)
        improved = rng.random(size) < p
        r_improv = rng.normal(self.config.mu_improv, 1.0, size)
        r_base = rng.normal(self.config.mu_base, 0.4, size)
        return np.where(improved, r_improv, r_base)

    def episode(self, action_fn, rng: np.random.Generator):
        """Run one episode; ``action_fn(cell, pretest, anxiety, thinking, term)`` returns (action, propensity)."""
        pretest = _draw(rng, self._d_pretest)
        T = int(episode_length(pretest, rng.uniform(-1.0, 2.0)))
        hist = np.zeros(4)
        x, h = 0.0, 0.0
        rows = []
        for t in range(T):
            term = int(t + 1 == T)
            cell = int(self.discretize(pretest, x, h, term))
            a, prop = action_fn(cell, pretest, x, h, term, rng)
            hist = np.append(hist[1:], self._effect[a])
            nx, nh = self._latent(hist)
            next_term = int(t + 2 == T)
            ncell = int(self.discretize(pretest, nx, nh, next_term))
            r = float(self.final_reward(nx, nh, rng)) if term else 0.0
            rows.append((cell, a, r, ncell, prop, pretest, x, h, term))
            x, h = float(nx), float(nh)
        return rows

    def simulate_batch(self, probs: np.ndarray, n_episodes: int, rng: np.random.Generator):
        """Vectorised returns of ``n_episodes`` under a (cells x 3) policy table."""
        pretest = rng.choice(N_PRETEST, size=n_episodes, p=self._d_pretest)
        T = episode_length(pretest, rng.uniform(-1.0, 2.0, size=n_episodes))
        hist = np.zeros((n_episodes, 4))
        x = np.zeros(n_episodes)
        h = np.zeros(n_episodes)
        cum = np.cumsum(probs, axis=1)
        for t in range(int(T.max())):
            alive = t < T
            term = (t + 1 == T).astype(np.int64)
            cell = self.discretize(pretest, x, h, term)
            u = rng.random(n_episodes)
            a = np.minimum((u[:, None] >= cum[cell]).sum(axis=1), 2)
            new_hist = np.concatenate([hist[:, 1:], self._effect[a][:, None]], axis=1)
            hist = np.where(alive[:, None], new_hist, hist)
            nx, nh = self._latent(hist)
            x, h = np.where(alive, nx, x), np.where(alive, nh, h)
        return self.final_reward(x, h, rng, size=n_episodes)


def make_tutorbot_env(config: TutorBotConfig = TutorBotConfig()) -> TutorBot:
    if not isinstance(config, TutorBotConfig):
        raise TypeError("config must be a TutorBotConfig")
    return TutorBot(config)


def _behavior_table(handle: TutorBot, behavior) -> np.ndarray:
    if isinstance(behavior, TabularPolicy):
        table = behavior.probs
    else:
        b = np.asarray(behavior, dtype=float)
        if b.shape == (3,):
            table = np.tile(b, (handle.n_states, 1))
        else:
            table = b
    if table.shape != (handle.n_states, 3):
        raise ValueError(f"behavior must be 3 probabilities or a ({handle.n_states}, 3) table")
    TabularPolicy(table)  # validates rows
    return table


def tutorbot_rollout(handle: TutorBot, behavior, n_episodes: int, seed: int) -> Dataset:
    """Log ``n_episodes`` TutorBot episodes; observations ride along in ``Trajectory.aux``."""
    table = _behavior_table(handle, behavior)

    def act(cell, pretest, x, h, term, rng):
        a = _draw(rng, table[cell])
        return a, float(table[cell, a])

    trajs = []
    for ep in range(n_episodes):
        rows = handle.episode(act, make_rng(seed, ep))
        cols = list(zip(*rows))
        aux = {"pretest": cols[5], "anxiety": cols[6], "thinking": cols[7], "pre_termination": cols[8]}
        trajs.append(Trajectory(*cols[:5], aux=aux))
    return Dataset(tuple(trajs), 1.0, handle.n_states, 3, "tutorbot")


def tutorbot_steps(traj: Trajectory) -> list[TutorBotStep]:
    a = traj.aux
    return [
        TutorBotStep(int(p), float(x), float(h), int(f))
        for p, x, h, f in zip(a["pretest"], a["anxiety"], a["thinking"], a["pre_termination"])
    ]


def tutorbot_policy_value(handle: TutorBot, policy, n_episodes: int = 100_000, seed: int = 0):
    """Monte-Carlo true value (mean, standard error) of a TutorBot policy."""
    table = _behavior_table(handle, policy)
    G = handle.simulate_batch(table, n_episodes, make_rng(seed))
    return float(G.mean()), float(G.std(ddof=1) / math.sqrt(n_episodes))
