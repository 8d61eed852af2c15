"""Single-split failure on the chain: analytic probabilities and a Monte-Carlo harness.

The harness replays split-select-retrain with the horizon-h planners on the
chain and records whether the deployed policy is optimal.  On the chain a
dataset is fully described by the multiset of action codes of its
trajectories, and a learned policy depends only on which state-action pairs
the training side observed.  The harness exploits both facts: policies are
cached by observed-pair mask (computed with the ordinary MLE fit and
planner on a cache miss) and every WIS estimate is a dot product between a
per-code weight vector and the validation side's code counts.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .core import Dataset, TabularPolicy, derive_seed, make_rng
from .envs import (
    ChainConfig,
    TabularEnv,
    build_expected_composition_chain_dataset,
    chain_trajectories,
    exact_policy_value,
    expected_copies,
    make_chain_env,
    rollout,
    uniform_behavior_policy,
)
from .opl import fit_mle_mdp, plan_horizon_h

PARTITION_MODES = ("hypergeometric", "uniform")
OPTIMAL_TOL = 1e-9


def _check_sizes(n_copies: int, n_total: int):
    if n_total < 2 or n_total % 2:
        raise ValueError(f"n_total must be even and >= 2, got {n_total}")
    if not 0 <= n_copies <= n_total // 2:
        raise ValueError(f"n_copies must lie in [0, {n_total // 2}], got {n_copies}")


def partition_distribution(n_copies: int, n_total: int, mode: str = "hypergeometric") -> np.ndarray:
    """Probability that ``k`` of ``n_copies`` marked trajectories land in the train half, k = 0..n_copies.

    ``mode="uniform"`` gives each of the ``n_copies + 1`` partitions equal
    probability instead of the hypergeometric law.
    """
    _check_sizes(n_copies, n_total)
    if mode == "uniform":
        return np.full(n_copies + 1, 1.0 / (n_copies + 1))
    if mode != "hypergeometric":
        raise ValueError(f"mode must be one of {PARTITION_MODES}, got {mode!r}")
    half = n_total // 2
    denom = math.comb(n_total, half)
    return np.array(
        [float(Fraction(math.comb(n_copies, k) * math.comb(n_total - n_copies, half - k), denom))
         for k in range(n_copies + 1)]
    )


def single_split_failure_prob(n_copies: int, n_total: int, mode: str = "hypergeometric") -> float:
    """P(no marked copy in train) + P(no marked copy in valid); 1 when there are no copies."""
    p = partition_distribution(n_copies, n_total, mode)
    if n_copies == 0:
        return 1.0
    return float(p[0] + p[-1])


def successful_split_prob(n_copies: int, n_total: int, mode: str = "hypergeometric") -> float:
    """P(at least one marked copy on each side)."""
    if n_copies == 0:
        _check_sizes(n_copies, n_total)
        return 0.0
    return 1.0 - single_split_failure_prob(n_copies, n_total, mode)


def binomial_majority_bound(K: int, p: float) -> float:
    """P(Binomial(K, p) >= ceil(K / 2))."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return float(sum(math.comb(K, j) * p**j * (1.0 - p) ** (K - j) for j in range(math.ceil(K / 2), K + 1)))


@dataclass(frozen=True)
class TheoremConfig:
    H: int = 6
    n_episodes: int = 200
    n_copies: int | None = None
    K_values: tuple[int, ...] = (1, 2, 5, 15)
    n_trials: int = 20_000
    seed: int = 0
    ratio: float = 0.5
    dataset_mode: str = "expected"
    partition_mode: str = "hypergeometric"
    high_reward: float = 201.0
    low_reward: float = 1.0 / 6.0

    def __post_init__(self):
        object.__setattr__(self, "K_values", tuple(int(k) for k in self.K_values))
        if self.n_copies is None:
            object.__setattr__(self, "n_copies", expected_copies(self.n_episodes, self.H))
        if not 0 <= self.n_copies <= self.n_episodes:
            raise ValueError("n_copies must lie in [0, n_episodes]")
        if self.n_episodes % 2:
            raise ValueError("n_episodes must be even")
        if not self.K_values or min(self.K_values) < 1:
            raise ValueError("K_values must be non-empty positive integers")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if self.dataset_mode not in ("expected", "rollout"):
            raise ValueError("dataset_mode must be 'expected' or 'rollout'")
        if self.partition_mode not in PARTITION_MODES:
            raise ValueError(f"partition_mode must be one of {PARTITION_MODES}")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("ratio must lie in (0, 1)")

    @property
    def chain(self) -> ChainConfig:
        return ChainConfig(self.H, self.low_reward, self.high_reward)


@dataclass(frozen=True, eq=False)
class TheoremResult:
    config: TheoremConfig
    analytic: dict
    failure_rates: dict  # K -> empirical failure rate
    failure_se: dict  # K -> binomial standard error
    paired_se: dict  # (K_a, K_b) -> standard error of rate(K_b) - rate(K_a) over shared trials
    ess_fraction: float  # fraction of first splits that are successful
    no_evaluable: dict  # K -> trials where every AH was undefined (counted as failures)
    failures: np.ndarray = field(repr=False)  # (n_trials, len(K_values)) booleans
    top_in_train: np.ndarray = field(repr=False)  # marked copies in the first split's train side
    wall_time: float = 0.0

    def monotone_within(self, n_se: float = 2.0) -> bool:
        """Failure rate non-increasing in K up to ``n_se`` paired standard errors."""
        Ks = self.config.K_values
        return all(
            self.failure_rates[b] - self.failure_rates[a] <= n_se * self.paired_se[(a, b)]
            for a, b in zip(Ks, Ks[1:])
        )


def analytic_summary(n_copies: int, n_total: int, K_values=(1, 2, 5, 15), mode: str = "hypergeometric") -> dict:
    p_ss = successful_split_prob(n_copies, n_total, mode)
    out = {
        "partition": partition_distribution(n_copies, n_total, mode).tolist(),
        "single_split_failure": single_split_failure_prob(n_copies, n_total, mode),
        "successful_split": p_ss,
    }
    for K in K_values:
        out[f"majority_bound_K{K}"] = binomial_majority_bound(K, p_ss)
    return out


class _ChainOracle:
    """Per-code sufficient statistics and cached planner output for one chain."""

    def __init__(self, env: TabularEnv):
        self.env = env
        self.H = env.horizon
        self.trajs = chain_trajectories(env)
        n_codes = len(self.trajs)
        S, A = env.n_states, env.n_actions
        self.pair_hits = np.zeros((n_codes, S * A), dtype=bool)
        self.returns = np.zeros(n_codes)
        for c, tr in enumerate(self.trajs):
            self.pair_hits[c, tr.states * A + tr.actions] = True
            self.returns[c] = tr.rewards.sum()
        self._policies: dict[bytes, tuple] = {}

    def codes_of(self, dataset: Dataset) -> np.ndarray:
        bits = 1 << np.arange(self.H - 1, -1, -1)
        return np.array([int(tr.actions @ bits) for tr in dataset])

    def plan(self, present: np.ndarray):
        """(per-code WIS weights (H, n_codes), optimality flags (H,)) for the distinct codes ``present``."""
        mask = self.pair_hits[present].any(axis=0)
        key = mask.tobytes()
        hit = self._policies.get(key)
        if hit is None:
            ds = Dataset(tuple(self.trajs[c] for c in present), self.env.gamma,
                         self.env.n_states, self.env.n_actions, self.env.tag)
            model = fit_mle_mdp(ds)
            weights, optimal = [], []
            for h in range(1, self.H + 1):
                pi = plan_horizon_h(model, h, self.H)
                weights.append(self._code_weights(pi))
                optimal.append(abs(exact_policy_value(self.env, pi) - self.env.reward.max()) <= OPTIMAL_TOL)
            hit = (np.array(weights), np.array(optimal))
            self._policies[key] = hit
        return hit

    def _code_weights(self, pi: TabularPolicy) -> np.ndarray:
        w = np.ones(len(self.trajs))
        for c, tr in enumerate(self.trajs):
            w[c] = np.prod(pi.probs[tr.states, tr.actions] / tr.propensities)
        return w


def _trial_codes(oracle: _ChainOracle, cfg: TheoremConfig, trial: int) -> np.ndarray:
    seed = derive_seed(cfg.seed, trial)
    if cfg.dataset_mode == "expected":
        ds = build_expected_composition_chain_dataset(oracle.env, cfg.n_episodes, seed, cfg.n_copies)
    else:
        ds = rollout(oracle.env, uniform_behavior_policy(oracle.env), cfg.n_episodes, seed)
    return oracle.codes_of(ds)


def run_trial(oracle: _ChainOracle, cfg: TheoremConfig, trial: int):
    """Scores (H, K_max), failure flag per K, no-evaluable flag per K, marked copies in first train side."""
    codes = _trial_codes(oracle, cfg, trial)
    n = len(codes)
    n_codes = len(oracle.trajs)
    top = n_codes - 1
    cut = math.floor(n * cfg.ratio)
    K_max = max(cfg.K_values)
    split_seed = derive_seed(cfg.seed, trial, 1)
    scores = np.full((oracle.H, K_max), np.nan)
    first_top = -1
    for k in range(K_max):
        perm = make_rng(split_seed, k).permutation(n)
        train, valid = codes[perm[:cut]], codes[perm[cut:]]
        if k == 0:
            first_top = int(np.sum(train == top))
        weights, _ = oracle.plan(np.unique(train))
        counts = np.bincount(valid, minlength=n_codes)
        num = weights @ (counts * oracle.returns)
        den = weights @ counts
        scores[:, k] = np.divide(num, den, out=np.full(oracle.H, np.nan), where=den > 0)
    _, full_optimal = oracle.plan(np.unique(codes))
    fail = np.zeros(len(cfg.K_values), dtype=bool)
    none = np.zeros(len(cfg.K_values), dtype=bool)
    for j, K in enumerate(cfg.K_values):
        block = scores[:, :K]
        ok = np.isfinite(block)
        cnt = ok.sum(axis=1)
        if not cnt.any():
            none[j] = fail[j] = True
            continue
        agg = np.where(cnt > 0, np.where(ok, block, 0.0).sum(axis=1) / np.maximum(cnt, 1), -np.inf)
        fail[j] = not full_optimal[int(np.argmax(agg))]
    return scores, fail, none, first_top


def _run_range(cfg: TheoremConfig, start: int, stop: int):
    oracle = _ChainOracle(make_chain_env(cfg.chain))
    nK = len(cfg.K_values)
    failures = np.zeros((stop - start, nK), dtype=bool)
    none = np.zeros((stop - start, nK), dtype=bool)
    top = np.zeros(stop - start, dtype=np.int64)
    for i, t in enumerate(range(start, stop)):
        _, failures[i], none[i], top[i] = run_trial(oracle, cfg, t)
    return failures, none, top


def run_mc_experiment(config: TheoremConfig = TheoremConfig(), workers: int = 1) -> TheoremResult:
    """Replay one-split and RRS-K selection on fresh chain datasets.

    Trial ``t`` builds its dataset from ``derive_seed(seed, t)`` and its
    partitions from ``derive_seed(seed, t, 1)``; the ``K``-split run uses the
    first ``K`` partitions of the trial, so runs with different ``K`` are
    paired and ``K = 1`` is the one-split procedure.  A trial in which no AH
    has a defined estimate counts as a failure.  Results do not depend on
    ``workers``.
    """
    start = time.perf_counter()
    cfg = config
    nK = len(cfg.K_values)
    if workers <= 1:
        parts = [_run_range(cfg, 0, cfg.n_trials)]
    else:
        edges = np.linspace(0, cfg.n_trials, 4 * workers + 1).astype(int)
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futures = [ex.submit(_run_range, cfg, int(a), int(b)) for a, b in zip(edges, edges[1:]) if b > a]
            parts = [f.result() for f in futures]
    failures = np.concatenate([p[0] for p in parts])
    none = np.concatenate([p[1] for p in parts])
    top_in_train = np.concatenate([p[2] for p in parts])
    n = cfg.n_trials
    rates = {K: float(failures[:, j].mean()) for j, K in enumerate(cfg.K_values)}
    se = {K: math.sqrt(rates[K] * (1 - rates[K]) / n) for K in cfg.K_values}
    paired = {}
    for a in range(nK):
        for b in range(a + 1, nK):
            d = failures[:, b].astype(float) - failures[:, a].astype(float)
            paired[(cfg.K_values[a], cfg.K_values[b])] = float(d.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    half = cfg.n_episodes - math.floor(cfg.n_episodes * cfg.ratio)
    c = cfg.n_copies
    ess = float(np.mean((top_in_train >= 1) & (top_in_train <= c - 1))) if c >= 1 else 0.0
    analytic = {}
    if c <= cfg.n_episodes // 2 and half * 2 == cfg.n_episodes:
        analytic = analytic_summary(c, cfg.n_episodes, cfg.K_values, cfg.partition_mode)
    return TheoremResult(
        cfg, analytic, rates, se, paired, ess,
        {K: int(none[:, j].sum()) for j, K in enumerate(cfg.K_values)},
        failures, top_in_train, time.perf_counter() - start,
    )
