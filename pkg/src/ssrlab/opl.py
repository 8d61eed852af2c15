"""Tabular offline policy learners.

Every learner is a pure function of its dataset, hyperparameters and seed.
States with nothing to learn from fall back to the uniform distribution and
add a message to ``TabularPolicy.flags``; no learner ever assigns optimistic
values to untried actions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import AHSpec, Dataset, TabularPolicy, TabularQ, make_rng

CONVERGENCE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class MleModel:
    counts: np.ndarray  # N(s, a)
    transition: np.ndarray  # p_hat(s' | s, a); all-zero rows where N(s, a) = 0
    reward_sa: np.ndarray  # mean reward logged for (s, a)
    reward_state: np.ndarray  # mean reward logged on landing in s
    initial_dist: np.ndarray  # empirical first-state distribution
    propensity: np.ndarray  # mean logged behavior propensity of (s, a); 0 if unobserved
    gamma: float

    @property
    def observed_mask(self) -> np.ndarray:
        return self.counts >= 1

    @property
    def transition_mle(self) -> np.ndarray:
        return self.transition

    @property
    def reward_mle(self) -> np.ndarray:
        """Per-state mean reward, as used by the horizon-h planners' state-reward reading."""
        return self.reward_state

    @property
    def n_states(self) -> int:
        return self.counts.shape[0]

    @property
    def n_actions(self) -> int:
        return self.counts.shape[1]

    @property
    def behavior_freq(self) -> np.ndarray:
        """Empirical behavior policy mu_hat(a | s); zero rows at unvisited states."""
        visits = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, visits, out=np.zeros(self.counts.shape), where=visits > 0)


def _sa_sums(dataset: Dataset, values, idx=None):
    f = dataset.flat
    S, A = dataset.n_states, dataset.n_actions
    sa = f.states * A + f.actions if idx is None else idx
    return np.bincount(sa, weights=values, minlength=S * A).reshape(S, A)


def fit_mle_mdp(dataset: Dataset) -> MleModel:
    f = dataset.flat
    S, A = dataset.n_states, dataset.n_actions
    sa = f.states * A + f.actions
    counts = np.bincount(sa, minlength=S * A).reshape(S, A)
    trans = np.bincount(sa * S + f.next_states, minlength=S * A * S).reshape(S, A, S).astype(float)
    nz = counts > 0
    trans[nz] /= counts[nz][:, None]
    reward_sa = np.zeros((S, A))
    reward_sa[nz] = _sa_sums(dataset, f.rewards, sa)[nz] / counts[nz]
    prop = np.zeros((S, A))
    prop[nz] = _sa_sums(dataset, f.propensities, sa)[nz] / counts[nz]
    landed = np.bincount(f.next_states, minlength=S)
    reward_state = np.divide(
        np.bincount(f.next_states, weights=f.rewards, minlength=S),
        landed,
        out=np.zeros(S),
        where=landed > 0,
    )
    first = f.states[f.offsets]
    d0 = np.bincount(first, minlength=S) / len(dataset)
    return MleModel(counts, trans, reward_sa, reward_state, d0, prop, dataset.gamma)


def _masked_greedy(Q: np.ndarray, mask: np.ndarray, label: str):
    """Greedy deterministic policy over ``mask``; lowest index wins ties."""
    S, A = Q.shape
    probs = np.zeros((S, A))
    flags = []
    masked = np.where(mask, Q, -np.inf)
    has = mask.any(axis=1)
    best = np.argmax(masked, axis=1)
    probs[has, best[has]] = 1.0
    empty = np.flatnonzero(~has)
    if len(empty):
        probs[empty] = 1.0 / A
        flags.append(f"{label}: no admissible action at states {empty.tolist()}, uniform fallback")
    return TabularPolicy(probs, tuple(flags))


def plan_horizon_q(model: MleModel, h: int) -> np.ndarray:
    """Action values for lookaheads 1..h on the MLE model, shape (h, S, A).

    The max in each backup ranges only over observed actions; states with
    none observed contribute value 0.
    """
    mask = model.observed_mask
    V = np.zeros(model.n_states)
    out = np.zeros((h,) + model.reward_sa.shape)
    for k in range(h):
        Q = model.reward_sa + model.gamma * (model.transition @ V)
        out[k] = Q
        V = np.where(mask, Q, -np.inf).max(axis=1)
        V[~mask.any(axis=1)] = 0.0
    return out


TIE_RTOL = 1e-12


def plan_horizon_h(model: MleModel, h: int, env_horizon: int | None = None) -> TabularPolicy:
    """Greedy stationary policy for the h-step value of the MLE model.

    Actions tied on the h-step value are separated by the (h-1)-step value,
    then the (h-2)-step value and so on, so a value reachable sooner wins;
    any remaining tie goes to the lowest action index.
    """
    H = env_horizon if env_horizon is not None else h
    if not 1 <= h <= H:
        raise ValueError(f"horizon h={h} must lie in [1, {H}]")
    return _lexicographic_greedy(plan_horizon_q(model, h), model.observed_mask, f"horizon-{h}")


def _lexicographic_greedy(iterates: np.ndarray, mask: np.ndarray, label: str) -> TabularPolicy:
    """Greedy over the last iterate, ties broken by earlier (shorter-lookahead) iterates."""
    cand = mask.copy()
    for Q in iterates[::-1]:
        Qk = np.where(cand, Q, -np.inf)
        best = Qk.max(axis=1, keepdims=True)
        tol = np.where(np.isfinite(best), TIE_RTOL * np.maximum(1.0, np.abs(best)), 0.0)
        cand &= Qk >= best - tol
    return _masked_greedy(np.where(cand, 0.0, -1.0), mask, label)


def fit_bc(dataset: Dataset, safety_alpha: float = 0.0) -> TabularPolicy:
    """Empirical action frequencies with actions below ``safety_alpha`` removed."""
    if not 0.0 <= safety_alpha < 1.0:
        raise ValueError("safety_alpha must lie in [0, 1)")
    mu = fit_mle_mdp(dataset).behavior_freq
    S, A = mu.shape
    visited = mu.sum(axis=1) > 0
    kept = np.where(mu >= safety_alpha, mu, 0.0)
    totals = kept.sum(axis=1)
    flags = []
    wiped = np.flatnonzero(visited & (totals <= 0))
    if len(wiped):
        kept[wiped] = mu[wiped]
        totals[wiped] = 1.0
        flags.append(f"bc: threshold removed every action at states {wiped.tolist()}, ignored there")
    probs = np.full((S, A), 1.0 / A)
    probs[visited] = kept[visited] / totals[visited, None]
    if not visited.all():
        flags.append(f"bc: unvisited states {np.flatnonzero(~visited).tolist()}, uniform fallback")
    return TabularPolicy(probs, tuple(flags))


def bcq_admissible(model: MleModel, delta: float) -> np.ndarray:
    """Pairs (s, a) observed at least once with mu_hat(a | s) > delta."""
    return model.observed_mask & (model.behavior_freq > delta)


def _constrained_q_iteration(model, admissible, n_iterations, familiar=None):
    """Exact constrained backups from Q = 0; returns every iterate, shape (k, S, A)."""
    S, A = model.counts.shape
    Q = np.zeros((S, A))
    backup_mask = admissible if familiar is None else admissible & familiar
    iterates = []
    for _ in range(n_iterations):
        # zeta o Q, then the max over the admissible set (0 where that set is empty)
        inner = np.where(backup_mask, Q, 0.0)
        V = np.where(admissible, inner, -np.inf).max(axis=1)
        V[~admissible.any(axis=1)] = 0.0
        new = np.where(admissible, model.reward_sa + model.gamma * (model.transition @ V), 0.0)
        change = np.max(np.abs(new - Q))
        Q = new
        iterates.append(Q)
        if change < CONVERGENCE_TOL:
            break
    if not iterates:
        iterates.append(Q)
    return np.array(iterates)


def fit_bcq_tabular(
    dataset: Dataset, bcq_delta: float, gamma: float | None = None, n_iterations: int = 100, seed: int = 0
):
    """Batch-constrained Q iteration with exact (learning rate 1) backups.

    Only admissible pairs are updated and the backup maximises over
    admissible next actions.  With ``gamma == 1`` choose ``n_iterations``
    equal to the horizon.  ``seed`` is accepted for interface uniformity;
    the procedure is deterministic.
    """
    if not 0.0 <= bcq_delta < 1.0:
        raise ValueError("bcq_delta must lie in [0, 1)")
    model = _with_gamma(fit_mle_mdp(dataset), gamma)
    adm = bcq_admissible(model, bcq_delta)
    Qs = _constrained_q_iteration(model, adm, n_iterations)
    return _lexicographic_greedy(Qs, adm, "bcq"), TabularQ(Qs[-1])


def fit_mbs_tabular(
    dataset: Dataset,
    bcq_delta: float,
    count_beta: int,
    gamma: float | None = None,
    n_iterations: int = 100,
):
    """BCQ backup with next-state values masked to 0 for pairs seen fewer than ``count_beta`` times."""
    if count_beta < 1:
        raise ValueError("count_beta must be >= 1")
    if not 0.0 <= bcq_delta < 1.0:
        raise ValueError("bcq_delta must lie in [0, 1)")
    model = _with_gamma(fit_mle_mdp(dataset), gamma)
    adm = bcq_admissible(model, bcq_delta)
    Qs = _constrained_q_iteration(model, adm, n_iterations, familiar=model.counts >= count_beta)
    return _lexicographic_greedy(Qs, adm, "mbs"), TabularQ(Qs[-1])


def _with_gamma(model: MleModel, gamma):
    if gamma is None or gamma == model.gamma:
        return model
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    return MleModel(
        model.counts, model.transition, model.reward_sa, model.reward_state,
        model.initial_dist, model.propensity, gamma,
    )


def hoeffding_penalty(counts, penalty_beta: float, confidence_delta: float) -> np.ndarray:
    """beta * sqrt(2 log(1/delta) / N); infinite for unseen pairs unless beta is 0."""
    counts = np.asarray(counts, dtype=float)
    if penalty_beta == 0:
        return np.zeros_like(counts)
    with np.errstate(divide="ignore"):
        eps = penalty_beta * np.sqrt(2.0 * math.log(1.0 / confidence_delta) / counts)
    return np.where(counts > 0, eps, np.inf)


def pessimistic_reward(
    reward, counts, penalty_beta: float, confidence_delta: float, clip=(-1.0, 1.0)
) -> np.ndarray:
    lo, hi = clip
    eps = hoeffding_penalty(counts, penalty_beta, confidence_delta)
    return np.minimum(np.maximum(np.asarray(reward) - eps, lo), hi)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_pmdp_ensemble(
    dataset: Dataset,
    n_ensembles: int,
    penalty_beta: float,
    confidence_delta: float,
    temperature: float,
    n_iterations: int,
    seed: int,
    clip=(-1.0, 1.0),
) -> TabularPolicy:
    """Pessimistic ensemble-MDP value iteration with a softmax policy.

    Each iteration reshuffles trajectories round-robin into ``n_ensembles``
    shards, refits one MLE model per shard, and backs up every state through
    a uniformly drawn member using Hoeffding-penalized rewards.
    """
    if n_ensembles < 1:
        raise ValueError("n_ensembles must be >= 1")
    if penalty_beta < 0:
        raise ValueError("penalty_beta must be >= 0")
    if not 0.0 < confidence_delta < 1.0:
        raise ValueError("confidence_delta must lie in (0, 1)")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    f = dataset.flat
    S, A, n = dataset.n_states, dataset.n_actions, len(dataset)
    N = n_ensembles
    gamma = dataset.gamma
    rng = make_rng(seed)
    Q = np.zeros((S, A))
    flags = []
    sa = f.states * A + f.actions
    unseen_total = 0
    for _ in range(n_iterations):
        shard = np.empty(n, dtype=np.int64)
        shard[rng.permutation(n)] = np.arange(n) % N
        member = shard[f.traj]
        cnt = np.bincount(member * S * A + sa, minlength=N * S * A).reshape(N, S, A)
        rsum = np.bincount(member * S * A + sa, weights=f.rewards, minlength=N * S * A).reshape(N, S, A)
        tr = np.bincount(
            (member * S * A + sa) * S + f.next_states, minlength=N * S * A * S
        ).reshape(N, S, A, S).astype(float)
        seen = cnt > 0
        unseen_total += int((~seen).sum())
        r_hat = np.divide(rsum, cnt, out=np.zeros(rsum.shape), where=seen)
        tr = np.divide(tr, cnt[..., None], out=np.zeros(tr.shape), where=seen[..., None])
        r_pess = pessimistic_reward(r_hat, cnt, penalty_beta, confidence_delta, clip)
        pick = rng.integers(0, N, size=S)
        V = Q.max(axis=1)
        rows = np.arange(S)
        Q = r_pess[pick, rows] + gamma * (tr[pick, rows] @ V)
    if unseen_total:
        flags.append(f"pmdp: {unseen_total} member/pair cells unobserved, pessimistic reward applied")
    return TabularPolicy(_softmax_rows(Q / temperature), tuple(flags))


# --- POIS -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PoisParams:
    theta: np.ndarray | None = None
    lambda_ess: float = 0.0
    safety_alpha: float = 0.0
    learning_rate: float = 0.1
    epochs: int = 20
    minibatch_size: int = 0

    def __post_init__(self):
        if self.lambda_ess < 0:
            raise ValueError("lambda_ess must be >= 0")
        if not 0.0 <= self.safety_alpha < 1.0:
            raise ValueError("safety_alpha must lie in [0, 1)")
        if self.minibatch_size < 0 or self.epochs < 0:
            raise ValueError("epochs and minibatch_size must be >= 0")


@dataclass(frozen=True, eq=False)
class PoisBatch:
    """Per-trajectory sufficient statistics for the POIS objective."""

    counts: np.ndarray  # (n, S, A) visits of each pair per trajectory
    log_behavior: np.ndarray  # (n,) sum of log adjusted propensities
    valid: np.ndarray  # (n,) False when a step was removed by the safety threshold
    returns: np.ndarray

    def take(self, idx) -> "PoisBatch":
        return PoisBatch(self.counts[idx], self.log_behavior[idx], self.valid[idx], self.returns[idx])

    def __len__(self):
        return len(self.returns)


def pois_batch(dataset: Dataset, safety_alpha: float = 0.0) -> PoisBatch:
    """Sufficient statistics with the safety threshold applied to logged propensities.

    Propensities not above ``safety_alpha`` are zeroed and the surviving
    probabilities at that state renormalized; a trajectory that used a zeroed
    action cannot occur under the adjusted behavior and gets weight 0.
    """
    f = dataset.flat
    S, A, n = dataset.n_states, dataset.n_actions, len(dataset)
    counts = np.zeros((n, S, A))
    np.add.at(counts, (f.traj, f.states, f.actions), 1.0)
    model = fit_mle_mdp(dataset)
    removed_pairs = model.observed_mask & (model.propensity <= safety_alpha)
    removed_mass = np.where(removed_pairs, model.propensity, 0.0).sum(axis=1)
    keep = ~removed_pairs[f.states, f.actions]
    adj = np.where(keep, f.propensities / np.maximum(1.0 - removed_mass[f.states], 1e-300), 1.0)
    log_b = np.bincount(f.traj, weights=np.log(adj), minlength=n)
    valid = np.bincount(f.traj, weights=~keep, minlength=n) == 0
    return PoisBatch(counts, log_b, valid, np.asarray(dataset.returns, dtype=float))


def _weights(theta, batch: PoisBatch):
    logpi = theta - np.log(np.sum(np.exp(theta - theta.max(axis=1, keepdims=True)), axis=1, keepdims=True)) \
        - theta.max(axis=1, keepdims=True)
    logw = np.tensordot(batch.counts, logpi, axes=([1, 2], [0, 1])) - batch.log_behavior
    return np.where(batch.valid, np.exp(logw), 0.0), np.exp(logpi)


def pois_objective(theta: np.ndarray, batch: PoisBatch, lambda_ess: float, estimator: str = "wis") -> float:
    """J = V_hat(pi_theta) - lambda / ESS, with ESS = (sum w)^2 / sum w^2."""
    w, _ = _weights(theta, batch)
    total = w.sum()
    if total <= 0:
        raise ValueError("all importance weights are zero")
    G = batch.returns
    value = float(w @ G / total) if estimator == "wis" else float(w @ G / len(w))
    ess = total**2 / np.sum(w**2)
    return value - lambda_ess / ess


def pois_gradient(theta: np.ndarray, batch: PoisBatch, lambda_ess: float, estimator: str = "wis") -> np.ndarray:
    """Analytic gradient of ``pois_objective`` with respect to the softmax logits."""
    w, pi = _weights(theta, batch)
    total = w.sum()
    if total <= 0:
        raise ValueError("all importance weights are zero")
    G = batch.returns
    if estimator == "wis":
        value = w @ G / total
        coef = w * (G - value) / total
    elif estimator == "is":
        coef = w * G / len(w)
    else:
        raise ValueError(f"POIS estimator must be 'is' or 'wis', got {estimator!r}")
    if lambda_ess:
        sq = np.sum(w**2)
        ess = total**2 / sq
        d_ess = (2.0 * total * sq * w - total**2 * 2.0 * w**2) / sq**2
        coef = coef + lambda_ess / ess**2 * d_ess
    # d w_i / d theta[s, a] = w_i * (C_i[s, a] - n_i(s) pi(a | s))
    Csum = np.tensordot(coef, batch.counts, axes=1)
    return Csum - Csum.sum(axis=1, keepdims=True) * pi


def numerical_gradient(fn: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn`` at ``theta``."""
    grad = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        up = theta.copy()
        dn = theta.copy()
        up[idx] += step
        dn[idx] -= step
        grad[idx] = (fn(up) - fn(dn)) / (2 * step)
    return grad


def fit_pois(
    dataset: Dataset,
    params: PoisParams,
    estimator: str = "wis",
    seed: int = 0,
    init: TabularPolicy | None = None,
) -> TabularPolicy:
    """Gradient ascent on the ESS-penalized importance-sampling objective."""
    S, A = dataset.n_states, dataset.n_actions
    if init is not None:
        theta = np.log(np.maximum(init.probs, 1e-6))
    elif params.theta is not None:
        theta = np.array(params.theta, dtype=float)
    else:
        theta = np.zeros((S, A))
    batch = pois_batch(dataset, params.safety_alpha)
    rng = make_rng(seed)
    n = len(batch)
    skipped = 0
    for _ in range(params.epochs):
        if params.minibatch_size:
            order = rng.permutation(n)
            chunks = [order[i : i + params.minibatch_size] for i in range(0, n, params.minibatch_size)]
        else:
            chunks = [None]
        for idx in chunks:
            b = batch if idx is None else batch.take(idx)
            w, _ = _weights(theta, b)
            if w.sum() <= 0:
                skipped += 1
                continue
            theta = theta + params.learning_rate * pois_gradient(theta, b, params.lambda_ess, estimator)
    flags = (f"pois: {skipped} batches skipped with zero total weight",) if skipped else ()
    return TabularPolicy(_softmax_rows(theta), flags)


# --- learner registry -----------------------------------------------------

REQUIRED = object()

LEARNER_SCHEMAS: dict[str, dict[str, tuple[type, object]]] = {
    "horizon-h": {"h": (int, REQUIRED)},
    "bc": {"safety_alpha": (float, 0.0)},
    "bcq": {"delta": (float, REQUIRED), "n_iterations": (int, REQUIRED)},
    "mbs": {"delta": (float, REQUIRED), "count_beta": (int, REQUIRED), "n_iterations": (int, REQUIRED)},
    "pmdp": {
        "n_ensembles": (int, REQUIRED),
        "penalty_beta": (float, REQUIRED),
        "confidence_delta": (float, 0.1),
        "temperature": (float, REQUIRED),
        "n_iterations": (int, REQUIRED),
    },
}
_POIS_SCHEMA = {
    "safety_alpha": (float, 0.0),
    "lambda_ess": (float, 0.0),
    "learning_rate": (float, 0.1),
    "epochs": (int, 20),
    "estimator": (str, "wis"),
    "minibatch_size": (int, 0),
}
LEARNER_SCHEMAS["pois"] = dict(_POIS_SCHEMA)
LEARNER_SCHEMAS["bc-pois"] = dict(_POIS_SCHEMA)
LEARNER_SCHEMAS["bc-mini-pois"] = dict(_POIS_SCHEMA, minibatch_size=(int, 4))


class AHSpecError(ValueError):
    pass


def resolve_params(ah: AHSpec) -> dict:
    """Validated hyperparameters with defaults filled in."""
    try:
        schema = LEARNER_SCHEMAS[ah.algorithm_id]
    except KeyError:
        raise AHSpecError(
            f"unknown algorithm {ah.algorithm_id!r}; expected one of {sorted(LEARNER_SCHEMAS)}"
        ) from None
    given = ah.kwargs
    extra = set(given) - set(schema)
    if extra:
        raise AHSpecError(f"{ah.display_label}: unknown hyperparameters {sorted(extra)}")
    out = {}
    for name, (typ, default) in schema.items():
        if name in given:
            v = given[name]
            if typ is int and not (isinstance(v, (int, np.integer)) and not isinstance(v, bool)):
                raise AHSpecError(f"{ah.display_label}: {name} must be an integer, got {v!r}")
            if typ is float and not isinstance(v, (int, float, np.integer, np.floating)):
                raise AHSpecError(f"{ah.display_label}: {name} must be a number, got {v!r}")
            out[name] = typ(v)
        elif default is REQUIRED:
            raise AHSpecError(f"{ah.display_label}: missing hyperparameter {name!r}")
        else:
            out[name] = default
    return out


def validate_ah(ah: AHSpec) -> AHSpec:
    resolve_params(ah)
    return ah


def fit_ah(ah: AHSpec, dataset: Dataset, seed: int = 0) -> TabularPolicy:
    """Train the learner named by ``ah`` on ``dataset``."""
    p = resolve_params(ah)
    alg = ah.algorithm_id
    if alg == "horizon-h":
        return plan_horizon_h(fit_mle_mdp(dataset), p["h"], max(p["h"], dataset.horizon))
    if alg == "bc":
        return fit_bc(dataset, p["safety_alpha"])
    if alg == "bcq":
        return fit_bcq_tabular(dataset, p["delta"], None, p["n_iterations"], seed)[0]
    if alg == "mbs":
        return fit_mbs_tabular(dataset, p["delta"], p["count_beta"], None, p["n_iterations"])[0]
    if alg == "pmdp":
        return fit_pmdp_ensemble(
            dataset, p["n_ensembles"], p["penalty_beta"], p["confidence_delta"],
            p["temperature"], p["n_iterations"], seed,
        )
    params = PoisParams(
        lambda_ess=p["lambda_ess"], safety_alpha=p["safety_alpha"],
        learning_rate=p["learning_rate"], epochs=p["epochs"], minibatch_size=p["minibatch_size"],
    )
    init = fit_bc(dataset, p["safety_alpha"]) if alg in ("bc-pois", "bc-mini-pois") else None
    return fit_pois(dataset, params, p["estimator"], seed, init)
