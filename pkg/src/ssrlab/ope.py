"""Off-policy estimators over logged datasets.

All estimators use the propensities recorded in the data, never a behavior
policy object.  A target policy that puts zero mass on a logged action gives
that trajectory weight 0.
"""
from __future__ import annotations

import logging
import math

import numpy as np

from .core import Dataset, TabularPolicy, TabularQ, Trajectory
from .opl import fit_mle_mdp

log = logging.getLogger(__name__)

DEFAULT_CLIP = 1e4


class UndefinedEstimateError(ValueError):
    """The estimator has no overlap with the target policy on this dataset."""


def importance_weight(trajectory: Trajectory, policy: TabularPolicy) -> float:
    ratio = policy.probs[trajectory.states, trajectory.actions] / trajectory.propensities
    return float(np.prod(ratio))


def step_ratios(policy: TabularPolicy, dataset: Dataset) -> np.ndarray:
    f = dataset.flat
    if policy.n_states < dataset.n_states or policy.n_actions != dataset.n_actions:
        raise ValueError("policy does not cover the dataset's state/action space")
    return policy.probs[f.states, f.actions] / f.propensities


def trajectory_weights(policy: TabularPolicy, dataset: Dataset) -> np.ndarray:
    """Cumulative importance weight of every trajectory."""
    f = dataset.flat
    return np.multiply.reduceat(step_ratios(policy, dataset), f.offsets)


def is_estimate(policy: TabularPolicy, dataset: Dataset) -> float:
    w = trajectory_weights(policy, dataset)
    return float(np.sum(w * dataset.returns) / len(dataset))


def clipped_is_estimate(policy: TabularPolicy, dataset: Dataset, clip_max: float = DEFAULT_CLIP) -> float:
    if not clip_max > 0:
        raise ValueError("clip_max must be positive")
    w = np.minimum(trajectory_weights(policy, dataset), clip_max)
    return float(np.sum(w * dataset.returns) / len(dataset))


def wis_from_weights(w: np.ndarray, returns: np.ndarray) -> float:
    total = float(np.sum(w))
    if total <= 0.0:
        raise UndefinedEstimateError("WIS is undefined: no trajectory overlaps the target policy")
    # normalize first: a lone nonzero weight becomes exactly 1.0
    return float(np.sum((w / total) * returns))


def wis_estimate(policy: TabularPolicy, dataset: Dataset) -> float:
    """Self-normalized importance sampling, ``sum_i w_i G_i / sum_j w_j``.

    With a single overlapping trajectory the weight cancels and the estimate
    is that trajectory's return whatever the target policy is.
    """
    return wis_from_weights(trajectory_weights(policy, dataset), dataset.returns)


def cwpdis_terms(policy: TabularPolicy, dataset: Dataset):
    """Per-timestep normalized reward and total weight.

    Returns ``(values, totals)`` indexed by t; trajectories that have already
    ended contribute neither weight nor reward at later t.
    """
    f = dataset.flat
    L = dataset.horizon
    ratios = np.ones((len(dataset), L))
    ratios[f.traj, f.t] = step_ratios(policy, dataset)
    cumw = np.cumprod(ratios, axis=1)[f.traj, f.t]
    totals = np.bincount(f.t, weights=cumw, minlength=L)
    num = np.bincount(f.t, weights=cumw * f.rewards, minlength=L)
    values = np.divide(num, totals, out=np.zeros(L), where=totals > 0)
    return values, totals


def cwpdis_estimate(policy: TabularPolicy, dataset: Dataset) -> float:
    values, totals = cwpdis_terms(policy, dataset)
    empty = np.flatnonzero(totals <= 0)
    if len(empty):
        log.debug("CWPDIS: zero total weight at timesteps %s", empty.tolist())
    disc = dataset.gamma ** np.arange(len(values))
    return float(np.sum(disc * values))


def fqe_tabular(policy: TabularPolicy, dataset: Dataset, n_iterations: int | None = None):
    """Model-based evaluation of ``policy`` on the dataset's MLE model.

    Runs ``n_iterations`` backups (default: the longest trajectory length) of
    ``Q <- r_hat + gamma * P_hat (pi . Q)`` over observed pairs; unobserved
    pairs stay 0.  Returns ``(value, TabularQ)`` where the value averages over
    the empirical initial-state distribution.
    """
    model = fit_mle_mdp(dataset)
    if n_iterations is None:
        n_iterations = dataset.horizon
    pi = policy.probs[: dataset.n_states]
    mask = model.observed_mask
    Q = np.zeros((dataset.n_states, dataset.n_actions))
    for _ in range(n_iterations):
        V = np.sum(pi * Q, axis=1)
        Q = np.where(mask, model.reward_sa + model.gamma * (model.transition @ V), 0.0)
    value = float(model.initial_dist @ np.sum(pi * Q, axis=1))
    return value, TabularQ(Q)


def fqe_estimate(policy: TabularPolicy, dataset: Dataset) -> float:
    return fqe_tabular(policy, dataset)[0]


ESTIMATORS = {
    "is": is_estimate,
    "is-clip": clipped_is_estimate,
    "wis": wis_estimate,
    "cwpdis": cwpdis_estimate,
    "fqe": fqe_estimate,
}


def get_estimator(estimator_id: str):
    try:
        return ESTIMATORS[estimator_id]
    except KeyError:
        raise KeyError(
            f"unknown estimator id {estimator_id!r}; expected one of {sorted(ESTIMATORS)}"
        ) from None


def estimate(estimator_id: str, policy: TabularPolicy, dataset: Dataset) -> float:
    value = get_estimator(estimator_id)(policy, dataset)
    if not math.isfinite(value):
        raise UndefinedEstimateError(f"{estimator_id} produced a non-finite estimate")
    return value
