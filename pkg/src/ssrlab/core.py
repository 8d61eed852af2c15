"""Shared data model: steps, trajectories, datasets, tabular policies and Q-tables.

Trajectories store their steps column-wise as read-only numpy arrays so the
estimators and learners can work on flat views of a whole dataset without
per-step Python objects.  ``Step`` tuples are still available for callers
that want to walk a trajectory one transition at a time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

PROB_ATOL = 1e-9


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``.

    Every stochastic operation in the package derives its stream through this
    function, so the same seed and keys always give the same draws regardless
    of the order in which work items are scheduled.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


def derive_seed(seed: int, *keys: int) -> int:
    """A child u64 seed for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class Step(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int
    behavior_propensity: float


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True).reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One logged episode.

    ``aux`` holds optional per-step payload arrays (TutorBot observations)
    keyed by name; each must have one entry per step.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    propensities: np.ndarray
    aux: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states, np.int64))
        object.__setattr__(self, "actions", _frozen(self.actions, np.int64))
        object.__setattr__(self, "rewards", _frozen(self.rewards, np.float64))
        object.__setattr__(self, "next_states", _frozen(self.next_states, np.int64))
        object.__setattr__(self, "propensities", _frozen(self.propensities, np.float64))
        n = len(self.states)
        if n < 1:
            raise ValueError("a trajectory needs at least one step")
        for name in ("actions", "rewards", "next_states", "propensities"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"trajectory column {name!r} has wrong length")
        aux = {k: _frozen(v, np.float64) for k, v in self.aux.items()}
        for k, v in aux.items():
            if len(v) != n:
                raise ValueError(f"aux column {k!r} has wrong length")
        object.__setattr__(self, "aux", aux)

    @classmethod
    def from_steps(cls, steps: Iterable[Step | Sequence], aux=None) -> "Trajectory":
        rows = [tuple(s) for s in steps]
        if not rows:
            raise ValueError("a trajectory needs at least one step")
        cols = list(zip(*rows))
        return cls(*cols, aux=aux or {})

    def __len__(self) -> int:
        return len(self.states)

    @property
    def steps(self) -> tuple[Step, ...]:
        return tuple(
            Step(int(s), int(a), float(r), int(ns), float(p))
            for s, a, r, ns, p in zip(
                self.states, self.actions, self.rewards, self.next_states, self.propensities
            )
        )

    def same_steps(self, other: "Trajectory") -> bool:
        return (
            len(self) == len(other)
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.next_states, other.next_states)
            and np.array_equal(self.propensities, other.propensities)
        )


def _discounted_sums(rewards, t, traj, n: int, gamma: float) -> np.ndarray:
    # one summation order for every return in the package
    disc = rewards if gamma == 1.0 else rewards * gamma**t
    return np.bincount(traj, weights=disc, minlength=n)


def return_of(trajectory: Trajectory, gamma: float) -> float:
    """Discounted return ``sum_t gamma**t * r_t`` with ``t`` starting at 0."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    n = len(trajectory)
    return float(_discounted_sums(trajectory.rewards, np.arange(n), np.zeros(n, dtype=np.int64), 1, gamma)[0])


class FlatSteps(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    propensities: np.ndarray
    traj: np.ndarray  # trajectory index of each step
    t: np.ndarray  # time index within its trajectory
    offsets: np.ndarray  # start position of each trajectory
    lengths: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    gamma: float
    n_states: int
    n_actions: int
    env_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if not self.trajectories:
            raise ValueError("a dataset needs at least one trajectory")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        trajs = self.trajectories
        return Dataset(
            tuple(trajs[i] for i in indices), self.gamma, self.n_states, self.n_actions, self.env_tag
        )

    def with_trajectories(self, trajectories: Iterable[Trajectory]) -> "Dataset":
        return Dataset(tuple(trajectories), self.gamma, self.n_states, self.n_actions, self.env_tag)

    @cached_property
    def flat(self) -> FlatSteps:
        trajs = self.trajectories
        lengths = np.fromiter((len(t) for t in trajs), dtype=np.int64, count=len(trajs))
        offsets = np.zeros(len(trajs), dtype=np.int64)
        np.cumsum(lengths[:-1], out=offsets[1:])
        traj = np.repeat(np.arange(len(trajs)), lengths)
        t = np.arange(int(lengths.sum())) - np.repeat(offsets, lengths)
        return FlatSteps(
            np.concatenate([x.states for x in trajs]),
            np.concatenate([x.actions for x in trajs]),
            np.concatenate([x.rewards for x in trajs]),
            np.concatenate([x.next_states for x in trajs]),
            np.concatenate([x.propensities for x in trajs]),
            traj,
            t,
            offsets,
            lengths,
        )

    @cached_property
    def returns(self) -> np.ndarray:
        f = self.flat
        out = _discounted_sums(f.rewards, f.t, f.traj, len(self), self.gamma)
        out.flags.writeable = False
        return out

    @property
    def horizon(self) -> int:
        return int(self.flat.lengths.max())

    @property
    def n_transitions(self) -> int:
        return int(self.flat.lengths.sum())


@dataclass(frozen=True)
class Violation:
    trajectory: int
    step: int | None
    message: str

    def __str__(self):
        where = f"trajectory {self.trajectory}"
        if self.step is not None:
            where += f", step {self.step}"
        return f"{where}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "ok"
        return "\n".join(str(v) for v in self.violations)


class DatasetError(ValueError):
    def __init__(self, report: ValidationReport):
        super().__init__(f"invalid dataset:\n{report}")
        self.report = report


def validate_dataset(dataset: Dataset) -> ValidationReport:
    """Check every dataset invariant and report each violation with its location."""
    out: list[Violation] = []
    nS, nA = dataset.n_states, dataset.n_actions
    for i, tr in enumerate(dataset.trajectories):
        for t, (s, a, r, ns, p) in enumerate(
            zip(tr.states, tr.actions, tr.rewards, tr.next_states, tr.propensities)
        ):
            if not 0 <= s < nS:
                out.append(Violation(i, t, f"state {s} outside [0, {nS})"))
            if not 0 <= ns < nS:
                out.append(Violation(i, t, f"next_state {ns} outside [0, {nS})"))
            if not 0 <= a < nA:
                out.append(Violation(i, t, f"action {a} outside [0, {nA})"))
            if not math.isfinite(r):
                out.append(Violation(i, t, f"reward {r} is not finite"))
            if not (0.0 < p <= 1.0):
                out.append(Violation(i, t, f"behavior propensity {p} outside (0, 1]"))
        for t in range(len(tr) - 1):
            if tr.next_states[t] != tr.states[t + 1]:
                out.append(
                    Violation(
                        i,
                        t,
                        f"steps {t} and {t + 1} do not chain: next_state {tr.next_states[t]} "
                        f"!= state {tr.states[t + 1]}",
                    )
                )
    return ValidationReport(tuple(out))


def check_dataset(dataset: Dataset) -> Dataset:
    report = validate_dataset(dataset)
    if not report.ok:
        raise DatasetError(report)
    return dataset


def _table(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d table, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Per-state action distribution.  ``flags`` carries learner diagnostics."""

    probs: np.ndarray
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        p = _table(self.probs, "policy table")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("policy probabilities must lie in [0, 1]")
        bad = np.abs(p.sum(axis=1) - 1.0) > PROB_ATOL
        if np.any(bad):
            raise ValueError(f"policy rows {np.flatnonzero(bad).tolist()} do not sum to 1")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "flags", tuple(self.flags))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int, flags=()) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=np.int64)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs, flags)

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    def same_as(self, other: "TabularPolicy") -> bool:
        return np.array_equal(self.probs, other.probs)


@dataclass(frozen=True, eq=False)
class TabularQ:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _table(self.values, "Q table"))

    def greedy_policy(self) -> TabularPolicy:
        return TabularPolicy.deterministic(np.argmax(self.values, axis=1), self.values.shape[1])


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


@dataclass(frozen=True)
class AHSpec:
    """An algorithm identifier together with a full hyperparameter assignment."""

    algorithm_id: str
    params: tuple[tuple[str, object], ...] = ()
    display_label: str = ""

    def __post_init__(self):
        params = self.params
        if isinstance(params, Mapping):
            params = params.items()
        params = tuple(sorted((str(k), v) for k, v in params))
        object.__setattr__(self, "params", params)
        if not self.display_label:
            inner = ",".join(f"{k}={format_value(v)}" for k, v in params)
            object.__setattr__(self, "display_label", f"{self.algorithm_id}({inner})")

    @property
    def kwargs(self) -> dict:
        return dict(self.params)

    def get(self, name: str, default=None):
        return self.kwargs.get(name, default)
