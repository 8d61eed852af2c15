"""Dataset splitting and algorithm-hyperparameter selection strategies.

Seed layout: everything derives from one pipeline seed.  Split plans draw
from ``make_rng(derive_seed(seed, SPLIT_KEY), k)`` for repetition ``k``, so the
first ``K`` repetitions of a larger plan are exactly the ``K``-repetition
plan.  The learner for AH ``i`` on repetition ``k`` gets
``derive_seed(seed, LEARN_KEY, i, k)``, bootstrap resamples use
``make_rng(seed, BOOT_KEY)`` and the final retrain gets
``derive_seed(seed, RETRAIN_KEY, i)``.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .core import AHSpec, Dataset, TabularPolicy, TabularQ, derive_seed, make_rng
from .ope import (
    DEFAULT_CLIP,
    UndefinedEstimateError,
    estimate,
    fqe_tabular,
    get_estimator,
    trajectory_weights,
)
from .opl import fit_ah, validate_ah

log = logging.getLogger(__name__)

SPLIT_KEY, LEARN_KEY, BOOT_KEY, RETRAIN_KEY = 0, 1, 2, 3
DEFAULT_EPS_GRID = (0.1, 0.2, 0.5, 0.7, 1.0, 3.0, 10.0)


@dataclass(frozen=True, eq=False)
class SplitPlan:
    repetitions: tuple[tuple[np.ndarray, np.ndarray], ...]
    scheme_tag: str
    n: int

    def __post_init__(self):
        full = np.arange(self.n)
        for k, (tr, va) in enumerate(self.repetitions):
            if len(tr) == 0 or len(va) == 0:
                raise ValueError(f"repetition {k} has an empty side")
            if not np.array_equal(np.sort(np.concatenate([tr, va])), full):
                raise ValueError(f"repetition {k} is not a partition of 0..{self.n - 1}")

    def __len__(self):
        return len(self.repetitions)


def _partition(perm: np.ndarray, cut: int):
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def rrs_splits(n: int, K: int, ratio: float = 0.5, seed: int = 0, scheme_tag: str = "rrs") -> SplitPlan:
    """``K`` independent shuffles of ``0..n-1``, each cut at ``floor(n * ratio)``."""
    if n < 2 or K < 1:
        raise ValueError("need n >= 2 and K >= 1")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    cut = math.floor(n * ratio)
    if cut == 0 or cut == n:
        raise ValueError(f"ratio {ratio} leaves an empty side for n={n}")
    reps = tuple(_partition(make_rng(seed, k).permutation(n), cut) for k in range(K))
    return SplitPlan(reps, scheme_tag, n)


def one_split(n: int, ratio: float = 0.5, seed: int = 0) -> SplitPlan:
    """The single-partition scheme; the same partition as ``rrs_splits(n, 1, ratio, seed)``."""
    return rrs_splits(n, 1, ratio, seed, scheme_tag="one-split")


def kfold_splits(n: int, M: int, seed: int = 0) -> SplitPlan:
    if not 2 <= M <= n:
        raise ValueError(f"need 2 <= M <= n, got M={M}, n={n}")
    folds = np.array_split(make_rng(seed).permutation(n), M)
    reps = []
    for m in range(M):
        train = np.concatenate([folds[j] for j in range(M) if j != m])
        reps.append((np.sort(train), np.sort(folds[m])))
    return SplitPlan(tuple(reps), "kfold", n)


@dataclass(frozen=True, eq=False)
class ScoreTable:
    """Validation scores, one row per AH and one column per repetition.

    Undefined cells hold NaN and are excluded from the aggregate; an AH with
    no defined cell is unevaluable and ranks last.
    """

    ah_specs: tuple[AHSpec, ...]
    scores: np.ndarray
    diagnostics: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        scores = np.array(self.scores, dtype=float, copy=True)
        if scores.ndim != 2 or scores.shape[0] != len(self.ah_specs):
            raise ValueError("scores must have one row per AH")
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "ah_specs", tuple(self.ah_specs))
        diag = self.diagnostics or tuple(("",) * scores.shape[1] for _ in self.ah_specs)
        object.__setattr__(self, "diagnostics", tuple(tuple(r) for r in diag))

    @property
    def n_repetitions(self) -> int:
        return self.scores.shape[1]

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.scores)

    @property
    def n_undefined(self) -> np.ndarray:
        return (~self.defined).sum(axis=1)

    @property
    def evaluable(self) -> np.ndarray:
        return self.defined.any(axis=1)

    @property
    def aggregate(self) -> np.ndarray:
        """Mean of the defined cells per AH; NaN for unevaluable AHs."""
        d = self.defined
        total = np.where(d, self.scores, 0.0).sum(axis=1)
        count = d.sum(axis=1)
        return np.divide(total, count, out=np.full(len(count), np.nan), where=count > 0)

    def best_index(self) -> int:
        if not self.evaluable.any():
            raise ValueError("no AH has a defined score")
        agg = np.where(self.evaluable, self.aggregate, -np.inf)
        return int(np.argmax(agg))

    def same_as(self, other: "ScoreTable") -> bool:
        return (
            [a.display_label for a in self.ah_specs] == [a.display_label for a in other.ah_specs]
            and np.array_equal(self.scores, other.scores, equal_nan=True)
        )


@dataclass(frozen=True, eq=False)
class SelectionReport:
    chosen: AHSpec
    chosen_index: int
    score_table: ScoreTable
    deployed_policy: TabularPolicy
    strategy_tag: str
    seed: int
    wall_time: float = field(default=0.0, compare=False)


# --- cell scoring ---------------------------------------------------------


def _score_cell(ah, train: Dataset, valid: Dataset, estimator_id: str, seed: int):
    try:
        policy = fit_ah(ah, train, seed)
    except Exception as exc:  # a failing learner must not abort the grid
        return math.nan, f"learner failed: {type(exc).__name__}: {exc}"
    try:
        return estimate(estimator_id, policy, valid), ""
    except UndefinedEstimateError as exc:
        return math.nan, f"undefined: {exc}"


_WORKER_DATA: dict = {}


def _init_worker(dataset):
    _WORKER_DATA["dataset"] = dataset


def _run_cell(task):
    ah, train_idx, valid_idx, estimator_id, seed = task
    ds = _WORKER_DATA["dataset"]
    return _score_cell(ah, ds.subset(train_idx), ds.subset(valid_idx), estimator_id, seed)


def _map_cells(tasks, dataset: Dataset, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        _init_worker(dataset)
        return [_run_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(dataset,)) as ex:
        return list(ex.map(_run_cell, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _check_inputs(ahs, estimator_id):
    if not ahs:
        raise ValueError("need at least one AH")
    for ah in ahs:
        validate_ah(ah)
    get_estimator(estimator_id)


def score_strategy(
    ahs, dataset: Dataset, estimator_id: str, plan: SplitPlan, seed: int = 0, workers: int = 1
) -> ScoreTable:
    """Train every AH on each repetition's train side and evaluate it on the valid side."""
    ahs = tuple(ahs)
    _check_inputs(ahs, estimator_id)
    if plan.n != len(dataset):
        raise ValueError(f"plan covers {plan.n} trajectories, dataset has {len(dataset)}")
    tasks = [
        (ah, tr, va, estimator_id, derive_seed(seed, LEARN_KEY, i, k))
        for i, ah in enumerate(ahs)
        for k, (tr, va) in enumerate(plan.repetitions)
    ]
    results = _map_cells(tasks, dataset, workers)
    K = len(plan)
    scores = np.array([r[0] for r in results]).reshape(len(ahs), K)
    diag = [tuple(r[1] for r in results[i * K : (i + 1) * K]) for i in range(len(ahs))]
    return ScoreTable(ahs, scores, tuple(diag))


def score_nested_cv(
    ahs, dataset: Dataset, estimator_id: str, K: int, seed: int = 0, workers: int = 1
) -> ScoreTable:
    """Two-fold scoring with swapped roles, averaged per repetition.

    Cell ``k`` is the mean of ``V(A(train_k); valid_k)`` and
    ``V(A(valid_k); train_k)``; if only one direction is defined the cell is
    that direction's score and the diagnostic says so.
    """
    ahs = tuple(ahs)
    plan = rrs_splits(len(dataset), K, 0.5, derive_seed(seed, SPLIT_KEY))
    swapped = SplitPlan(tuple((va, tr) for tr, va in plan.repetitions), "rrs", plan.n)
    fwd = score_strategy(ahs, dataset, estimator_id, plan, seed, workers)
    # the swapped direction must not reuse the forward learner seeds
    bwd = score_strategy(ahs, dataset, estimator_id, swapped, derive_seed(seed, LEARN_KEY, 1), workers)
    both = np.stack([fwd.scores, bwd.scores])
    count = np.isfinite(both).sum(axis=0)
    total = np.where(np.isfinite(both), both, 0.0).sum(axis=0)
    scores = np.divide(total, count, out=np.full(count.shape, np.nan), where=count > 0)
    diag = []
    for i in range(len(ahs)):
        row = []
        for k in range(K):
            msgs = [m for m in (fwd.diagnostics[i][k], bwd.diagnostics[i][k]) if m]
            row.append("; ".join(msgs))
        diag.append(tuple(row))
    return ScoreTable(ahs, scores, tuple(diag))


# --- BCa bootstrap --------------------------------------------------------

_NORMAL = NormalDist()


def bca_interval(theta_hat: float, replicates, jackknife, confidence: float = 0.95):
    """Bias-corrected and accelerated bootstrap interval.

    ``z0 = Phi^-1(mean(replicates < theta_hat))`` with the proportion clipped
    to ``[1/(2B), 1 - 1/(2B)]``; ``a = sum(d^3) / (6 (sum d^2)^1.5)`` with
    ``d = mean(jackknife) - jackknife``.  The endpoints are the replicate
    quantiles (linear interpolation) at ``Phi(z0 + (z0 + z) / (1 - a (z0 + z)))``
    for ``z = Phi^-1((1 -/+ confidence) / 2)``.  A distribution with no
    spread collapses to ``(theta_hat, theta_hat)``.
    """
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    reps = np.asarray(replicates, dtype=float)
    B = len(reps)
    if B == 0:
        raise ValueError("no bootstrap replicates")
    if np.ptp(reps) == 0.0:
        return float(theta_hat), float(theta_hat)
    prop = np.clip(np.mean(reps < theta_hat), 0.5 / B, 1.0 - 0.5 / B)
    z0 = _NORMAL.inv_cdf(float(prop))
    jack = np.asarray(jackknife, dtype=float)
    d = jack.mean() - jack
    denom = 6.0 * np.sum(d**2) ** 1.5
    a = float(np.sum(d**3) / denom) if denom > 0 else 0.0
    out = []
    for q in ((1.0 - confidence) / 2.0, (1.0 + confidence) / 2.0):
        z = _NORMAL.inv_cdf(q)
        adj = _NORMAL.cdf(z0 + (z0 + z) / (1.0 - a * (z0 + z)))
        out.append(float(np.quantile(reps, adj)))
    return out[0], out[1]


def _trajectory_statistic(estimator_id: str, policy: TabularPolicy, valid: Dataset):
    """Fast resampling for weight-based estimators: returns ``f(indices) -> value``."""
    G = np.asarray(valid.returns)
    if estimator_id in ("is", "wis", "is-clip"):
        w = trajectory_weights(policy, valid)
        if estimator_id == "is-clip":
            w = np.minimum(w, DEFAULT_CLIP)

        def stat(idx):
            ww = w[idx]
            if estimator_id != "wis":
                return float(np.sum(ww * G[idx]) / len(idx))
            total = ww.sum()
            return float(ww @ G[idx] / total) if total > 0 else math.nan

        return stat

    def stat(idx):
        try:
            return estimate(estimator_id, policy, valid.subset(idx))
        except UndefinedEstimateError:
            return math.nan

    return stat


def score_bca(
    ahs,
    dataset: Dataset,
    estimator_id: str,
    split: SplitPlan,
    B: int = 1000,
    mode: str = "lower",
    confidence: float = 0.95,
    seed: int = 0,
) -> ScoreTable:
    """Score each AH by a bootstrap summary of its validation estimate.

    Every AH is evaluated on the same ``B`` resamples of the validation
    trajectories.  Undefined replicates are dropped and counted in the
    diagnostics.
    """
    ahs = tuple(ahs)
    _check_inputs(ahs, estimator_id)
    if mode not in ("mean", "lower", "upper"):
        raise ValueError(f"mode must be mean, lower or upper, got {mode!r}")
    if B < 1:
        raise ValueError("B must be >= 1")
    if B < 100:
        log.warning("BCa with B=%d < 100 bootstrap resamples is unreliable", B)
    tr_idx, va_idx = split.repetitions[0]
    train, valid = dataset.subset(tr_idx), dataset.subset(va_idx)
    m = len(valid)
    boot = make_rng(seed, BOOT_KEY).integers(0, m, size=(B, m))
    boot.sort(axis=1)
    scores = np.full((len(ahs), 1), np.nan)
    diag = []
    for i, ah in enumerate(ahs):
        try:
            policy = fit_ah(ah, train, derive_seed(seed, LEARN_KEY, i, 0))
        except Exception as exc:
            diag.append((f"learner failed: {type(exc).__name__}: {exc}",))
            continue
        stat = _trajectory_statistic(estimator_id, policy, valid)
        theta_hat = stat(np.arange(m))
        if not math.isfinite(theta_hat):
            diag.append(("undefined: point estimate has no overlap",))
            continue
        reps = np.array([stat(b) for b in boot])
        ok = np.isfinite(reps)
        msg = f"{int((~ok).sum())} undefined resamples dropped" if not ok.all() else ""
        reps = reps[ok]
        if len(reps) == 0:
            diag.append(("undefined: every resample undefined",))
            continue
        if mode == "mean":
            scores[i, 0] = reps.mean()
        else:
            jack = np.array([stat(np.delete(np.arange(m), j)) for j in range(m)])
            jack = jack[np.isfinite(jack)]
            lo, hi = bca_interval(theta_hat, reps, jack, confidence)
            scores[i, 0] = lo if mode == "lower" else hi
        diag.append((msg,))
    return ScoreTable(ahs, scores, tuple(diag))


# --- BVFT -----------------------------------------------------------------


def _rms_residual(q_sa, target, keys):
    """RMS of ``q_sa`` minus the group mean of ``target`` over groups ``keys``."""
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    sums = np.bincount(inv, weights=target)
    counts = np.bincount(inv)
    proj = (sums / counts)[inv]
    return float(np.sqrt(np.mean((q_sa - proj) ** 2)))


def bvft_loss(
    qs,
    dataset: Dataset,
    gamma: float | None = None,
    eps_grid=DEFAULT_EPS_GRID,
    backup: str = "own",
    bootstrap_last: bool = False,
) -> np.ndarray:
    """Tournament loss of each candidate Q-table; lower is better.

    For a pair ``(i, j)`` and resolution ``eps`` the logged pairs are grouped
    by ``(floor(Q_i / eps), floor(Q_j / eps))`` and Bellman targets are
    projected onto group means.  ``backup="own"`` builds the targets from
    ``Q_i`` (``r + gamma * max Q_i(s')``); ``backup="pairwise"`` builds them
    from ``Q_j``.  The pair error is the RMS of ``Q_i`` minus the projected
    target, the per-resolution loss is the max over ``j`` and the returned
    loss is the min over the grid.  The last step of every trajectory is
    treated as terminal unless ``bootstrap_last`` is set.
    """
    if not len(eps_grid):
        raise ValueError("eps_grid must be non-empty")
    if backup not in ("own", "pairwise"):
        raise ValueError("backup must be 'own' or 'pairwise'")
    tables = [q.values if isinstance(q, TabularQ) else np.asarray(q, dtype=float) for q in qs]
    if not tables:
        raise ValueError("need at least one Q-table")
    gamma = dataset.gamma if gamma is None else gamma
    f = dataset.flat
    cont = np.ones(len(f.states))
    if not bootstrap_last:
        cont[f.offsets + f.lengths - 1] = 0.0
    q_sa = [Q[f.states, f.actions] for Q in tables]
    targets = [f.rewards + gamma * cont * Q.max(axis=1)[f.next_states] for Q in tables]
    n = len(tables)
    per_eps = np.empty((len(eps_grid), n))
    for e, eps in enumerate(eps_grid):
        if not eps > 0:
            raise ValueError("resolutions must be positive")
        bins = [np.floor(v / eps) for v in q_sa]
        for i in range(n):
            worst = 0.0
            for j in range(n):
                keys = np.column_stack([bins[i], bins[j]])
                tgt = targets[i] if backup == "own" else targets[j]
                worst = max(worst, _rms_residual(q_sa[i], tgt, keys))
            per_eps[e, i] = worst
    return per_eps.min(axis=0)


def score_bvft(
    ahs, dataset: Dataset, split: SplitPlan, seed: int = 0, eps_grid=DEFAULT_EPS_GRID, backup: str = "own"
) -> ScoreTable:
    """Train each AH on the train side, fit its FQE Q-table on the valid side, run the tournament.

    The score is the negated BVFT loss so that selection stays an argmax.
    """
    ahs = tuple(ahs)
    _check_inputs(ahs, "fqe")
    tr_idx, va_idx = split.repetitions[0]
    train, valid = dataset.subset(tr_idx), dataset.subset(va_idx)
    qs, rows, diag = [], [], []
    for i, ah in enumerate(ahs):
        try:
            policy = fit_ah(ah, train, derive_seed(seed, LEARN_KEY, i, 0))
            qs.append(fqe_tabular(policy, valid)[1])
            rows.append(i)
            diag.append(("",))
        except Exception as exc:
            diag.append((f"learner failed: {type(exc).__name__}: {exc}",))
    scores = np.full((len(ahs), 1), np.nan)
    if qs:
        scores[rows, 0] = -bvft_loss(qs, valid, eps_grid=eps_grid, backup=backup)
    return ScoreTable(ahs, scores, tuple(diag))


# --- selection ------------------------------------------------------------


def select_and_retrain(
    table: ScoreTable, dataset: Dataset, seed: int = 0, strategy_tag: str = ""
) -> SelectionReport:
    """Pick the AH with the best aggregate (lowest index on ties) and refit it on all of ``dataset``."""
    start = time.perf_counter()
    if not table.evaluable.any():
        raise ValueError("no AH is evaluable; every score cell is undefined")
    o = table.best_index()
    chosen = table.ah_specs[o]
    policy = fit_ah(chosen, dataset, derive_seed(seed, RETRAIN_KEY, o))
    return SelectionReport(chosen, o, table, policy, strategy_tag, seed, time.perf_counter() - start)


def kendall_tau(a, b) -> float:
    """Kendall rank correlation without tie correction.

    ``(concordant - discordant) / C(n, 2)``; a pair tied in either list
    counts as neither.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("rankings must be 1-d and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two items")
    sa = np.sign(a[:, None] - a[None, :])
    sb = np.sign(b[:, None] - b[None, :])
    iu = np.triu_indices(n, 1)
    return float(np.sum((sa * sb)[iu]) / (n * (n - 1) / 2))


STRATEGIES = ("one-split", "rrs", "cv", "nested-cv", "bca", "bvft")
STRATEGY_ALIASES = {"bvft-pi-fqe": "bvft", "bvft-pi-x-fqe": "bvft"}

STRATEGY_PARAMS = {
    "one-split": {"ratio": 0.5},
    "rrs": {"K": 5, "ratio": 0.5},
    "cv": {"M": 5},
    "nested-cv": {"K": 5},
    "bca": {"B": 1000, "mode": "lower", "confidence": 0.95, "ratio": 0.5},
    "bvft": {"ratio": 0.5, "eps_grid": list(DEFAULT_EPS_GRID), "backup": "own"},
}


def resolve_strategy(strategy_id: str, params=None):
    sid = STRATEGY_ALIASES.get(strategy_id, strategy_id)
    if sid not in STRATEGY_PARAMS:
        raise KeyError(f"unknown strategy id {strategy_id!r}; expected one of {list(STRATEGIES)}")
    merged = dict(STRATEGY_PARAMS[sid])
    for k, v in (params or {}).items():
        if k not in merged:
            raise KeyError(f"strategy {sid!r} has no parameter {k!r}")
        merged[k] = v
    return sid, merged


def run_strategy(
    strategy_id: str, ahs, dataset: Dataset, estimator_id: str, params=None, seed: int = 0, workers: int = 1
) -> ScoreTable:
    """Score ``ahs`` with the named strategy; all randomness derives from ``seed``."""
    sid, p = resolve_strategy(strategy_id, params)
    n = len(dataset)
    split_seed = derive_seed(seed, SPLIT_KEY)
    if sid == "one-split":
        return score_strategy(ahs, dataset, estimator_id, one_split(n, p["ratio"], split_seed), seed, workers)
    if sid == "rrs":
        plan = rrs_splits(n, int(p["K"]), p["ratio"], split_seed)
        return score_strategy(ahs, dataset, estimator_id, plan, seed, workers)
    if sid == "cv":
        return score_strategy(ahs, dataset, estimator_id, kfold_splits(n, int(p["M"]), split_seed), seed, workers)
    if sid == "nested-cv":
        return score_nested_cv(ahs, dataset, estimator_id, int(p["K"]), seed, workers)
    if sid == "bca":
        split = one_split(n, p["ratio"], split_seed)
        return score_bca(ahs, dataset, estimator_id, split, int(p["B"]), p["mode"], p["confidence"], seed)
    split = one_split(n, p["ratio"], split_seed)
    return score_bvft(ahs, dataset, split, seed, tuple(p["eps_grid"]), p["backup"])
