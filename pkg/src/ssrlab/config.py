"""Experiment configuration: a TOML file validated into ``ExperimentConfig``.

Example::

    seed = 7

    [env]
    kind = "chain"          # chain | tutorbot | random-mdp
    H = 6

    [dataset]
    n_episodes = 200
    expected_composition = true

    [[grid]]
    algorithm = "horizon-h"
    params = { h = [1, 2, 3, 4, 5, 6] }

    [selection]
    estimator = "wis"
    strategy = "rrs"
    K = 5

Errors name the offending key, e.g. ``selection.strategy: unknown strategy``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .core import AHSpec, derive_seed
from .ope import ESTIMATORS
from .opl import AHSpecError, validate_ah
from .select import STRATEGY_ALIASES, STRATEGY_PARAMS

ENV_KINDS = ("chain", "tutorbot", "random-mdp")
DEFAULT_GRID_CAP = 1000
ENV_PARAMS = {
    "chain": {"H": 6, "low_reward": 1.0 / 6.0, "high_reward": 201.0},
    "random-mdp": {"n_states": 6, "n_actions": 2, "horizon": 5, "reward_sparsity": 1.0, "seed": 0, "gamma": 1.0},
    "tutorbot": {"mu_improv": 2.0, "mu_base": 1.0, "behavior": [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]},
}
DATASET_KEY = 0


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    env_kind: str
    env_params: dict
    n_episodes: int
    dataset_seed: int
    expected_composition: bool
    dataset_path: str | None
    ahs: tuple[AHSpec, ...]
    estimator: str
    strategy: str
    strategy_params: dict
    seed: int
    out_dir: str
    true_value_episodes: int = 100_000
    raw: dict = field(default_factory=dict, compare=False)


def _get(table: dict, key: str, path: str, typ, default=None, required=False):
    if key not in table:
        if required:
            raise ConfigError(f"{path}.{key}" if path else key, "missing required key")
        return default
    v = table[key]
    name = f"{path}.{key}" if path else key
    if typ is int and (not isinstance(v, int) or isinstance(v, bool)):
        raise ConfigError(name, f"expected an integer, got {v!r}")
    if typ is float and (not isinstance(v, (int, float)) or isinstance(v, bool)):
        raise ConfigError(name, f"expected a number, got {v!r}")
    if typ is str and not isinstance(v, str):
        raise ConfigError(name, f"expected a string, got {v!r}")
    if typ is bool and not isinstance(v, bool):
        raise ConfigError(name, f"expected true or false, got {v!r}")
    if typ is dict and not isinstance(v, dict):
        raise ConfigError(name, "expected a table")
    return v


def _check_u64(v: int, key: str) -> int:
    if not 0 <= v < 2**64:
        raise ConfigError(key, f"seed must be an unsigned 64-bit integer, got {v}")
    return v


def expand_grid(entries, cap: int = DEFAULT_GRID_CAP, path: str = "grid") -> list[AHSpec]:
    """Cross-product expansion of ``{algorithm, params}`` entries; list-valued params are axes."""
    out = []
    for n, entry in enumerate(entries):
        where = f"{path}[{n}]"
        if not isinstance(entry, dict):
            raise ConfigError(where, "expected a table")
        alg = _get(entry, "algorithm", where, str, required=True)
        params = _get(entry, "params", where, dict, default={})
        names = sorted(params)
        axes = [params[k] if isinstance(params[k], list) else [params[k]] for k in names]
        for k, ax in zip(names, axes):
            if not ax:
                raise ConfigError(f"{where}.params.{k}", "empty value list")
        count = 1
        for ax in axes:
            count *= len(ax)
        if len(out) + count > cap:
            raise ConfigError(path, f"grid expands to more than the cap of {cap} AH pairs")
        for combo in itertools.product(*axes):
            ah = AHSpec(alg, dict(zip(names, combo)))
            try:
                validate_ah(ah)
            except AHSpecError as exc:
                raise ConfigError(where, str(exc)) from None
            out.append(ah)
    return out


def _explicit_ahs(entries, path="ahs") -> list[AHSpec]:
    out = []
    for n, entry in enumerate(entries):
        where = f"{path}[{n}]"
        if not isinstance(entry, dict):
            raise ConfigError(where, "expected a table")
        alg = _get(entry, "algorithm", where, str, required=True)
        params = _get(entry, "params", where, dict, default={})
        label = _get(entry, "label", where, str, default="")
        ah = AHSpec(alg, params, label)
        try:
            validate_ah(ah)
        except AHSpecError as exc:
            raise ConfigError(where, str(exc)) from None
        out.append(ah)
    return out


def parse_config(raw: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    known = {"seed", "env", "dataset", "ahs", "grid", "grid_cap", "selection", "output", "true_value"}
    for k in raw:
        if k not in known:
            raise ConfigError(k, "unknown key")
    seed = _check_u64(_get(raw, "seed", "", int, default=0), "seed")

    env = _get(raw, "env", "", dict, default={"kind": "chain"})
    kind = _get(env, "kind", "env", str, default="chain")
    if kind not in ENV_KINDS:
        raise ConfigError("env.kind", f"unknown environment {kind!r}; expected one of {list(ENV_KINDS)}")
    env_params = dict(ENV_PARAMS[kind])
    for k, v in env.items():
        if k == "kind":
            continue
        if k not in env_params:
            raise ConfigError(f"env.{k}", f"unknown parameter for {kind}")
        env_params[k] = v

    ds = _get(raw, "dataset", "", dict, default={})
    for k in ds:
        if k not in ("n_episodes", "seed", "expected_composition", "path"):
            raise ConfigError(f"dataset.{k}", "unknown key")
    n_episodes = _get(ds, "n_episodes", "dataset", int, default=200)
    if n_episodes < 2:
        raise ConfigError("dataset.n_episodes", "need at least 2 episodes")
    dataset_seed = _check_u64(
        _get(ds, "seed", "dataset", int, default=derive_seed(seed, DATASET_KEY)), "dataset.seed"
    )
    expected = _get(ds, "expected_composition", "dataset", bool, default=kind == "chain")
    if expected and kind != "chain":
        raise ConfigError("dataset.expected_composition", "only available for the chain")
    ds_path = _get(ds, "path", "dataset", str, default=None)
    if ds_path is not None:
        ds_path = str((Path(base_dir) / ds_path).resolve())

    cap = _get(raw, "grid_cap", "", int, default=DEFAULT_GRID_CAP)
    ahs = _explicit_ahs(raw.get("ahs", []))
    ahs += expand_grid(raw.get("grid", []), cap - len(ahs))
    if not ahs:
        raise ConfigError("grid", "no AH pairs configured (use [[grid]] or [[ahs]])")
    labels = [a.display_label for a in ahs]
    if len(set(labels)) != len(labels):
        raise ConfigError("grid", "duplicate AH labels")

    sel = _get(raw, "selection", "", dict, default={})
    estimator = _get(sel, "estimator", "selection", str, default="wis")
    if estimator not in ESTIMATORS:
        raise ConfigError("selection.estimator", f"unknown estimator id {estimator!r}; expected one of {sorted(ESTIMATORS)}")
    strategy = _get(sel, "strategy", "selection", str, default="rrs")
    sid = STRATEGY_ALIASES.get(strategy, strategy)
    if sid not in STRATEGY_PARAMS:
        raise ConfigError("selection.strategy", f"unknown strategy id {strategy!r}")
    sparams = {}
    for k, v in sel.items():
        if k in ("estimator", "strategy"):
            continue
        if k not in STRATEGY_PARAMS[sid]:
            raise ConfigError(f"selection.{k}", f"not a parameter of strategy {sid!r}")
        sparams[k] = v

    out = _get(raw, "output", "", dict, default={})
    out_dir = _get(out, "dir", "output", str, default="out")
    tv = _get(raw, "true_value", "", dict, default={})
    tv_n = _get(tv, "n_episodes", "true_value", int, default=100_000)

    return ExperimentConfig(
        kind, env_params, n_episodes, dataset_seed, expected, ds_path, tuple(ahs), estimator,
        sid, sparams, seed, str((Path(base_dir) / out_dir)), tv_n, raw,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"invalid TOML: {exc}") from None
    return parse_config(raw, path.parent)
