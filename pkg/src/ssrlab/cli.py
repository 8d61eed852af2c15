"""Command-line front end.

Subcommands: ``gen-data``, ``run-selection`` (alias ``run``),
``theorem-check``, ``eval-policy`` and ``rank-report``.  Every output file is
a deterministic function of the config; timings go to ``run.log`` only.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .core import derive_seed
from .envs import (
    ChainConfig,
    TutorBotConfig,
    build_expected_composition_chain_dataset,
    exact_policy_value,
    make_chain_env,
    make_random_mdp,
    make_tutorbot_env,
    rollout,
    tutorbot_policy_value,
    tutorbot_rollout,
    uniform_behavior_policy,
)
from .select import kendall_tau, run_strategy, select_and_retrain
from .serialize import (
    FormatError,
    read_dataset,
    read_policy,
    read_score_table,
    remove_quietly,
    sidecar,
    summary_record,
    write_dataset,
    write_policy,
    write_score_table,
    write_summary,
)
from .theorem import (
    TheoremConfig,
    binomial_majority_bound,
    partition_distribution,
    run_mc_experiment,
    single_split_failure_prob,
    successful_split_prob,
)

log = logging.getLogger("ssrlab")

TRUE_VALUE_KEY = 4
EXIT_FAILURE, EXIT_USAGE = 1, 2


class OutputExists(RuntimeError):
    pass


def build_env(cfg: ExperimentConfig):
    p = cfg.env_params
    if cfg.env_kind == "chain":
        return make_chain_env(ChainConfig(int(p["H"]), float(p["low_reward"]), float(p["high_reward"])))
    if cfg.env_kind == "random-mdp":
        return make_random_mdp(
            int(p["n_states"]), int(p["n_actions"]), int(p["horizon"]), float(p["reward_sparsity"]),
            int(p["seed"]), float(p["gamma"]),
        )
    return make_tutorbot_env(TutorBotConfig(mu_improv=float(p["mu_improv"]), mu_base=float(p["mu_base"])))


def generate_dataset(cfg: ExperimentConfig, env):
    if cfg.env_kind == "tutorbot":
        return tutorbot_rollout(env, cfg.env_params["behavior"], cfg.n_episodes, cfg.dataset_seed)
    if cfg.env_kind == "chain" and cfg.expected_composition:
        return build_expected_composition_chain_dataset(env, cfg.n_episodes, cfg.dataset_seed)
    return rollout(env, uniform_behavior_policy(env), cfg.n_episodes, cfg.dataset_seed)


def true_value(cfg: ExperimentConfig, env, policy):
    """(value, standard error or None)."""
    if cfg.env_kind == "tutorbot":
        return tutorbot_policy_value(env, policy, cfg.true_value_episodes, derive_seed(cfg.seed, TRUE_VALUE_KEY))
    return exact_policy_value(env, policy), None


class _Outputs:
    """Tracks files written by a command so a failure can remove them."""

    def __init__(self, out_dir, force: bool):
        self.dir = Path(out_dir)
        self.force = force
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.dir / name
        for q in (p, sidecar(p)):
            if q.exists() and not self.force:
                raise OutputExists(f"{q} exists; pass --force to overwrite")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written += [p, sidecar(p)]
        return p

    def cleanup(self):
        remove_quietly(self.written)


def run_pipeline(cfg: ExperimentConfig, workers: int = 1, force: bool = False) -> dict:
    """Generate or load the dataset, score, select, retrain and write every artifact."""
    outputs = _Outputs(cfg.out_dir, force)
    start = time.perf_counter()
    try:
        env = build_env(cfg)
        if cfg.dataset_path:
            dataset = read_dataset(cfg.dataset_path)
        else:
            dataset = generate_dataset(cfg, env)
            write_dataset(outputs.path("dataset.csv"), dataset)
        table = run_strategy(
            cfg.strategy, cfg.ahs, dataset, cfg.estimator, cfg.strategy_params, cfg.seed, workers
        )
        report = select_and_retrain(table, dataset, cfg.seed, cfg.strategy)
        value, se = true_value(cfg, env, report.deployed_policy)
        write_score_table(outputs.path("scores.csv"), table)
        write_policy(outputs.path("policy.csv"), report.deployed_policy)
        record = summary_record(report, cfg.estimator, value, se, {"env": cfg.env_kind})
        write_summary(outputs.path("summary.json"), record)
        log_path = outputs.path("run.log")
        log_path.write_text(f"wall_time_seconds {time.perf_counter() - start:.3f}\nworkers {workers}\n")
        return record
    except BaseException:
        outputs.cleanup()
        raise


def _apply_overrides(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    raw = dict(cfg.raw)
    changed = False
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
        changed = True
    if getattr(args, "out", None) is not None:
        raw["output"] = dict(raw.get("output", {}), dir=str(Path(args.out).resolve()))
        changed = True
    return parse_config(raw, Path(args.config).parent) if changed else cfg


def cmd_gen_data(args) -> int:
    cfg = _apply_overrides(args)
    outputs = _Outputs(cfg.out_dir, args.force)
    try:
        ds = generate_dataset(cfg, build_env(cfg))
        path = outputs.path("dataset.csv")
        write_dataset(path, ds)
    except BaseException:
        outputs.cleanup()
        raise
    print(f"wrote {len(ds)} trajectories to {path}")
    return 0


def cmd_run(args) -> int:
    cfg = _apply_overrides(args)
    rec = run_pipeline(cfg, args.workers, args.force)
    print(f"strategy {rec['strategy']} estimator {rec['estimator']}")
    print(f"chosen {rec['chosen_label']} aggregate {rec['aggregate']!r}")
    if rec["true_value"] is not None:
        print(f"true value {rec['true_value']!r}")
    print(f"outputs in {cfg.out_dir}")
    return 0


def cmd_eval_policy(args) -> int:
    cfg = _apply_overrides(args)
    env = build_env(cfg)
    policy = read_policy(args.policy)
    value, se = true_value(cfg, env, policy)
    print(f"true value {value!r}" + (f" (MC standard error {se!r})" if se is not None else ""))
    return 0


def read_true_values(path) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["ah_label", "true_value"]:
        raise FormatError(f"{path}: expected header ah_label,true_value")
    return {r[0]: float(r[1]) for r in rows[1:]}


def cmd_rank_report(args) -> int:
    table = read_score_table(args.scores)
    truth = read_true_values(args.true_values)
    labels = [a.display_label for a in table.ah_specs]
    missing = [l for l in labels if l not in truth]
    if missing:
        raise FormatError(f"{args.true_values}: no true value for {missing}")
    agg = [(-math.inf if not math.isfinite(v) else v) for v in table.aggregate]
    tau = kendall_tau(agg, [truth[l] for l in labels])
    print(f"kendall_tau {tau!r}")
    return 0


# analytic acceptance targets checked by theorem-check
ANALYTIC_CHECKS = (
    ("P(k=0)", lambda: partition_distribution(3, 200)[0], 0.1231, 1e-3),
    ("single-split failure", lambda: single_split_failure_prob(3, 200), 0.2462, 5e-4),
    ("successful split", lambda: successful_split_prob(3, 200), 0.7538, 1e-3),
    ("uniform-partition failure", lambda: single_split_failure_prob(6, 200, "uniform"), 2.0 / 7.0, 1e-12),
)


def cmd_theorem_check(args) -> int:
    ok = True
    print("analytic")
    for name, fn, target, tol in ANALYTIC_CHECKS:
        v = fn()
        good = abs(v - target) <= tol
        ok &= good
        print(f"  {name:<24} {v:.6f}  target {target:.6f} +/- {tol:g}  {'ok' if good else 'FAIL'}")
    if args.trials > 0:
        tc = TheoremConfig(H=args.H, n_episodes=args.n_episodes, n_trials=args.trials, seed=args.seed or 0)
        res = run_mc_experiment(tc, workers=args.workers)
        p_ss = successful_split_prob(tc.n_copies, tc.n_episodes)
        print(f"monte carlo ({tc.n_trials} trials, H={tc.H}, n={tc.n_episodes}, copies={tc.n_copies})")
        print(f"  {'K':>3} {'failure':>9} {'se':>8} {'bound':>9}")
        for K in tc.K_values:
            ref = single_split_failure_prob(tc.n_copies, tc.n_episodes) if K == 1 \
                else 1.0 - binomial_majority_bound(K, p_ss)
            print(f"  {K:>3} {res.failure_rates[K]:9.4f} {res.failure_se[K]:8.4f} {ref:9.4f}")
        print(f"  successful-split fraction {res.ess_fraction:.4f} vs {p_ss:.4f}")
        log.info("theorem MC wall time %.1fs", res.wall_time)
    return 0 if ok else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssrlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML experiment config")
        p.add_argument("--seed", type=int, help="override the pipeline seed (u64)")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--workers", type=int, default=1, help="worker processes")

    p = sub.add_parser("gen-data", help="generate and write the configured dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)
    for name in ("run-selection", "run"):
        p = sub.add_parser(name, help="split, select, retrain and report")
        common(p)
        p.set_defaults(func=cmd_run)
    p = sub.add_parser("eval-policy", help="true value of a policy file in the configured env")
    common(p)
    p.add_argument("--policy", required=True)
    p.set_defaults(func=cmd_eval_policy)
    p = sub.add_parser("rank-report", help="Kendall tau between a score table and true values")
    p.add_argument("--scores", required=True)
    p.add_argument("--true-values", required=True, help="CSV with columns ah_label,true_value")
    p.set_defaults(func=cmd_rank_report)
    p = sub.add_parser("theorem-check", help="analytic values and the Monte-Carlo replication")
    p.add_argument("--trials", type=int, default=20_000)
    p.add_argument("--H", type=int, default=6)
    p.add_argument("--n-episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_theorem_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, FormatError, OutputExists, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
