"""Text formats for datasets, policies, Q-tables, score tables and summaries.

Floats are written with ``repr`` so every file parses back to the exact
values that produced it.  Datasets and score tables carry a JSON sidecar
(``<file>.meta.json``) with the fields that have no column of their own.
"""
from __future__ import annotations

import csv
import json
import math
import os
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .core import AHSpec, Dataset, TabularPolicy, TabularQ, Trajectory, format_value
from .select import ScoreTable, SelectionReport

DATASET_COLUMNS = ("traj_id", "t", "state", "action", "reward", "next_state", "propensity")
TABLE_COLUMNS = ("state", "action", "value")


class FormatError(ValueError):
    pass


def sidecar(path) -> Path:
    return Path(str(path) + ".meta.json")


def _num(v) -> str:
    if isinstance(v, (np.integer, int)) and not isinstance(v, bool):
        return str(int(v))
    return format_value(float(v))


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_text(path, text: str):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)


def _csv_text(header, rows) -> str:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_csv(path, expected=None):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if expected is not None and tuple(header) != tuple(expected):
        raise FormatError(f"{path}: expected header {','.join(expected)}, got {','.join(header)}")
    return header, body


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, np.generic):
        return _json_safe(v.item())
    if isinstance(v, dict):
        return {str(k): _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


# --- datasets -------------------------------------------------------------


def write_dataset(path, dataset: Dataset):
    rows = []
    for i, tr in enumerate(dataset):
        for t in range(len(tr)):
            rows.append(
                (i, t, int(tr.states[t]), int(tr.actions[t]), _num(tr.rewards[t]),
                 int(tr.next_states[t]), _num(tr.propensities[t]))
            )
    _write_text(path, _csv_text(DATASET_COLUMNS, rows))
    aux_keys = sorted(dataset.trajectories[0].aux) if dataset.trajectories[0].aux else []
    meta = {
        "gamma": dataset.gamma,
        "n_states": dataset.n_states,
        "n_actions": dataset.n_actions,
        "env_tag": dataset.env_tag,
        "n_trajectories": len(dataset),
        "aux": {k: [[_num(v) for v in tr.aux[k]] for tr in dataset] for k in aux_keys},
    }
    _write_text(sidecar(path), _dump_json(meta))


def read_dataset(path) -> Dataset:
    _, body = _read_csv(path, DATASET_COLUMNS)
    meta_path = sidecar(path)
    if not meta_path.exists():
        raise FormatError(f"{path}: missing metadata file {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    groups: dict[int, list] = {}
    for line_no, row in enumerate(body, start=2):
        if len(row) != len(DATASET_COLUMNS):
            raise FormatError(f"{path}:{line_no}: expected {len(DATASET_COLUMNS)} fields")
        try:
            i, t, s, a = (int(x) for x in row[:4])
            r, ns, p = float(row[4]), int(row[5]), float(row[6])
        except ValueError as exc:
            raise FormatError(f"{path}:{line_no}: {exc}") from None
        steps = groups.setdefault(i, [])
        if t != len(steps):
            raise FormatError(f"{path}:{line_no}: trajectory {i} step {t} out of order")
        steps.append((s, a, r, ns, p))
    if sorted(groups) != list(range(len(groups))):
        raise FormatError(f"{path}: trajectory ids must be 0..n-1")
    aux = meta.get("aux", {})
    trajs = []
    for i in range(len(groups)):
        extra = {k: [float(v) for v in aux[k][i]] for k in aux} if aux else None
        trajs.append(Trajectory.from_steps(groups[i], aux=extra))
    return Dataset(tuple(trajs), float(meta["gamma"]), int(meta["n_states"]), int(meta["n_actions"]),
                   meta.get("env_tag", ""))


# --- policies and Q-tables ------------------------------------------------


def _table_text(values: np.ndarray) -> str:
    S, A = values.shape
    return _csv_text(TABLE_COLUMNS, ((s, a, _num(values[s, a])) for s in range(S) for a in range(A)))


def _read_table(path) -> np.ndarray:
    _, body = _read_csv(path, TABLE_COLUMNS)
    try:
        cells = [(int(s), int(a), float(v)) for s, a, v in body]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    S = max(c[0] for c in cells) + 1
    A = max(c[1] for c in cells) + 1
    if len(cells) != S * A:
        raise FormatError(f"{path}: expected {S * A} rows for a {S}x{A} table, got {len(cells)}")
    out = np.full((S, A), np.nan)
    for s, a, v in cells:
        out[s, a] = v
    if np.isnan(out).any():
        raise FormatError(f"{path}: duplicate or missing (state, action) rows")
    return out


def write_policy(path, policy: TabularPolicy):
    _write_text(path, _table_text(policy.probs))


def read_policy(path) -> TabularPolicy:
    return TabularPolicy(_read_table(path))


def write_q(path, q: TabularQ):
    _write_text(path, _table_text(q.values))


def read_q(path) -> TabularQ:
    return TabularQ(_read_table(path))


# --- score tables and summaries -------------------------------------------


def score_table_rows(table: ScoreTable):
    header = ["ah_label"] + [f"split_{k}" for k in range(table.n_repetitions)] + ["aggregate", "n_undefined"]
    rows = []
    for i, ah in enumerate(table.ah_specs):
        cells = [_num(v) for v in table.scores[i]]
        rows.append([ah.display_label, *cells, _num(table.aggregate[i]), int(table.n_undefined[i])])
    return header, rows


def write_score_table(path, table: ScoreTable):
    header, rows = score_table_rows(table)
    _write_text(path, _csv_text(header, rows))
    meta = {
        "ahs": [
            {"algorithm": ah.algorithm_id, "params": dict(ah.params), "label": ah.display_label}
            for ah in table.ah_specs
        ],
        "diagnostics": [list(r) for r in table.diagnostics],
    }
    _write_text(sidecar(path), _dump_json(_json_safe(meta)))


def read_score_table(path) -> ScoreTable:
    header, body = _read_csv(path)
    K = len(header) - 3
    if header[0] != "ah_label" or header[-2:] != ["aggregate", "n_undefined"] or K < 1 or \
            header[1:-2] != [f"split_{k}" for k in range(K)]:
        raise FormatError(f"{path}: not a score table header")
    meta_path = sidecar(path)
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else None
    ahs, scores = [], []
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise FormatError(f"{path}:{i + 2}: expected {len(header)} fields")
        label = row[0]
        if meta is not None:
            m = meta["ahs"][i]
            ahs.append(AHSpec(m["algorithm"], m["params"], m["label"]))
        else:
            ahs.append(AHSpec(label.split("(", 1)[0], (), label))
        try:
            scores.append([float(x) for x in row[1 : 1 + K]])
        except ValueError as exc:
            raise FormatError(f"{path}:{i + 2}: {exc}") from None
    diag = tuple(tuple(r) for r in meta["diagnostics"]) if meta is not None else ()
    return ScoreTable(tuple(ahs), np.array(scores), diag)


def versions() -> dict:
    return {"ssrlab": __version__, "numpy": np.__version__, "python": platform.python_version()}


def summary_record(
    report: SelectionReport, estimator_id: str, true_value=None, true_value_se=None, extra=None
) -> dict:
    table = report.score_table
    rec = {
        "strategy": report.strategy_tag,
        "estimator": estimator_id,
        "chosen_label": report.chosen.display_label,
        "chosen_index": report.chosen_index,
        "aggregate": float(table.aggregate[report.chosen_index]),
        "aggregates": {ah.display_label: float(v) for ah, v in zip(table.ah_specs, table.aggregate)},
        "true_value": true_value,
        "true_value_se": true_value_se,
        "seed": report.seed,
        "policy_flags": list(report.deployed_policy.flags),
        "versions": versions(),
    }
    if extra:
        rec.update(extra)
    return _json_safe(rec)


def write_summary(path, record: dict):
    _write_text(path, _dump_json(_json_safe(record)))


def read_summary(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def remove_quietly(paths):
    for p in paths:
        try:
            os.remove(p)
        except FileNotFoundError:
            pass
