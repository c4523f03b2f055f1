"""Result persistence and comparison-table emission.

Each run gets one directory named by its deterministic run-id containing a
config snapshot, a per-round CSV log, and the final report. Directories are
plain files so results diff and version cleanly.
"""

from __future__ import annotations

import csv
import datetime
import json
import math
import os
from dataclasses import dataclass

from . import __version__
from . import data as dataio
from .config import BenchmarkSuite, ExperimentSpec
from .orchestrator import FclSchedule, RunResult, run_fcl, run_fl


@dataclass
class RunRecord:
    run_id: str
    values: dict                 # config snapshot
    rounds: list[dict]
    report: dict                 # {"final": {...}, "after_task": {"0": {...}, "1": {...}}}

    @property
    def is_fcl(self) -> bool:
        return self.values["cl_method"] != "none"


def _round_rows(result: RunResult) -> list[dict]:
    rows = []
    for log in result.round_logs:
        rows.append({
            "round": log.round_index,
            "task": log.task_index,
            "avg_mse": repr(log.report.avg_mse),
            "avg_rmse": repr(log.report.avg_rmse),
            "avg_pcc": repr(log.report.avg_pcc),
            "mean_client_train_loss": repr(sum(log.client_train_losses) / len(log.client_train_losses)),
            "wall_time": f"{log.wall_time:.4f}",
        })
    return rows


def _build_report(result: RunResult) -> dict:
    after_task = {}
    for log in result.round_logs:
        after_task[str(log.task_index)] = log.report.as_dict()  # last round of each task wins
    return {"final": result.round_logs[-1].report.as_dict(), "after_task": after_task}


class ResultsStore:
    """Append-only directory-per-run result store."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)

    def run_dir(self, run_id: str) -> str:
        return os.path.join(self.out_dir, run_id)

    def write_run(self, spec: ExperimentSpec, result: RunResult) -> RunRecord:
        run_id = spec.run_id()
        d = self.run_dir(run_id)
        os.makedirs(d, exist_ok=True)
        snapshot = {
            "run_id": run_id,
            "config": spec.values,
            "software_version": __version__,
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        }
        with open(os.path.join(d, "config.json"), "w", encoding="utf-8") as fh:
            json.dump(snapshot, fh, indent=2)
        rows = _round_rows(result)
        with open(os.path.join(d, "rounds.csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        report = _build_report(result)
        with open(os.path.join(d, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
        return RunRecord(run_id, dict(spec.values), rows, report)

    def load_run(self, run_id: str) -> RunRecord:
        d = self.run_dir(run_id)
        with open(os.path.join(d, "config.json"), encoding="utf-8") as fh:
            snapshot = json.load(fh)
        with open(os.path.join(d, "rounds.csv"), newline="", encoding="utf-8") as fh:
            rounds = list(csv.DictReader(fh))
        with open(os.path.join(d, "report.json"), encoding="utf-8") as fh:
            report = json.load(fh)
        return RunRecord(snapshot["run_id"], snapshot["config"], rounds, report)

    def list_runs(self) -> list[RunRecord]:
        records = []
        for name in sorted(os.listdir(self.out_dir)):
            if os.path.isfile(os.path.join(self.out_dir, name, "config.json")):
                records.append(self.load_run(name))
        return records


def execute_experiment(spec: ExperimentSpec, dataset: dataio.Dataset,
                       n_workers: int = 1) -> RunResult:
    """Split the shared dataset with the experiment's own seed and run it."""
    config = spec.build()
    train, test = dataio.train_test_split(dataset, 0.75, config.seed)
    if spec.is_fcl:
        return run_fcl(config, train, test, FclSchedule.default(config), n_workers)
    return run_fl(config, train, test, n_workers)


def run_suite(suite: BenchmarkSuite, dataset: dataio.Dataset, out_dir: str,
              n_workers: int = 1) -> tuple[ResultsStore, list[tuple[str, str]]]:
    """Execute every experiment, persisting results. Individual failures are
    recorded and do not stop the suite. Returns (store, failures)."""
    store = ResultsStore(out_dir)
    failures = []
    for spec in suite.experiments:
        try:
            result = execute_experiment(spec, dataset, n_workers)
            store.write_run(spec, result)
        except Exception as exc:
            failures.append((spec.run_id(), str(exc)))
    return store, failures


def verify_store(store: ResultsStore, dataset: dataio.Dataset,
                 n_workers: int = 1) -> list[tuple[str, str]]:
    """Re-run every stored experiment and compare final metrics bit-exactly.
    Returns a list of (run_id, message) reproducibility violations."""
    violations = []
    for record in store.list_runs():
        spec = ExperimentSpec(record.values)
        try:
            result = execute_experiment(spec, dataset, n_workers)
        except Exception as exc:
            violations.append((record.run_id, f"re-run failed: {exc}"))
            continue
        fresh = _build_report(result)["final"]
        stored = record.report["final"]
        for key in ("avg_mse", "avg_rmse", "avg_pcc"):
            a, b = fresh[key], stored[key]
            same = (a == b) or (isinstance(a, float) and isinstance(b, float)
                                and math.isnan(a) and math.isnan(b))
            if not same:
                violations.append((record.run_id, f"{key}: stored {b!r} != re-run {a!r}"))
    return violations


# ---------------------------------------------------------------------------
# Comparison tables
# ---------------------------------------------------------------------------

_METRIC_KEYS = ("avg_mse", "avg_rmse", "avg_pcc")
_METRIC_TITLES = ("Loss", "RMSE", "PCC")


def _fmt(value: float) -> str:
    return f"{value:.3f}" if value == value else "nan"


def _decorate(column_values: list[str], higher_is_better: bool) -> list[str]:
    """Bold the best and bracket the second-best 3-decimal value."""
    numeric = [(i, float(v)) for i, v in enumerate(column_values) if v not in ("-", "nan")]
    if len(numeric) < 2:
        return list(column_values)
    ordered = sorted(numeric, key=lambda p: -p[1] if higher_is_better else p[1])
    best_val = ordered[0][1]
    second_val = next((v for _, v in ordered if v != best_val), None)
    out = list(column_values)
    for i, v in numeric:
        if v == best_val:
            out[i] = f"**{column_values[i]}**"
        elif second_val is not None and v == second_val:
            out[i] = f"[{column_values[i]}]"
    return out


def _method_label(record: RunRecord) -> str:
    if record.is_fcl:
        label = f"FedAvg_{record.values['cl_method']}"
    else:
        label = record.values["strategy"]
    if record.values["augmentation"]:
        label += "_aug"
    return label


def _table_grid(records: list[RunRecord], fcl: bool):
    """Returns (header, rows) where each row is (label, [cell strings])."""
    client_counts = sorted({r.values["clients"] for r in records})
    stages = ["1"] if not fcl else ["0", "1"]
    stage_titles = [""] if not fcl else ["T1 ", "T2 "]

    header = ["Method"]
    col_better = []  # higher_is_better flag per metric column
    for n_cli in client_counts:
        for stage_title in stage_titles:
            for title, key in zip(_METRIC_TITLES, _METRIC_KEYS):
                header.append(f"{stage_title}{title} ({n_cli}c)")
                col_better.append(key == "avg_pcc")

    by_key = {}
    row_labels = []
    for r in records:
        label = _method_label(r)
        if label not in row_labels:
            row_labels.append(label)
        by_key[(label, r.values["clients"])] = r

    rows = []
    for label in row_labels:
        cells = []
        for n_cli in client_counts:
            r = by_key.get((label, n_cli))
            for stage in stages:
                if fcl:
                    rep = r.report["after_task"].get(stage) if r else None
                else:
                    rep = r.report["final"] if r else None
                for key in _METRIC_KEYS:
                    cells.append(_fmt(rep[key]) if rep else "-")
        rows.append((label, cells))
    return header, rows, col_better


def emit_table(store: ResultsStore, fmt: str = "markdown") -> str:
    """Emit Loss/RMSE/PCC comparison tables for the stored runs (FL table,
    then FCL table when both kinds are present), 3-decimal values; markdown
    marks best values bold and second-best bracketed per column."""
    if fmt not in ("markdown", "csv"):
        raise ValueError(f"unknown table format {fmt!r}")
    records = store.list_runs()
    if not records:
        raise ValueError("results store is empty")
    blocks = []
    for fcl, title in ((False, "Federated Learning"), (True, "Federated Continual Learning")):
        subset = [r for r in records if r.is_fcl == fcl]
        if not subset:
            continue
        header, rows, col_better = _table_grid(subset, fcl)
        if fmt == "markdown":
            columns = list(zip(*[cells for _, cells in rows])) if rows else []
            decorated = [_decorate(list(col), better)
                         for col, better in zip(columns, col_better)]
            out_rows = [[label] + [decorated[c][i] for c in range(len(decorated))]
                        for i, (label, _) in enumerate(rows)]
            lines = [f"## {title}", "",
                     "| " + " | ".join(header) + " |",
                     "|" + "|".join("---" for _ in header) + "|"]
            lines += ["| " + " | ".join(row) + " |" for row in out_rows]
            blocks.append("\n".join(lines))
        else:
            lines = [",".join(header)]
            lines += [",".join([label] + cells) for label, cells in rows]
            blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
