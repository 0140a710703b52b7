"""Seed sweeps over a list of configurations, with per-method aggregation.

Runs are independent and may execute in a process pool. Results are
collected in submission order by the calling process, which alone writes
files, so the outputs do not depend on scheduling.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .config import ExperimentConfig
from .errors import UsageError
from .experiment import RunReport, run_experiment, save_run

DEFAULT_SEEDS = 10

RUN_COLUMNS = ["method", "config_id", "seed", "test_auc", "best_epoch", "wall_clock_s"]
SUMMARY_COLUMNS = ["method", "config_id", "n", "mean_test_auc", "std_test_auc", "wall_clock_s"]


def _run_quiet(cfg: ExperimentConfig) -> RunReport:
    return run_experiment(cfg, write=False)


@dataclass
class SweepResult:
    runs: list[dict]
    summary: list[dict]

    def table(self) -> str:
        return format_table(self.summary)


def config_id(cfg: ExperimentConfig) -> str:
    """Hash of a configuration with its seed zeroed: identifies the seed group."""
    return cfg.replace(seed=0).hash()


def aggregate(runs: Sequence[dict]) -> list[dict]:
    """Mean and sample standard deviation of test AUC per (method, config) group, in first-seen order."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in runs:
        groups.setdefault((r["method"], r["config_id"]), []).append(r)
    out = []
    for (method, cid), rows in groups.items():
        aucs = [r["test_auc"] for r in rows if r["test_auc"] is not None]
        mean = math.fsum(aucs) / len(aucs) if aucs else float("nan")
        std = statistics.stdev(aucs) if len(aucs) > 1 else 0.0
        out.append({
            "method": method, "config_id": cid, "n": len(aucs),
            "mean_test_auc": mean, "std_test_auc": std,
            "wall_clock_s": math.fsum(r["wall_clock_s"] for r in rows),
        })
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def format_table(summary: Sequence[dict]) -> str:
    header = ["method", "config", "n", "test AUC mean", "std", "wall s"]
    body = [[r["method"], r["config_id"], str(r["n"]), f"{r['mean_test_auc']:.4f}",
             f"{r['std_test_auc']:.4f}", f"{r['wall_clock_s']:.1f}"] for r in summary]
    widths = [max(len(row[j]) for row in [header] + body) for j in range(len(header))]
    lines = []
    for row in [header] + body:
        cells = [c.ljust(wd) if j < 2 else c.rjust(wd) for j, (c, wd) in enumerate(zip(row, widths))]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n"


def sweep(
    configs: Sequence[ExperimentConfig],
    n_seeds: int = DEFAULT_SEEDS,
    threads: int = 1,
    runner: Callable[[ExperimentConfig], RunReport] | None = None,
    out_dir: str | Path | None = None,
    write_runs: bool = True,
) -> SweepResult:
    """Run every config for seeds ``cfg.seed, cfg.seed + 1, ...`` and aggregate test AUC.

    ``runner`` must be a picklable top-level callable when ``threads > 1``.
    With ``out_dir`` set, writes ``sweep_runs.csv``, ``sweep_summary.csv``
    and ``sweep_summary.txt`` there, plus one run directory per report.
    """
    if n_seeds < 1:
        raise UsageError("n_seeds must be >= 1")
    if threads < 1:
        raise UsageError("threads must be >= 1")
    runner = runner or _run_quiet
    jobs = [c.replace(seed=c.seed + s) for c in configs for s in range(n_seeds)]
    if threads == 1 or len(jobs) <= 1:
        reports = [runner(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(runner, jobs))  # map preserves submission order

    runs = []
    for job, rep in zip(jobs, reports):
        runs.append({
            "method": job.method, "config_id": config_id(job), "seed": job.seed,
            "test_auc": rep.test_auc, "best_epoch": rep.best_epoch, "wall_clock_s": rep.wall_clock_s,
        })
        if out_dir is not None and write_runs and isinstance(rep, RunReport):
            save_run(rep, out_dir)
    result = SweepResult(runs, aggregate(runs))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep_runs.csv").write_text(_csv(runs, RUN_COLUMNS))
        (out / "sweep_summary.csv").write_text(_csv(result.summary, SUMMARY_COLUMNS))
        (out / "sweep_summary.txt").write_text(result.table())
    return result


def read_runs_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["best_epoch"] = int(r["best_epoch"])
        r["test_auc"] = float(r["test_auc"]) if r["test_auc"] else None
        r["wall_clock_s"] = float(r["wall_clock_s"])
    return rows
