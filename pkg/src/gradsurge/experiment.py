"""Single experiment runs: data, split, training, evaluation, persistence."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError
from .graphs import gen_dataset, load_jsonl, split_dataset
from .tasks import build_model
from .training import Trainer

REPORT_FORMAT = "gradsurge-run-report"
REPORT_VERSION = 1


@dataclass
class RunReport:
    config: dict[str, Any]
    config_hash: str
    seed: int
    method: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    test_auc: float | None = None
    w_trace: list[tuple[int, int, float]] = field(default_factory=list)
    kappa_trace: list[tuple[int, int, float]] = field(default_factory=list)
    final_w: list[float] = field(default_factory=list)
    final_kappa: list[float] = field(default_factory=list)
    selection: str = "best validation ROC-AUC epoch"
    wall_clock_s: float = 0.0

    def __post_init__(self):
        if self.test_auc is not None and not 0.0 <= self.test_auc <= 1.0:
            raise ConfigError(f"test ROC-AUC {self.test_auc} outside [0, 1]")
        self.w_trace = [(int(s), int(i), float(v)) for s, i, v in self.w_trace]
        self.kappa_trace = [(int(s), int(i), float(v)) for s, i, v in self.kappa_trace]

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["w_trace"] = [list(t) for t in self.w_trace]
        d["kappa_trace"] = [list(t) for t in self.kappa_trace]
        return {"format": REPORT_FORMAT, "version": REPORT_VERSION, **d}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "RunReport":
        d = dict(d)
        if d.pop("format", None) != REPORT_FORMAT or d.pop("version", None) != REPORT_VERSION:
            raise ConfigError("not a gradsurge run report (or an unsupported version)")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"malformed run report: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True, allow_nan=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def without_wall_clock(self) -> dict[str, Any]:
        d = self.to_json()
        d.pop("wall_clock_s")
        return d


def write_trace(path: str | Path, trace) -> None:
    """CSV with columns step, component, value (one row per component per update)."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["step", "component", "value"])
        for s, i, v in trace:
            out.writerow([s, i, repr(float(v))])


def read_trace(path: str | Path) -> list[tuple[int, int, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(int(s), int(i), float(v)) for s, i, v in rows[1:]]


def load_graphs(cfg: ExperimentConfig):
    if cfg.data_path:
        return load_jsonl(cfg.data_path)
    return gen_dataset(cfg.seed, cfg.n_graphs, (cfg.n_nodes_min, cfg.n_nodes_max), cfg.edge_prob)


def _finite_or_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunReport:
    """Train one method on one seed and (optionally) persist the report under ``out_dir/runs/<hash>/``."""
    start = time.perf_counter()
    tcfg = cfg.train_config()
    split = split_dataset(load_graphs(cfg), cfg.seed, cfg.fractions)
    model = build_model(np.random.default_rng(cfg.seed), tcfg.effective_aux, cfg.variant, cfg.n_layers, cfg.hidden)
    result = Trainer(tcfg).fit(model, split)
    report = RunReport(
        config=cfg.to_dict(),
        config_hash=cfg.hash(),
        seed=cfg.seed,
        method=cfg.method,
        epochs=result.epochs,
        best_epoch=result.best_epoch,
        test_auc=_finite_or_none(result.test_auc),
        w_trace=result.w_trace,
        kappa_trace=result.kappa_trace,
        final_w=[] if result.weights is None or cfg.method != "blo" else result.weights.tolist(),
        final_kappa=[] if result.kappa is None or cfg.method not in ("rcgrad", "blorc")
        else result.kappa.as_vector().tolist(),
        wall_clock_s=time.perf_counter() - start,
    )
    if write:
        save_run(report, cfg.out_dir)
    return report


def save_run(report: RunReport, out_dir: str | Path) -> Path:
    run_dir = Path(out_dir) / "runs" / report.config_hash
    run_dir.mkdir(parents=True, exist_ok=True)
    report.save(run_dir / "report.json")
    write_trace(run_dir / "trace_w.csv", report.w_trace)
    write_trace(run_dir / "trace_kappa.csv", report.kappa_trace)
    return run_dir
