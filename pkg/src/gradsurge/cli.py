"""Command-line entry point: ``gradsurge {gen-data,train,sweep,verify,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, config_reference, load_config
from .errors import ConfigError, GradsurgeError, VerificationError
from .graphs import save_jsonl
from .sweep import DEFAULT_SEEDS, format_table, read_runs_csv, aggregate, sweep


def _common(p: argparse.ArgumentParser, method_help: str = "training method") -> None:
    p.add_argument("--config", metavar="PATH", help="JSON configuration file")
    p.add_argument("--seed", type=int, help="master seed (fallback: $GRADSURGE_SEED, then 0)")
    p.add_argument("--method", help=method_help)
    p.add_argument("--aux", help="comma-separated auxiliary tasks, e.g. am,ep,ig,mp ('' for none)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-graphs", type=int, dest="n_graphs")
    p.add_argument("--alpha", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--target-train-size", type=int, dest="target_train_size")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")


def _resolve(args, method: str | None = None) -> ExperimentConfig:
    overrides = {
        "seed": args.seed,
        "method": method if method is not None else args.method,
        "aux_tasks": args.aux,
        "out_dir": args.out,
        "epochs": args.epochs,
        "n_graphs": args.n_graphs,
        "alpha": args.alpha,
        "optimizer": args.optimizer,
        "hidden": args.hidden,
        "target_train_size": args.target_train_size,
    }
    return load_config(args.config, overrides)


def _gen_data(args) -> int:
    cfg = _resolve(args)
    if args.print_config:
        print(cfg.dumps())
        return 0
    from .experiment import load_graphs

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"dataset_seed{cfg.seed}.jsonl"
    graphs = load_graphs(cfg)
    save_jsonl(graphs, path)
    print(f"wrote {len(graphs)} graphs to {path}")
    return 0


def _train(args) -> int:
    cfg = _resolve(args)
    if args.print_config:
        print(cfg.dumps())
        return 0
    from .experiment import run_experiment

    rep = run_experiment(cfg)
    print(json.dumps({"method": rep.method, "seed": rep.seed, "config_hash": rep.config_hash,
                      "best_epoch": rep.best_epoch, "test_auc": rep.test_auc,
                      "run_dir": str(Path(cfg.out_dir) / "runs" / rep.config_hash)}))
    return 0


def _sweep(args) -> int:
    methods = [m for m in (args.method or "").split(",") if m]
    configs = [_resolve(args, m) for m in methods] if methods else [_resolve(args)]
    if args.print_config:
        print(json.dumps([c.to_dict() for c in configs], indent=2, sort_keys=True))
        return 0
    res = sweep(configs, n_seeds=args.seeds, threads=args.threads, out_dir=configs[0].out_dir)
    print(res.table(), end="")
    return 0


def _verify(args) -> int:
    from .verify import all_passed, run_checks, summarize

    results = run_checks(tolerance_scale=args.tolerance_scale, beta=args.beta)
    if args.json:
        print(json.dumps([r.to_json() for r in results], indent=1))
    else:
        print(summarize(results))
    if not all_passed(results):
        bad = [r for r in results if not r.passed]
        raise VerificationError(f"{len(bad)} check(s) failed: " + "; ".join(
            f"{r.module}/{r.property} observed {r.observed:.3g} vs {r.expected:.3g} (tol {r.tolerance:.3g})"
            for r in bad))
    return 0


def _report(args) -> int:
    if args.config_reference:
        print(config_reference(), end="")
        return 0
    if not args.path:
        raise ConfigError("report needs a run directory, report.json or sweep directory")
    p = Path(args.path)
    if (p / "sweep_runs.csv").exists():
        print(format_table(aggregate(read_runs_csv(p / "sweep_runs.csv"))), end="")
        return 0
    from .experiment import RunReport

    path = p / "report.json" if p.is_dir() else p
    if not path.exists():
        raise ConfigError(f"no report found at {args.path}")
    rep = RunReport.load(path)
    print(f"method {rep.method}  seed {rep.seed}  config {rep.config_hash}")
    print(f"best epoch {rep.best_epoch}  test AUC {rep.test_auc}  wall {rep.wall_clock_s:.1f}s")
    print("epoch  train_target  valid_auc  test_auc")
    for e in rep.epochs:
        print(f"{e['epoch']:5d}  {e['train_loss'].get('target', float('nan')):12.4f}  "
              f"{_f(e.get('valid_auc')):>9s}  {_f(e.get('test_auc')):>8s}")
    return 0


def _f(x) -> str:
    return "-" if x is None else f"{x:.4f}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradsurge", description="Auxiliary-task gradient adaptation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic graph dataset as JSON lines")
    _common(p)
    p.set_defaults(func=_gen_data)

    p = sub.add_parser("train", help="run one experiment")
    _common(p)
    p.set_defaults(func=_train)

    p = sub.add_parser("sweep", help="run methods over several seeds and aggregate test AUC")
    _common(p, method_help="comma-separated methods, e.g. ft,mtl,rcgrad")
    p.add_argument("--seeds", type=int, default=DEFAULT_SEEDS, help="number of seeds per method")
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.set_defaults(func=_sweep)

    p = sub.add_parser("verify", help="run the built-in correctness checks")
    p.add_argument("--tolerance-scale", type=float, default=1.0, help="multiply every tolerance (< 1 tightens)")
    p.add_argument("--beta", type=float, help="Neumann step for the hypergradient check (default 0.1/lambda_max)")
    p.add_argument("--json", action="store_true", help="machine-readable results")
    p.set_defaults(func=_verify)

    p = sub.add_parser("report", help="print a run report or a sweep summary")
    p.add_argument("path", nargs="?", help="run directory, report.json or sweep output directory")
    p.add_argument("--config-reference", action="store_true", help="print the configuration reference")
    p.set_defaults(func=_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except GradsurgeError as exc:
        diag = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code,
                "command": args.command}
        print(json.dumps(diag), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
