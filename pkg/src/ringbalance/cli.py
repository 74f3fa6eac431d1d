"""Command-line entry point.

Subcommands::

    ringbalance run --config c.json [--mode adaptive] [--epochs N] [--seed S] --out results/
    ringbalance sweep --config c.json --costs 0.001,0.002 --costs 0.001,0.002,0.002 --out sweep/
    ringbalance verify-allocator --n 2..8 --trials 1000 --seed 7
    ringbalance gradcheck --model mlp --trials 100 --seed 7
    ringbalance worker --config c.json --rank 0 --peers 127.0.0.1:5000,127.0.0.1:5001 [--out dir]

Exit codes: 0 success, 1 validation or check failure, 2 runtime error,
64 usage error. Set ``RINGBALANCE_LOG`` to error, info or debug.

Config file (JSON; omitted sections take their defaults)::

    {
      "workers": [{"per_sample_cost": 0.001, "jitter_sigma": 0.0},
                  {"per_sample_cost": 0.002}],
      "model": {"kind": "softmax", "hidden": 16, "init_scale": 0.1},
      "dataset": {"kind": "synthetic", "size": 2000, "n_features": 4,
                  "n_classes": 3, "separation": 4.0, "seed": 0},
      "mode": {"kind": "adaptive", "weights": [10, 10]},
      "minibatch": 5, "C": 20, "learning_rate": 0.01, "weight_decay": 0.0001,
      "epochs": 10,
      "link": {"latency": 1e-05, "bandwidth": 1000000000.0},
      "stability": {"window": 2, "tol": 1, "floor": 1, "smoothing": 0.0},
      "seed": 0
    }

``per_sample_cost`` and ``latency`` are seconds, ``bandwidth`` bytes/second.
A CSV dataset is ``{"kind": "csv", "path": "data.csv"}`` (header row, label
in the last column).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import allocator, metrics
from .core import ExperimentConfig, RunMode, WorkerProfile, validate
from .engine import InvalidConfig, run_experiment, run_worker
from .trainer import gradient_check
from .transport import TcpTransport, parse_address

log = logging.getLogger("ringbalance")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2, 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(text)]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ringbalance", description="Heterogeneity-aware allocation for ring allreduce training.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def overrides(sp):
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--mode", choices=["equal", "static", "adaptive"])
        sp.add_argument("--weights", type=_ints, help="comma-separated weights (static mode or adaptive start)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)

    run = sub.add_parser("run", help="run one experiment and write run.csv / run.json")
    overrides(run)

    sweep = sub.add_parser("sweep", help="one experiment per cost vector, plus summary.csv")
    overrides(sweep)
    sweep.add_argument("--costs", type=_floats, action="append", required=True,
                       help="comma-separated per-sample costs in seconds; repeat per cluster")

    va = sub.add_parser("verify-allocator", help="closed form vs linear system on random instances")
    va.add_argument("--n", type=_int_range, default=_int_range("2..16"))
    va.add_argument("--trials", type=int, default=1000)
    va.add_argument("--seed", type=int, default=0)
    va.add_argument("--tol", type=float, default=1e-9)

    gc = sub.add_parser("gradcheck", help="finite-difference check of a model's gradient")
    gc.add_argument("--model", choices=["linear", "softmax", "mlp"], required=True)
    gc.add_argument("--trials", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)

    wk = sub.add_parser("worker", help="run one rank of a wall-clock experiment over TCP")
    overrides(wk)
    wk.add_argument("--rank", type=int, required=True)
    wk.add_argument("--peers", required=True, help="host:port for every rank, comma-separated, in rank order")
    wk.add_argument("--time-scale", type=float, default=1.0, help="multiply simulated compute costs")
    return p


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    changes = {}
    if args.mode or args.weights:
        kind = args.mode or config.mode.kind
        weights = args.weights if args.weights else (config.mode.weights if kind != "equal" else None)
        changes["mode"] = RunMode(kind, weights)
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.seed is not None:
        changes["seed"] = args.seed
    return config.replace(**changes) if changes else config


def _write(report, out: Path, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_csv(report, out / f"{stem}.csv")
    metrics.write_json(report, out / f"{stem}.json")


def _cmd_run(args) -> int:
    config = _load_config(args)
    problems = validate(config)
    if problems:
        for msg in problems:
            print(f"invalid config: {msg}", file=sys.stderr)
        return EXIT_INVALID
    report = run_experiment(config)
    out = args.out or Path("results")
    _write(report, out, "run")
    print(f"epochs={len(report.epochs)} final_weights={list(report.final_weights)} "
          f"frozen_epoch={report.frozen_epoch} total_time_ns={report.total_time_ns} "
          f"final_loss={report.final_loss:.6g}")
    print(f"wrote {out / 'run.csv'} and {out / 'run.json'}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    base = _load_config(args)
    out = args.out or Path("sweep")
    configs = []
    for costs in args.costs:
        workers = []
        for r, c in enumerate(costs):
            jitter = base.workers[r].jitter_sigma if r < base.n else 0.0
            workers.append(WorkerProfile(r, c, jitter))
        mode = base.mode
        if mode.weights is not None and len(mode.weights) != len(costs):
            mode = RunMode(mode.kind if mode.kind != "static" else "equal", None)
        configs.append(base.replace(workers=tuple(workers), mode=mode))

    bad = False
    for i, config in enumerate(configs):
        for msg in validate(config):
            print(f"invalid config for cluster {i}: {msg}", file=sys.stderr)
            bad = True
    if bad:
        return EXIT_INVALID

    reports = [run_experiment(c) for c in configs]
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (costs, report) in enumerate(zip(args.costs, reports)):
        _write(report, out, f"run_{i}")
        rows.append({
            "cluster": i,
            "costs": " ".join(repr(c) for c in costs),
            "n": len(costs),
            "mode": report.config["mode"]["kind"],
            "final_weights": " ".join(str(w) for w in report.final_weights),
            "frozen_epoch": "" if report.frozen_epoch is None else report.frozen_epoch,
            "mean_epoch_time_ns": repr(metrics.mean_epoch_time(report)),
            "speedup_vs_first": repr(metrics.speedup(report, reports[0])),
            "final_loss": repr(report.final_loss),
        })
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(f"cluster {row['cluster']} costs=[{row['costs']}] weights=[{row['final_weights']}] "
              f"epoch_time_ns={float(row['mean_epoch_time_ns']):.0f} speedup={float(row['speedup_vs_first']):.3f}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    if args.trials < 1:
        print("trials must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    residual = allocator.max_oracle_residual(args.n, args.trials, args.seed)
    ok = residual < args.tol
    print(f"n={args.n[0]}..{args.n[-1]} trials={args.trials} max_relative_residual={residual:.3e} "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVALID


def _cmd_gradcheck(args) -> int:
    if args.trials < 1:
        print("trials must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    err = gradient_check(args.model, args.trials, args.seed)
    ok = err < args.tol
    print(f"model={args.model} trials={args.trials} max_relative_error={err:.3e} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVALID


def _cmd_worker(args) -> int:
    config = _load_config(args)
    addresses = [parse_address(a) for a in args.peers.split(",")]
    if len(addresses) != config.n:
        print(f"{len(addresses)} peers given for {config.n} workers", file=sys.stderr)
        return EXIT_INVALID
    problems = validate(config)
    if problems:
        for msg in problems:
            print(f"invalid config: {msg}", file=sys.stderr)
        return EXIT_INVALID
    transport = TcpTransport(args.rank, addresses).connect()
    try:
        report = run_worker(config, args.rank, transport, time_scale=args.time_scale)
    finally:
        transport.close()
    if args.rank == 0 and args.out:
        _write(report, args.out, "run")
    print(f"rank={args.rank} final_weights={list(report.final_weights)} final_loss={report.final_loss:.6g}")
    return EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "verify-allocator": _cmd_verify,
    "gradcheck": _cmd_gradcheck,
    "worker": _cmd_worker,
}


def main(argv=None) -> int:
    level = os.environ.get("RINGBALANCE_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except InvalidConfig as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - map everything else to the runtime exit code
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
