"""Run reports: CSV/JSON emission, parse-back, and speedup summaries.

CSV columns (one row per epoch and worker)::

    epoch,worker,w,t_s_ns,t_w_ns,t_c_ns,T_ns,loss

Durations are integer nanoseconds; ``loss`` is written with ``repr`` so it
parses back to the identical float.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .core import EpochReport, EpochTiming, RingBalanceError

CSV_HEADER = ["epoch", "worker", "w", "t_s_ns", "t_w_ns", "t_c_ns", "T_ns", "loss"]


class ConfigMismatch(RingBalanceError):
    pass


@dataclass(frozen=True)
class Rebalance:
    """One application of the allocation update at the start of ``epoch``."""

    epoch: int
    before: tuple[int, ...]
    after: tuple[int, ...]
    rates: tuple[float, ...]
    increments: tuple[float, ...]


@dataclass
class ExperimentReport:
    config: dict[str, Any]
    epochs: list[EpochReport] = field(default_factory=list)
    history: list[tuple[int, ...]] = field(default_factory=list)
    rebalances: list[Rebalance] = field(default_factory=list)
    frozen_weights: tuple[int, ...] | None = None
    frozen_epoch: int | None = None
    total_time_ns: int = 0
    clock: str = "virtual"
    final_params: tuple[float, ...] = ()

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].loss if self.epochs else float("nan")

    @property
    def final_weights(self) -> tuple[int, ...]:
        return self.epochs[-1].weights

    def steady_epochs(self) -> list[EpochReport]:
        """Epochs run with the final, no-longer-changing allocation."""
        start = self.frozen_epoch if self.frozen_epoch is not None else 0
        return [e for e in self.epochs if e.epoch >= start]

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "clock": self.clock,
            "epochs": [
                {
                    "epoch": e.epoch,
                    "weights": list(e.weights),
                    "t_s_ns": list(e.timing.t_s),
                    "t_w_ns": list(e.timing.t_w),
                    "t_c_ns": e.timing.t_c,
                    "T_ns": list(e.timing.T),
                    "loss": e.loss,
                    "aggregations": e.aggregations,
                }
                for e in self.epochs
            ],
            "history": [list(h) for h in self.history],
            "rebalances": [
                {
                    "epoch": r.epoch,
                    "before": list(r.before),
                    "after": list(r.after),
                    "rates": list(r.rates),
                    "increments": list(r.increments),
                }
                for r in self.rebalances
            ],
            "frozen_weights": list(self.frozen_weights) if self.frozen_weights is not None else None,
            "frozen_epoch": self.frozen_epoch,
            "total_time_ns": self.total_time_ns,
            "final_loss": self.final_loss,
            "final_params": list(self.final_params),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentReport":
        epochs = [
            EpochReport(
                epoch=e["epoch"],
                weights=tuple(e["weights"]),
                timing=EpochTiming(
                    t_s=tuple(e["t_s_ns"]), t_w=tuple(e["t_w_ns"]), t_c=e["t_c_ns"], T=tuple(e["T_ns"])
                ),
                loss=e["loss"],
                aggregations=e["aggregations"],
            )
            for e in d["epochs"]
        ]
        return cls(
            config=d["config"],
            epochs=epochs,
            history=[tuple(h) for h in d["history"]],
            rebalances=[
                Rebalance(
                    r["epoch"], tuple(r["before"]), tuple(r["after"]), tuple(r["rates"]), tuple(r["increments"])
                )
                for r in d["rebalances"]
            ],
            frozen_weights=tuple(d["frozen_weights"]) if d["frozen_weights"] is not None else None,
            frozen_epoch=d["frozen_epoch"],
            total_time_ns=d["total_time_ns"],
            clock=d.get("clock", "virtual"),
            final_params=tuple(d.get("final_params", ())),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _csv_rows(report: ExperimentReport):
    for e in report.epochs:
        t = e.timing
        for i in range(len(e.weights)):
            yield [e.epoch, i, e.weights[i], t.t_s[i], t.t_w[i], t.t_c, t.T[i], repr(float(e.loss))]


def to_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(_csv_rows(report))
    return buf.getvalue()


def write_csv(report: ExperimentReport, path) -> None:
    path = Path(path)
    try:
        path.write_text(to_csv(report))
    except OSError as exc:
        raise OSError(f"cannot write CSV report to {path}: {exc}") from exc


def read_csv(path) -> list[dict[str, Any]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return [
            {k: (float(v) if k == "loss" else int(v)) for k, v in row.items()} for row in reader
        ]


def write_json(report: ExperimentReport, path) -> None:
    path = Path(path)
    try:
        path.write_text(report.to_json() + "\n")
    except OSError as exc:
        raise OSError(f"cannot write JSON report to {path}: {exc}") from exc


def read_json(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


def mean_epoch_time(report: ExperimentReport) -> float:
    steady = report.steady_epochs()
    return sum(e.epoch_time for e in steady) / len(steady)


def mean_compute_time(report: ExperimentReport) -> float:
    steady = report.steady_epochs()
    return sum(e.compute_time for e in steady) / len(steady)


def _comparable(report: ExperimentReport) -> tuple:
    c = report.config
    return (c.get("model"), c.get("dataset"), c.get("C"), c.get("minibatch"), c.get("epochs"))


def speedup(a: ExperimentReport, b: ExperimentReport) -> float:
    """How many times faster ``a`` runs an epoch than ``b`` once allocations settle."""
    if _comparable(a) != _comparable(b):
        raise ConfigMismatch("reports differ in model, dataset, C, minibatch or epochs")
    return mean_epoch_time(b) / mean_epoch_time(a)


def sync_wait_spread(epoch: EpochReport) -> int:
    """Sum over ordered worker pairs of ``|t_w_i - t_w_j|`` for one epoch."""
    t_w = epoch.timing.t_w
    return sum(abs(a - b) for i, a in enumerate(t_w) for j, b in enumerate(t_w) if i != j)
