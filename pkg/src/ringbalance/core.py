"""Domain types shared across the package.

Durations are integer nanoseconds of virtual time so that the timing identity
``T == t_s + t_w + t_c`` holds exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

NS_PER_S = 1_000_000_000

MODE_KINDS = ("equal", "static", "adaptive")
MODEL_KINDS = ("linear", "softmax", "mlp")


class RingBalanceError(Exception):
    """Base class for errors raised by this package."""


def to_ns(seconds: float) -> int:
    return int(round(seconds * NS_PER_S))


def to_seconds(ns: int) -> float:
    return ns / NS_PER_S


@dataclass(frozen=True)
class WorkerProfile:
    """A simulated worker: its ring rank and how long one sample takes."""

    rank: int
    per_sample_cost: float  # seconds per sample
    jitter_sigma: float = 0.0

    @property
    def cost_ns(self) -> int:
        return to_ns(self.per_sample_cost)

    @property
    def speed(self) -> float:
        """Samples per second with jitter ignored."""
        return 1.0 / self.per_sample_cost


@dataclass(frozen=True)
class AllocationState:
    """Integer samples-per-aggregation for every worker, plus prior vectors."""

    weights: tuple[int, ...]
    total: int
    epoch: int = 0
    history: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(int(w) for w in self.weights))
        if sum(self.weights) != self.total:
            raise ValueError(
                f"weights {self.weights} sum to {sum(self.weights)}, expected {self.total}"
            )

    @classmethod
    def initial(cls, weights) -> "AllocationState":
        weights = tuple(int(w) for w in weights)
        return cls(weights=weights, total=sum(weights))

    @property
    def trajectory(self) -> list[tuple[int, ...]]:
        """All weight vectors so far, oldest first, current last."""
        return [*self.history, self.weights]


@dataclass(frozen=True)
class EpochTiming:
    """Per-worker timing for one aggregation (or summed over an epoch)."""

    t_s: tuple[int, ...]
    t_w: tuple[int, ...]
    t_c: int
    T: tuple[int, ...]

    @classmethod
    def from_compute(cls, t_s, t_c: int) -> "EpochTiming":
        """Barrier semantics: everyone waits for the slowest, then the collective runs."""
        t_s = tuple(int(t) for t in t_s)
        slowest = max(t_s)
        t_w = tuple(slowest - t for t in t_s)
        T = tuple(s + w + t_c for s, w in zip(t_s, t_w))
        return cls(t_s=t_s, t_w=t_w, t_c=int(t_c), T=T)

    def __add__(self, other: "EpochTiming") -> "EpochTiming":
        return EpochTiming(
            t_s=tuple(a + b for a, b in zip(self.t_s, other.t_s)),
            t_w=tuple(a + b for a, b in zip(self.t_w, other.t_w)),
            t_c=self.t_c + other.t_c,
            T=tuple(a + b for a, b in zip(self.T, other.T)),
        )

    @classmethod
    def zero(cls, n: int) -> "EpochTiming":
        return cls(t_s=(0,) * n, t_w=(0,) * n, t_c=0, T=(0,) * n)

    def check(self) -> None:
        for i, (s, w, t) in enumerate(zip(self.t_s, self.t_w, self.T)):
            if s + w + self.t_c != t:
                raise AssertionError(f"rank {i}: {s} + {w} + {self.t_c} != {t}")


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    weights: tuple[int, ...]
    timing: EpochTiming
    loss: float
    aggregations: int

    @property
    def epoch_time(self) -> int:
        """Time for the epoch; identical on every rank by construction."""
        return max(self.timing.T)

    @property
    def compute_time(self) -> int:
        """Epoch time spent before the collective (slowest worker's compute)."""
        return self.epoch_time - self.timing.t_c

    def mean_compute(self) -> tuple[float, ...]:
        """Mean per-aggregation gradient computing time per worker, in ns."""
        if self.aggregations == 0:
            return tuple(0.0 for _ in self.timing.t_s)
        return tuple(t / self.aggregations for t in self.timing.t_s)


@dataclass
class GradientBuffer:
    values: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")

    def __len__(self) -> int:
        return self.values.shape[0]

    def __add__(self, other: "GradientBuffer") -> "GradientBuffer":
        return GradientBuffer(self.values + other.values, self.sample_count + other.sample_count)

    @classmethod
    def zeros(cls, length: int) -> "GradientBuffer":
        return cls(np.zeros(length), 0)


@dataclass(frozen=True)
class CostModel:
    """Per-message latency (seconds) and link bandwidth (bytes/second)."""

    latency: float = 1e-5
    bandwidth: float = 1e9


@dataclass(frozen=True)
class RunMode:
    kind: str = "equal"
    weights: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(int(w) for w in self.weights))


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "softmax"
    hidden: int = 16
    init_scale: float = 0.1


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    size: int = 2000
    n_features: int = 4
    n_classes: int = 3
    separation: float = 4.0
    seed: int = 0
    path: str | None = None


@dataclass(frozen=True)
class StabilitySpec:
    window: int = 2
    tol: int = 1
    floor: int = 1
    smoothing: float = 0.0  # EMA coefficient on measured t_s; 0 disables


@dataclass(frozen=True)
class ExperimentConfig:
    workers: tuple[WorkerProfile, ...]
    model: ModelSpec = field(default_factory=ModelSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    mode: RunMode = field(default_factory=RunMode)
    minibatch: int = 5
    C: int = 20
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    epochs: int = 10
    link: CostModel = field(default_factory=CostModel)
    stability: StabilitySpec = field(default_factory=StabilitySpec)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "workers", tuple(self.workers))

    @property
    def n(self) -> int:
        return len(self.workers)

    def replace(self, **changes) -> "ExperimentConfig":
        from dataclasses import replace

        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["workers"] = [asdict(w) for w in self.workers]
        d["mode"] = {
            "kind": self.mode.kind,
            "weights": list(self.mode.weights) if self.mode.weights is not None else None,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        workers = []
        for i, w in enumerate(d.pop("workers")):
            w = dict(w)
            w.setdefault("rank", i)
            workers.append(WorkerProfile(**w))
        kwargs: dict[str, Any] = {"workers": workers}
        if "model" in d:
            kwargs["model"] = ModelSpec(**d.pop("model"))
        if "dataset" in d:
            kwargs["dataset"] = DatasetSpec(**d.pop("dataset"))
        if "mode" in d:
            mode = d.pop("mode")
            if isinstance(mode, str):
                mode = {"kind": mode}
            kwargs["mode"] = RunMode(**mode)
        if "link" in d:
            kwargs["link"] = CostModel(**d.pop("link"))
        if "stability" in d:
            kwargs["stability"] = StabilitySpec(**d.pop("stability"))
        kwargs.update(d)
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def validate(config: ExperimentConfig) -> list[str]:
    """Return every broken invariant as a human-readable string (empty if valid)."""
    problems = []
    n = config.n
    if n < 2:
        problems.append("ring requires n >= 2")
    ranks = [w.rank for w in config.workers]
    if sorted(ranks) != list(range(n)):
        problems.append(f"worker ranks must be a permutation of 0..{n - 1}, got {ranks}")
    for w in config.workers:
        if not w.per_sample_cost > 0:
            problems.append(f"worker {w.rank}: per_sample_cost must be positive")
        if not w.jitter_sigma >= 0:
            problems.append(f"worker {w.rank}: jitter_sigma must be >= 0")

    if config.C < 1:
        problems.append("C must be positive")
    if config.minibatch < 1:
        problems.append("minibatch must be positive")
    if not config.learning_rate > 0:
        problems.append("learning_rate must be positive")
    if config.weight_decay < 0:
        problems.append("weight_decay must be >= 0")
    if config.epochs < 1:
        problems.append("epochs must be positive")
    if config.link.latency < 0:
        problems.append("link latency must be >= 0")
    if not config.link.bandwidth > 0:
        problems.append("link bandwidth must be positive")

    st = config.stability
    if st.window < 2:
        problems.append("stability window must be >= 2")
    if st.tol < 0:
        problems.append("stability tol must be >= 0")
    if st.floor < 1:
        problems.append("allocation floor must be >= 1")
    elif n >= 1 and config.C < n * st.floor:
        problems.append(f"C={config.C} cannot give {n} workers at least {st.floor} each")
    if not 0 <= st.smoothing < 1:
        problems.append("smoothing must be in [0, 1)")

    mode = config.mode
    if mode.kind not in MODE_KINDS:
        problems.append(f"unknown mode {mode.kind!r}")
    if mode.kind == "static" and mode.weights is None:
        problems.append("static mode requires weights")
    if mode.weights is not None:
        if len(mode.weights) != n:
            problems.append(f"mode has {len(mode.weights)} weights for {n} workers")
        if sum(mode.weights) != config.C:
            problems.append(f"weights sum to {sum(mode.weights)}, expected C={config.C}")
        if any(w < st.floor for w in mode.weights):
            problems.append(f"every weight must be >= floor={st.floor}")

    if config.model.kind not in MODEL_KINDS:
        problems.append(f"unknown model kind {config.model.kind!r}")
    if config.model.kind == "mlp" and config.model.hidden < 1:
        problems.append("mlp hidden size must be positive")

    ds = config.dataset
    if ds.kind == "synthetic":
        if ds.size < config.C * config.minibatch:
            problems.append(
                f"dataset size {ds.size} < C*minibatch={config.C * config.minibatch}; "
                "an epoch would hold no aggregation"
            )
        if ds.n_features < 1 or ds.n_classes < 2:
            problems.append("synthetic dataset needs n_features >= 1 and n_classes >= 2")
    elif ds.kind == "csv":
        if not ds.path:
            problems.append("csv dataset requires a path")
    else:
        problems.append(f"unknown dataset kind {ds.kind!r}")
    return problems
