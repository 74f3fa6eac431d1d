"""Run the self-adaptive allocation loop over simulated heterogeneous workers.

Two drivers share the same epoch structure:

* :func:`run_experiment` is single-threaded on a virtual clock. Compute time
  comes from each worker's cost model, the collective time from
  :func:`allreduce_time`, and the gradients still travel through a real ring
  allreduce over in-memory queues.
* :func:`run_worker` is one rank of a wall-clock run over any transport (TCP
  across processes, or in-memory across threads). Compute cost is imposed by
  sleeping.
"""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Sequence
from fractions import Fraction

import numpy as np

from . import allocator
from .collective import RingPosition, allgather_scalar, ring_allreduce, simulate_allgather, simulate_allreduce
from .core import (
    NS_PER_S,
    AllocationState,
    CostModel,
    EpochReport,
    EpochTiming,
    ExperimentConfig,
    RingBalanceError,
    WorkerProfile,
    validate,
)
from .metrics import ExperimentReport, Rebalance
from .trainer import (
    Dataset,
    Model,
    Partition,
    accumulate_with_loss,
    dataset_from_spec,
    draw_indices,
    model_from_spec,
    partition,
    sgd_step,
)
from .transport import InMemoryHub

log = logging.getLogger(__name__)


class InvalidConfig(RingBalanceError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class InvariantViolation(RingBalanceError):
    pass


class VirtualClock:
    def __init__(self, start_ns: int = 0):
        self.now_ns = start_ns

    def advance(self, delta_ns: int) -> int:
        if delta_ns < 0:
            raise ValueError("cannot move the clock backwards")
        self.now_ns += delta_ns
        return self.now_ns


def compute_time(profile: WorkerProfile, samples: int, rng: np.random.Generator | None = None) -> int:
    """Nanoseconds for ``samples`` gradients, with multiplicative lognormal jitter if configured."""
    base = samples * profile.cost_ns
    if profile.jitter_sigma > 0 and samples > 0:
        return int(round(base * rng.lognormal(0.0, profile.jitter_sigma)))
    return base


def waiting_times(t_s: Sequence[int]) -> tuple[int, ...]:
    slowest = max(t_s)
    return tuple(slowest - t for t in t_s)


def allreduce_time(n: int, payload_bytes: int, cm: CostModel) -> int:
    """``2(n-1)`` lockstep steps, each one latency plus one ``payload/n`` chunk transfer."""
    if n < 2:
        raise ValueError("ring requires n >= 2")
    per_step = Fraction(cm.latency) + Fraction(payload_bytes, n) / Fraction(cm.bandwidth)
    return int(round(2 * (n - 1) * per_step * NS_PER_S))


def initial_weights(config: ExperimentConfig) -> tuple[int, ...]:
    if config.mode.weights is not None:
        return config.mode.weights
    return tuple(allocator.apportion([config.C / config.n] * config.n, config.C, config.stability.floor))


def run_epoch(
    cluster: Sequence[WorkerProfile],
    model: Model,
    dataset: Dataset,
    part: Partition,
    weights: Sequence[int],
    *,
    minibatch: int,
    learning_rate: float,
    weight_decay: float = 0.0,
    cost_model: CostModel = CostModel(),
    rng: np.random.Generator | None = None,
    transports=None,
    epoch: int = 0,
) -> tuple[Model, EpochReport]:
    n = len(cluster)
    C = sum(weights)
    aggregations = len(dataset) // (C * minibatch)
    if transports is None:
        transports = InMemoryHub(n).endpoints()
    t_c = allreduce_time(n, model.size * 8, cost_model)

    total = EpochTiming.zero(n)
    loss_sum = 0.0
    consumed = 0
    for a in range(aggregations):
        buffers, t_s = [], []
        for i, profile in enumerate(cluster):
            k = weights[i] * minibatch
            idx = draw_indices(part.ranges[i], k, a * k)
            buf, loss = accumulate_with_loss(model, dataset.X[idx], dataset.y[idx], minibatch, weights[i])
            buffers.append(buf)
            loss_sum += loss
            consumed += k
            t_s.append(compute_time(profile, k, rng))
        timing = EpochTiming.from_compute(t_s, t_c)
        if min(timing.t_w) != 0 or len(set(timing.T)) != 1:
            raise InvariantViolation(f"barrier timing broken: {timing}")
        reduced = simulate_allreduce(buffers, transports)
        if any(not np.array_equal(r.values, reduced[0].values) for r in reduced[1:]):
            raise InvariantViolation("ranks disagree on the reduced gradient")
        model = sgd_step(model, reduced[0], learning_rate, weight_decay)
        total = total + timing

    total.check()
    report = EpochReport(
        epoch=epoch,
        weights=tuple(weights),
        timing=total,
        loss=loss_sum / consumed if consumed else float("nan"),
        aggregations=aggregations,
    )
    return model, report


class _Allocation:
    """Algorithm-level allocation bookkeeping shared by both drivers."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.adaptive = config.mode.kind == "adaptive"
        self.state = AllocationState.initial(initial_weights(config))
        self.frozen = not self.adaptive
        self.frozen_epoch: int | None = None if self.adaptive else 0
        self.rebalances: list[Rebalance] = []
        self.measured: np.ndarray | None = None

    def wants_timings(self) -> bool:
        return self.adaptive and not self.frozen and self.measured is not None

    def observe(self, weights: Sequence[int], mean_t_s: Sequence[float]) -> None:
        # smooth time per unit of weight, so epochs run under different
        # allocations stay comparable
        cur = np.asarray(mean_t_s, dtype=np.float64) / np.asarray(weights, dtype=np.float64)
        beta = self.config.stability.smoothing
        if self.measured is None or beta == 0:
            self.measured = cur
        else:
            self.measured = beta * self.measured + (1 - beta) * cur

    def estimate(self) -> np.ndarray:
        """Expected per-aggregation compute time under the current weights."""
        return self.measured * np.asarray(self.state.weights, dtype=np.float64)

    def rebalance(self, t_s: Sequence[float], epoch: int) -> None:
        st = self.config.stability
        before = self.state
        try:
            v = allocator.rates(before.weights, t_s)
        except allocator.ZeroTiming:
            log.info("epoch %d: no compute timings yet, keeping %s", epoch, before.weights)
            return
        u = allocator.increments_closed_form(before.weights, v)
        after = allocator.update_allocation(before, t_s, st.floor)
        if sum(after.weights) != before.total:
            raise InvariantViolation(f"rebalance changed the total: {before.weights} -> {after.weights}")
        if abs(float(u.sum())) > 1e-9:
            raise InvariantViolation(f"increments do not sum to zero: {u}")
        self.rebalances.append(Rebalance(epoch, before.weights, after.weights, tuple(map(float, v)), tuple(map(float, u))))
        self.state = after
        log.info("epoch %d: weights %s -> %s", epoch, before.weights, after.weights)
        if allocator.is_stable(after.trajectory, st.window, st.tol):
            self.frozen = True
            self.frozen_epoch = epoch
            log.info("epoch %d: allocation stable at %s, freezing", epoch, after.weights)

    def report(self, epochs: list[EpochReport], clock: str) -> ExperimentReport:
        return ExperimentReport(
            config=self.config.to_dict(),
            epochs=epochs,
            history=self.state.trajectory,
            rebalances=self.rebalances,
            frozen_weights=self.state.weights if self.frozen else None,
            frozen_epoch=self.frozen_epoch,
            total_time_ns=sum(e.epoch_time for e in epochs),
            clock=clock,
        )


def _setup(config: ExperimentConfig) -> tuple[Dataset, Model]:
    problems = validate(config)
    if problems:
        raise InvalidConfig(problems)
    dataset = dataset_from_spec(config.dataset, config.model.kind)
    return dataset, model_from_spec(config.model, dataset, config.seed)


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    dataset, model = _setup(config)
    rng = np.random.default_rng(config.seed)
    alloc = _Allocation(config)
    transports = InMemoryHub(config.n).endpoints()
    clock = VirtualClock()

    epochs = []
    for e in range(config.epochs):
        if alloc.wants_timings():
            gathered = simulate_allgather(list(alloc.estimate()), transports)[0]
            alloc.rebalance(gathered, e)
        part = partition(dataset, alloc.state.weights)
        model, rep = run_epoch(
            config.workers,
            model,
            dataset,
            part,
            alloc.state.weights,
            minibatch=config.minibatch,
            learning_rate=config.learning_rate,
            weight_decay=config.weight_decay,
            cost_model=config.link,
            rng=rng,
            transports=transports,
            epoch=e,
        )
        clock.advance(rep.epoch_time)
        log.debug("epoch %d: T=%d ns loss=%.6f", e, rep.epoch_time, rep.loss)
        epochs.append(rep)
        alloc.observe(rep.weights, rep.mean_compute())

    report = alloc.report(epochs, "virtual")
    report.total_time_ns = clock.now_ns
    report.final_params = tuple(map(float, model.params))
    return report


def run_worker(
    config: ExperimentConfig, rank: int, transport, *, time_scale: float = 1.0
) -> ExperimentReport:
    """One rank of a wall-clock run. Every rank returns the same report.

    ``t_s`` is measured around local accumulation plus a sleep that pads it
    to the worker's simulated cost (scaled by ``time_scale``). The per-step
    allgather of ``t_s`` doubles as the barrier; ``t_c`` is the slowest
    rank's measured allreduce time.
    """
    dataset, model = _setup(config)
    n = config.n
    pos = RingPosition(rank, n)
    profile = config.workers[rank]
    rng = np.random.default_rng([config.seed, rank])
    alloc = _Allocation(config)

    epochs = []
    for e in range(config.epochs):
        if alloc.wants_timings():
            gathered = allgather_scalar(float(alloc.estimate()[rank]), pos, transport)
            alloc.rebalance(gathered, e)
        weights = alloc.state.weights
        part = partition(dataset, weights)
        k = weights[rank] * config.minibatch
        aggregations = len(dataset) // (config.C * config.minibatch)

        t_s_sum = np.zeros(n, dtype=np.int64)
        t_w_sum = np.zeros(n, dtype=np.int64)
        t_c_local = 0
        loss_local = 0.0
        for a in range(aggregations):
            t0 = time.perf_counter_ns()
            idx = draw_indices(part.ranges[rank], k, a * k)
            buf, loss = accumulate_with_loss(model, dataset.X[idx], dataset.y[idx], config.minibatch, weights[rank])
            target = compute_time(profile, k, rng) * time_scale
            pad = target - (time.perf_counter_ns() - t0)
            if pad > 0:
                time.sleep(pad / NS_PER_S)
            t_s = time.perf_counter_ns() - t0
            loss_local += loss

            t_all = allgather_scalar(float(t_s), pos, transport).astype(np.int64)
            t_s_sum += t_all
            t_w_sum += np.asarray(waiting_times(t_all.tolist()), dtype=np.int64)

            t1 = time.perf_counter_ns()
            reduced = ring_allreduce(buf, pos, transport)
            t_c_local += time.perf_counter_ns() - t1
            model = sgd_step(model, reduced, config.learning_rate, config.weight_decay)

        t_c = int(allgather_scalar(float(t_c_local), pos, transport).max())
        loss_total = float(allgather_scalar(loss_local, pos, transport).sum())
        t_s_t = tuple(int(x) for x in t_s_sum)
        t_w_t = tuple(int(x) for x in t_w_sum)
        timing = EpochTiming(t_s_t, t_w_t, t_c, tuple(s + w + t_c for s, w in zip(t_s_t, t_w_t)))
        consumed = aggregations * config.C * config.minibatch
        rep = EpochReport(e, weights, timing, loss_total / consumed if consumed else float("nan"), aggregations)
        epochs.append(rep)
        alloc.observe(rep.weights, rep.mean_compute())

    report = alloc.report(epochs, "wall")
    report.final_params = tuple(map(float, model.params))
    return report


def run_threaded(config: ExperimentConfig, *, time_scale: float = 1.0, transports=None) -> list[ExperimentReport]:
    """Run every rank of a wall-clock experiment in its own thread."""
    if transports is None:
        transports = InMemoryHub(config.n).endpoints()
    results: list = [None] * config.n
    errors: list[BaseException] = []

    def target(r: int):
        try:
            results[r] = run_worker(config, r, transports[r], time_scale=time_scale)
        except BaseException as exc:  # surfaced to the caller below
            errors.append(exc)
            transports[r].close()

    threads = [threading.Thread(target=target, args=(r,), name=f"rank-{r}") for r in range(config.n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results
