"""Ring allreduce and ring allgather over a neighbour transport.

Each collective is written once, as a generator that yields between its send
and its matching receive. :func:`ring_allreduce` drives one rank's generator
straight through (a real transport blocks in ``recv``), while
:func:`run_lockstep` interleaves all ranks' generators in a single thread so
the simulator never blocks and message order is fixed.
"""

from __future__ import annotations

from collections.abc import Generator, Sequence
from dataclasses import dataclass

import numpy as np

from .core import GradientBuffer, RingBalanceError
from .transport import Frame, MsgType


class LengthMismatch(RingBalanceError):
    pass


@dataclass(frozen=True)
class RingPosition:
    rank: int
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("ring requires n >= 2")
        if not 0 <= self.rank < self.n:
            raise ValueError(f"rank {self.rank} outside [0, {self.n})")

    @property
    def prev(self) -> int:
        return (self.rank - 1) % self.n

    @property
    def next(self) -> int:
        return (self.rank + 1) % self.n


def chunk_bounds(length: int, n: int) -> list[tuple[int, int]]:
    """``n`` contiguous chunks covering ``[0, length)``; some may be empty."""
    return [(c * length // n, (c + 1) * length // n) for c in range(n)]


Steps = Generator[None, None, object]


def allreduce_steps(local: GradientBuffer, pos: RingPosition, transport) -> Steps:
    n, rank = pos.n, pos.rank
    data = np.array(local.values, dtype=np.float64)
    bounds = chunk_bounds(len(data), n)

    def receive(expect_chunk: int) -> np.ndarray:
        frame = transport.recv(pos.prev)
        if frame.msg_type != MsgType.CHUNK:
            raise LengthMismatch(f"expected CHUNK from {pos.prev}, got {frame.msg_type.name}")
        got = frame.values()
        lo, hi = bounds[expect_chunk]
        if len(got) != hi - lo:
            raise LengthMismatch(
                f"rank {rank}: chunk {expect_chunk} has {len(got)} values, expected {hi - lo}"
            )
        return got

    # reduce-scatter: afterwards this rank owns the full sum of chunk rank+1
    for step in range(n - 1):
        c = (rank - step) % n
        lo, hi = bounds[c]
        transport.send(pos.next, Frame.of_values(MsgType.CHUNK, rank, data[lo:hi]))
        yield
        c = (rank - step - 1) % n
        lo, hi = bounds[c]
        data[lo:hi] += receive(c)

    # allgather: circulate the finished chunks
    for step in range(n - 1):
        c = (rank + 1 - step) % n
        lo, hi = bounds[c]
        transport.send(pos.next, Frame.of_values(MsgType.CHUNK, rank, data[lo:hi]))
        yield
        c = (rank - step) % n
        lo, hi = bounds[c]
        data[lo:hi] = receive(c)

    counts = yield from allgather_steps(float(local.sample_count), pos, transport)
    return GradientBuffer(data, int(round(float(np.sum(counts)))))


def allgather_steps(value: float, pos: RingPosition, transport) -> Steps:
    n, rank = pos.n, pos.rank
    out = np.zeros(n)
    out[rank] = value
    for step in range(n - 1):
        src = (rank - step) % n
        transport.send(pos.next, Frame.of_values(MsgType.SCALAR, rank, [out[src]]))
        yield
        frame = transport.recv(pos.prev)
        if frame.msg_type != MsgType.SCALAR:
            raise LengthMismatch(f"expected SCALAR from {pos.prev}, got {frame.msg_type.name}")
        got = frame.values()
        if len(got) != 1:
            raise LengthMismatch(f"SCALAR frame carries {len(got)} values")
        out[(rank - step - 1) % n] = got[0]
    return out


def _drive(gen: Steps):
    try:
        while True:
            next(gen)
    except StopIteration as stop:
        return stop.value


def ring_allreduce(local: GradientBuffer, pos: RingPosition, transport) -> GradientBuffer:
    """Element-wise sum of every rank's buffer, returned on every rank."""
    return _drive(allreduce_steps(local, pos, transport))


def allgather_scalar(local: float, pos: RingPosition, transport) -> np.ndarray:
    """Vector of every rank's scalar, indexed by rank."""
    return _drive(allgather_steps(local, pos, transport))


def run_lockstep(gens: Sequence[Steps]) -> list:
    """Advance all ranks' generators round-robin in rank order until each finishes."""
    results: list = [None] * len(gens)
    live = list(range(len(gens)))
    while live:
        still = []
        for r in live:
            try:
                next(gens[r])
                still.append(r)
            except StopIteration as stop:
                results[r] = stop.value
        live = still
    return results


def simulate_allreduce(buffers: Sequence[GradientBuffer], transports) -> list[GradientBuffer]:
    n = len(buffers)
    return run_lockstep(
        [allreduce_steps(b, RingPosition(r, n), transports[r]) for r, b in enumerate(buffers)]
    )


def simulate_allgather(values: Sequence[float], transports) -> list[np.ndarray]:
    n = len(values)
    return run_lockstep(
        [allgather_steps(v, RingPosition(r, n), transports[r]) for r, v in enumerate(values)]
    )
