"""Self-adaptive allocation: turn last epoch's compute times into new weights.

Every worker should finish its share of an aggregation at the same moment, so
new weights are proportional to measured speed ``v_i = w_i / t_s_i``. The
increments are available two ways, a closed form and an explicit linear
system; they must agree, and :func:`max_oracle_residual` checks that.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import replace

import numpy as np

from .core import AllocationState, RingBalanceError, to_seconds


class ZeroTiming(RingBalanceError):
    """A compute time of zero: no measurement yet, so no rebalance is possible."""


class SingularMatrix(RingBalanceError):
    pass


class InfeasibleFloor(RingBalanceError):
    pass


def rates(weights: Sequence[int], t_s: Sequence[int]) -> np.ndarray:
    """Samples per second for each worker; ``t_s`` is in nanoseconds."""
    if len(weights) != len(t_s):
        raise ValueError("weights and t_s differ in length")
    if any(t <= 0 for t in t_s):
        raise ZeroTiming(f"non-positive compute time in {list(t_s)}")
    if any(w < 1 for w in weights):
        raise ValueError(f"weights must be >= 1, got {list(weights)}")
    return np.array([w / to_seconds(t) for w, t in zip(weights, t_s)], dtype=np.float64)


def increments_closed_form(weights: Sequence[int], v: Sequence[float]) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return v / v.sum() * w.sum() - w


def equilibrium_system(weights: Sequence[int], v: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Build ``A, b`` such that ``A @ u = b`` gives the increments.

    Rows ``0..n-2`` state that neighbours ``i`` and ``i+1`` finish together
    after the update; the last row keeps the total fixed.
    """
    n = len(weights)
    if n < 2:
        raise ValueError("need at least two workers")
    inv = 1.0 / np.asarray(v, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    A = np.zeros((n, n))
    b = np.zeros(n)
    for i in range(n - 1):
        A[i, i] = inv[i]
        A[i, i + 1] = -inv[i + 1]
        b[i] = w[i + 1] * inv[i + 1] - w[i] * inv[i]
    A[n - 1, :] = 1.0
    return A, b


def increments_linear_system(weights: Sequence[int], v: Sequence[float]) -> np.ndarray:
    if any(x <= 0 for x in v):
        raise SingularMatrix("rates must be positive")
    A, b = equilibrium_system(weights, v)
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(str(exc)) from exc


def relative_residual(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm difference scaled by ``max(|b|_inf, 1)``.

    The floor of one sample keeps the measure meaningful when the increments
    are all near zero (a cluster already in balance).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1.0))


def random_instance(rng: np.random.Generator, n: int, max_weight: int = 50):
    """Random integer weights and positive rates, as a measured epoch would produce."""
    w = rng.integers(1, max_weight + 1, size=n)
    t_s = rng.uniform(0.05, 5.0, size=n)
    return w, w / t_s


def max_oracle_residual(n_values: Sequence[int], trials: int, seed: int) -> float:
    """Worst closed-form vs linear-system disagreement over random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in n_values:
        for _ in range(trials):
            w, v = random_instance(rng, n)
            worst = max(
                worst,
                relative_residual(increments_linear_system(w, v), increments_closed_form(w, v)),
            )
    return worst


def apportion(real_weights: Sequence[float], C: int, floor: int = 1) -> list[int]:
    """Largest-remainder rounding of ``real_weights`` to integers summing to ``C``.

    Entries whose quota falls below ``floor`` are pinned at ``floor`` and the
    rest of ``C`` is shared among the others in proportion to their values.
    Equal remainders go to the lower rank first.
    """
    n = len(real_weights)
    if floor < 1:
        raise ValueError("floor must be >= 1")
    if C < n * floor:
        raise InfeasibleFloor(f"C={C} < {n} workers * floor {floor}")
    real = [max(float(x), 0.0) for x in real_weights]
    if abs(sum(real) - C) > 1e-6:
        raise ValueError(f"real weights sum to {sum(real)}, expected {C}")

    pinned: set[int] = set()
    while True:
        free = [i for i in range(n) if i not in pinned]
        budget = C - floor * len(pinned)
        mass = sum(real[i] for i in free)
        quota = [0.0] * n
        for i in free:
            quota[i] = real[i] * budget / mass if mass > 0 else budget / len(free)
        low = [i for i in free if quota[i] < floor]
        if not low:
            break
        pinned.update(low)

    out = [floor] * n
    for i in free:
        out[i] = int(math.floor(quota[i]))
    leftover = C - sum(out)
    order = sorted(free, key=lambda i: (-(quota[i] - math.floor(quota[i])), i))
    k = 0
    while leftover > 0:
        out[order[k % len(order)]] += 1
        leftover -= 1
        k += 1
    # float noise can push floors one over; take back from the smallest remainders
    k = len(order) - 1
    while leftover < 0:
        i = order[k % len(order)]
        if out[i] > floor:
            out[i] -= 1
            leftover += 1
        k -= 1
    return out


def target_weights(weights: Sequence[int], t_s: Sequence[int]) -> np.ndarray:
    """Real-valued weights that equalise compute time, before rounding."""
    v = rates(weights, t_s)
    return np.asarray(weights, dtype=np.float64) + increments_closed_form(weights, v)


def update_allocation(state: AllocationState, t_s: Sequence[int], floor: int = 1) -> AllocationState:
    real = target_weights(state.weights, t_s)
    new = apportion(real, state.total, floor)
    return replace(
        state,
        weights=tuple(new),
        epoch=state.epoch + 1,
        history=(*state.history, state.weights),
    )


def is_stable(history: Sequence[Sequence[int]], window: int = 2, tol: int = 1) -> bool:
    if window < 2:
        raise ValueError("window must be >= 2")
    if len(history) < window:
        return False
    recent = np.asarray(history[-window:])
    spread = recent.max(axis=0) - recent.min(axis=0)
    return bool(np.all(spread <= tol))
