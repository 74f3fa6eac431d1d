"""Desk-scale models and the static-allocation training primitives.

Every loss here is per-sample and unnormalised; gradients are summed over
samples and divided by the global sample count only in :func:`sgd_step`.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import DatasetSpec, GradientBuffer, ModelSpec, RingBalanceError


class DimMismatch(RingBalanceError):
    pass


class InsufficientSamples(RingBalanceError):
    pass


class ZeroSampleCount(RingBalanceError):
    pass


class DatasetTooSmall(RingBalanceError):
    pass


# -- models -----------------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample loss and d(loss)/d(logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(y))
    losses = logsum - z[rows, y]
    d = _softmax(logits)
    d[rows, y] -= 1.0
    return losses, d


@dataclass(frozen=True)
class Model:
    """A flat parameter vector plus the shape information needed to read it.

    ``kind`` is ``"linear"`` (least squares, one output), ``"softmax"``
    (multinomial logistic regression) or ``"mlp"`` (one tanh hidden layer,
    cross-entropy output).
    """

    kind: str
    params: np.ndarray
    n_in: int
    n_out: int = 1
    hidden: int = 0

    @staticmethod
    def param_count(kind: str, n_in: int, n_out: int, hidden: int = 0) -> int:
        if kind == "linear":
            return n_in + 1
        if kind == "softmax":
            return n_out * n_in + n_out
        if kind == "mlp":
            return hidden * n_in + hidden + n_out * hidden + n_out
        raise ValueError(f"unknown model kind {kind!r}")

    @classmethod
    def initialize(
        cls, kind: str, n_in: int, n_out: int = 1, hidden: int = 0, *, rng=None, scale: float = 0.1
    ) -> "Model":
        size = cls.param_count(kind, n_in, n_out, hidden)
        if kind == "mlp":
            rng = np.random.default_rng(rng)
            params = rng.normal(0.0, scale, size=size)
        else:
            params = np.zeros(size)
        return cls(kind, params, n_in, n_out, hidden)

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        expected = self.param_count(self.kind, self.n_in, self.n_out, self.hidden)
        if params.shape != (expected,):
            raise DimMismatch(f"{self.kind} model expects {expected} params, got {params.shape}")
        object.__setattr__(self, "params", params)

    def with_params(self, params: np.ndarray) -> "Model":
        return replace(self, params=np.asarray(params, dtype=np.float64))

    @property
    def size(self) -> int:
        return self.params.shape[0]

    def _unpack(self):
        p = self.params
        d, k, h = self.n_in, self.n_out, self.hidden
        if self.kind == "linear":
            return p[:d], p[d]
        if self.kind == "softmax":
            return p[: k * d].reshape(k, d), p[k * d :]
        W1, b1, W2, b2 = np.split(p, np.cumsum([h * d, h, k * h]))
        return W1.reshape(h, d), b1, W2.reshape(k, h), b2

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_in:
            raise DimMismatch(f"model takes {self.n_in} features, sample has {X.shape[1]}")
        return X

    def loss_and_grad(self, X, y) -> tuple[float, np.ndarray]:
        """Summed per-sample loss and summed gradient over the rows of ``X``."""
        X = self._check(X)
        y = np.atleast_1d(np.asarray(y))
        if self.kind == "linear":
            w, b = self._unpack()
            r = X @ w + b - y
            grad = np.concatenate([2.0 * (r @ X), [2.0 * r.sum()]])
            return float(r @ r), grad
        y = y.astype(np.int64)
        if self.kind == "softmax":
            W, b = self._unpack()
            losses, d = _cross_entropy(X @ W.T + b, y)
            return float(losses.sum()), np.concatenate([(d.T @ X).ravel(), d.sum(axis=0)])
        W1, b1, W2, b2 = self._unpack()
        H = np.tanh(X @ W1.T + b1)
        losses, d = _cross_entropy(H @ W2.T + b2, y)
        dH = (d @ W2) * (1.0 - H * H)
        grad = np.concatenate(
            [(dH.T @ X).ravel(), dH.sum(axis=0), (d.T @ H).ravel(), d.sum(axis=0)]
        )
        return float(losses.sum()), grad

    def loss(self, X, y) -> float:
        """Mean per-sample loss."""
        total, _ = self.loss_and_grad(X, y)
        return total / len(np.atleast_1d(y))

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        if self.kind == "linear":
            w, b = self._unpack()
            return X @ w + b
        if self.kind == "softmax":
            W, b = self._unpack()
            return np.argmax(X @ W.T + b, axis=1)
        W1, b1, W2, b2 = self._unpack()
        return np.argmax(np.tanh(X @ W1.T + b1) @ W2.T + b2, axis=1)


def model_from_spec(spec: ModelSpec, dataset: "Dataset", seed: int = 0) -> Model:
    n_out = 1 if spec.kind == "linear" else dataset.n_classes
    hidden = spec.hidden if spec.kind == "mlp" else 0
    return Model.initialize(
        spec.kind, dataset.n_features, n_out, hidden, rng=np.random.default_rng([seed, 1]), scale=spec.init_scale
    )


def numeric_gradient(model: Model, X, y, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of the summed loss."""
    base = model.params
    grad = np.zeros_like(base)
    for i in range(base.shape[0]):
        up = base.copy()
        up[i] += eps
        down = base.copy()
        down[i] -= eps
        f_up = model.with_params(up).loss_and_grad(X, y)[0]
        f_down = model.with_params(down).loss_and_grad(X, y)[0]
        grad[i] = (f_up - f_down) / (2 * eps)
    return grad


def gradient_check(kind: str, trials: int, seed: int, eps: float = 1e-6) -> float:
    """Worst relative error ``||g - g_fd|| / max(||g||, ||g_fd||)`` over random models and samples."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n_in = int(rng.integers(1, 6))
        n_out = 1 if kind == "linear" else int(rng.integers(2, 5))
        hidden = int(rng.integers(1, 6)) if kind == "mlp" else 0
        model = Model.initialize(kind, n_in, n_out, hidden)
        model = model.with_params(rng.normal(0.0, 1.0, size=model.size))
        x = rng.normal(0.0, 1.0, size=(1, n_in))
        y = rng.normal(0.0, 1.0, size=1) if kind == "linear" else rng.integers(0, n_out, size=1)
        g = per_sample_gradient(model, (x[0], y[0])).values
        g_fd = numeric_gradient(model, x, y, eps)
        scale = max(np.linalg.norm(g), np.linalg.norm(g_fd), 1e-8)
        worst = max(worst, float(np.linalg.norm(g - g_fd) / scale))
    return worst


# -- data -------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Samples in a fixed global order: features ``X`` (D x d) and labels ``y``."""

    X: np.ndarray
    y: np.ndarray
    source: str = "synthetic"

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise DimMismatch(f"{len(self.X)} feature rows but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if self.y.dtype.kind in "iu" else 1


def make_synthetic(
    size: int,
    n_features: int = 4,
    n_classes: int = 3,
    separation: float = 4.0,
    seed: int = 0,
    task: str = "classification",
) -> Dataset:
    """Gaussian class clusters (balanced labels), or a noisy linear target for regression."""
    rng = np.random.default_rng(seed)
    if task == "regression":
        X = rng.normal(size=(size, n_features))
        beta = rng.normal(size=n_features)
        y = X @ beta + 0.5 + 0.1 * rng.normal(size=size)
        return Dataset(X, y, f"synthetic(seed={seed})")
    centers = rng.normal(size=(n_classes, n_features))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    y = rng.permutation(np.arange(size) % n_classes)
    X = centers[y] + rng.normal(size=(size, n_features))
    return Dataset(X, y.astype(np.int64), f"synthetic(seed={seed})")


def load_csv(path, task: str = "classification") -> Dataset:
    """CSV with one header row; the last column is the label."""
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    X, y = data[:, :-1], data[:, -1]
    if task == "classification":
        y = y.astype(np.int64)
    return Dataset(X, y, f"csv({path})")


def dataset_from_spec(spec: DatasetSpec, model_kind: str = "softmax") -> Dataset:
    task = "regression" if model_kind == "linear" else "classification"
    if spec.kind == "csv":
        return load_csv(spec.path, task)
    return make_synthetic(spec.size, spec.n_features, spec.n_classes, spec.separation, spec.seed, task)


@dataclass(frozen=True)
class Partition:
    ranges: tuple[tuple[int, int], ...]

    def sizes(self) -> list[int]:
        return [hi - lo for lo, hi in self.ranges]


def partition(dataset, weights: Sequence[int]) -> Partition:
    """Contiguous slices sized ``floor(D*w_i/C)``, leftover samples to the last rank.

    Raises :class:`DatasetTooSmall` if any worker would be left with no samples.
    """
    D = dataset if isinstance(dataset, int) else len(dataset)
    C = sum(weights)
    ranges = []
    start = 0
    for i, w in enumerate(weights):
        stop = D if i == len(weights) - 1 else start + D * w // C
        if stop <= start:
            raise DatasetTooSmall(f"D={D} leaves worker {i} (w={w} of C={C}) without samples")
        ranges.append((start, stop))
        start = stop
    return Partition(tuple(ranges))


def draw_indices(part_range: tuple[int, int], count: int, offset: int) -> np.ndarray:
    """``count`` consecutive positions from a slice, starting at ``offset`` and wrapping."""
    lo, hi = part_range
    if count and hi <= lo:
        raise InsufficientSamples(f"empty slice {part_range} cannot supply {count} samples")
    return lo + (np.arange(offset, offset + count) % (hi - lo)) if count else np.arange(0)


# -- training primitives ----------------------------------------------------


def per_sample_gradient(model: Model, sample) -> GradientBuffer:
    x, y = sample
    _, g = model.loss_and_grad(np.asarray(x, dtype=np.float64).reshape(1, -1), np.atleast_1d(y))
    return GradientBuffer(g, 1)


def accumulate_with_loss(model: Model, X, y, minibatch: int, w_i: int) -> tuple[GradientBuffer, float]:
    """Run ``w_i`` minibatches without updating, summing gradients and losses."""
    need = w_i * minibatch
    if len(y) < need:
        raise InsufficientSamples(f"need {need} samples, got {len(y)}")
    grad = np.zeros(model.size)
    loss = 0.0
    for j in range(w_i):
        sl = slice(j * minibatch, (j + 1) * minibatch)
        l, g = model.loss_and_grad(X[sl], y[sl])
        grad += g
        loss += l
    return GradientBuffer(grad, need), loss


def accumulate(model: Model, samples, minibatch: int, w_i: int) -> GradientBuffer:
    """Summed gradient of ``w_i * minibatch`` samples; ``samples`` is ``(X, y)``."""
    X, y = samples
    return accumulate_with_loss(model, np.asarray(X), np.asarray(y), minibatch, w_i)[0]


def sgd_step(model: Model, global_grad: GradientBuffer, learning_rate: float, weight_decay: float = 0.0) -> Model:
    N = global_grad.sample_count
    if N <= 0:
        raise ZeroSampleCount("global gradient carries no samples")
    p = model.params
    return model.with_params(p - learning_rate * (global_grad.values / N + weight_decay * p))
