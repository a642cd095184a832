"""Miniature federated training: synthetic data, partitioning, local SGD, FedAvg, evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class LocalDataset:
    inputs: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.labels)

    def classes(self) -> set[int]:
        return set(np.unique(self.labels).tolist())


def make_blobs(
    rng: np.random.Generator,
    n_classes: int = 10,
    n_features: int = 20,
    samples_per_class: int = 200,
    separation: float = 3.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs with unit noise around random class centers of norm ~``separation``."""
    centers = rng.normal(size=(n_classes, n_features))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    X = np.concatenate([c + rng.normal(size=(samples_per_class, n_features)) for c in centers])
    y = np.repeat(np.arange(n_classes), samples_per_class)
    return X, y


def partition(
    X: np.ndarray,
    y: np.ndarray,
    n_devices: int,
    mode: str,
    rng: np.random.Generator,
    shards_per_class: int = 20,
) -> list[LocalDataset]:
    """Split a labelled dataset across devices.

    ``iid`` deals equal-sized uniform random slices. ``noniid`` cuts every
    class into ``shards_per_class`` shards and gives each device one shard from
    each of two randomly chosen classes.
    """
    if n_devices < 1:
        raise ValueError("need at least one device")
    if mode == "iid":
        per = len(y) // n_devices
        if per == 0:
            raise ValueError(f"{len(y)} samples cannot cover {n_devices} devices")
        order = rng.permutation(len(y))
        return [LocalDataset(X[idx], y[idx]) for idx in order[: per * n_devices].reshape(n_devices, per)]
    if mode != "noniid":
        raise ValueError(f"unknown partition mode {mode!r}")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("non-IID partitioning needs at least two classes")
    shards: dict[int, list[np.ndarray]] = {}
    for c in classes:
        idx = rng.permutation(np.flatnonzero(y == c))
        if len(idx) < shards_per_class:
            raise ValueError(f"class {c} has {len(idx)} samples, cannot cut {shards_per_class} shards")
        shards[int(c)] = list(np.array_split(idx, shards_per_class))
    out = []
    for k in range(n_devices):
        open_classes = [c for c, s in shards.items() if s]
        if len(open_classes) < 2:
            raise ValueError(f"ran out of shards at device {k}; raise shards_per_class")
        picked = rng.choice(open_classes, size=2, replace=False)
        idx = np.concatenate([shards[int(c)].pop(int(rng.integers(len(shards[int(c)])))) for c in picked])
        out.append(LocalDataset(X[idx], y[idx]))
    return out


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class SoftmaxRegression:
    """Multinomial logistic regression; parameters are [W (F x C), b (C)] flattened."""

    def __init__(self, n_features: int, n_classes: int):
        self.n_features = n_features
        self.n_classes = n_classes
        self.n_params = n_features * n_classes + n_classes

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.n_params)

    def _unpack(self, w):
        F, C = self.n_features, self.n_classes
        return w[: F * C].reshape(F, C), w[F * C :]

    def logits(self, w, X):
        W, b = self._unpack(w)
        return X @ W + b

    def loss_grad(self, w, X, y) -> tuple[float, np.ndarray]:
        W, b = self._unpack(w)
        logp = _log_softmax(X @ W + b)
        n = len(y)
        loss = -logp[np.arange(n), y].mean()
        d = np.exp(logp)
        d[np.arange(n), y] -= 1.0
        d /= n
        return float(loss), np.concatenate([(X.T @ d).ravel(), d.sum(axis=0)])


class TanhMLP:
    """One hidden tanh layer; parameters are [W1, b1, W2, b2] flattened."""

    def __init__(self, n_features: int, n_classes: int, hidden: int = 16):
        self.n_features = n_features
        self.n_classes = n_classes
        self.hidden = hidden
        self.shapes = [(n_features, hidden), (hidden,), (hidden, n_classes), (n_classes,)]
        self.n_params = sum(math.prod(s) for s in self.shapes)

    def init(self, rng: np.random.Generator) -> np.ndarray:
        F, H = self.n_features, self.hidden
        W1 = rng.normal(scale=1.0 / math.sqrt(F), size=(F, H))
        W2 = rng.normal(scale=1.0 / math.sqrt(H), size=(H, self.n_classes))
        return np.concatenate([W1.ravel(), np.zeros(H), W2.ravel(), np.zeros(self.n_classes)])

    def _unpack(self, w):
        out, i = [], 0
        for s in self.shapes:
            n = math.prod(s)
            out.append(w[i : i + n].reshape(s))
            i += n
        return out

    def logits(self, w, X):
        W1, b1, W2, b2 = self._unpack(w)
        return np.tanh(X @ W1 + b1) @ W2 + b2

    def loss_grad(self, w, X, y) -> tuple[float, np.ndarray]:
        W1, b1, W2, b2 = self._unpack(w)
        h = np.tanh(X @ W1 + b1)
        logp = _log_softmax(h @ W2 + b2)
        n = len(y)
        loss = -logp[np.arange(n), y].mean()
        d = np.exp(logp)
        d[np.arange(n), y] -= 1.0
        d /= n
        dh = (d @ W2.T) * (1.0 - h * h)
        return float(loss), np.concatenate(
            [(X.T @ dh).ravel(), dh.sum(axis=0), (h.T @ d).ravel(), d.sum(axis=0)]
        )


def make_model(kind: str, n_features: int, n_classes: int, hidden: int = 16):
    if kind == "logreg":
        return SoftmaxRegression(n_features, n_classes)
    if kind == "mlp":
        return TanhMLP(n_features, n_classes, hidden)
    raise ValueError(f"unknown model {kind!r}; expected logreg or mlp")


def loss_and_accuracy(model, w, data: LocalDataset) -> tuple[float, float]:
    logits = model.logits(w, data.inputs)
    logp = _log_softmax(logits)
    loss = -logp[np.arange(data.size), data.labels].mean()
    acc = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    return float(loss), acc


def local_update(
    w: np.ndarray,
    data: LocalDataset,
    model,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """``epochs`` passes of shuffled mini-batch SGD on one device's data."""
    if data.size == 0:
        raise ValueError("local update on an empty dataset")
    w = np.array(w, dtype=float)
    for epoch in range(epochs):
        order = rng.permutation(data.size)
        for start in range(0, data.size, batch_size):
            idx = order[start : start + batch_size]
            loss, grad = model.loss_grad(w, data.inputs[idx], data.labels[idx])
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise FloatingPointError(
                    f"non-finite local loss {loss} at epoch {epoch}, batch offset {start}, "
                    f"|w|={np.linalg.norm(w):.3g}, lr={lr}"
                )
            w -= lr * grad
            if not np.all(np.isfinite(w)):
                raise FloatingPointError(
                    f"parameters diverged at epoch {epoch}, batch offset {start}: "
                    f"loss {loss}, |grad|={np.linalg.norm(grad):.3g}, lr={lr}"
                )
    return w


def local_steps(data_size: int, epochs: int, batch_size: int) -> int:
    """Local iterations H: epochs times batches per epoch."""
    return epochs * math.ceil(data_size / batch_size)


def fedavg_aggregate(locals_: Sequence[tuple[np.ndarray, float]]) -> np.ndarray:
    """Data-size weighted average of local models."""
    if not locals_:
        raise ValueError("nothing to aggregate")
    dims = {np.shape(w) for w, _ in locals_}
    if len(dims) != 1:
        raise ValueError(f"local models differ in dimension: {sorted(dims)}")
    weights = np.array([float(d) for _, d in locals_])
    total = weights.sum()
    if not total > 0:
        raise ValueError("total aggregation weight is zero")
    return np.tensordot(weights / total, np.array([w for w, _ in locals_], dtype=float), axes=1)


def global_loss(model, w, datasets: Sequence[LocalDataset]) -> tuple[float, float]:
    """Data-size weighted loss and accuracy over all devices' data for a job."""
    sizes = np.array([d.size for d in datasets], dtype=float)
    if not sizes.sum() > 0:
        raise ValueError("no data to evaluate")
    stats = np.array([loss_and_accuracy(model, w, d) if d.size else (0.0, 0.0) for d in datasets])
    weights = sizes / sizes.sum()
    return float(weights @ stats[:, 0]), float(weights @ stats[:, 1])


def global_gradient(model, w, datasets: Sequence[LocalDataset]) -> np.ndarray:
    sizes = np.array([d.size for d in datasets], dtype=float)
    grad = np.zeros_like(w, dtype=float)
    for d, s in zip(datasets, sizes):
        if s:
            grad += (s / sizes.sum()) * model.loss_grad(w, d.inputs, d.labels)[1]
    return grad


@dataclass
class GradNormReport:
    averages: dict[int, float]
    partial: bool

    def ratio(self, early: int, late: int) -> float:
        return self.averages[late] / self.averages[early]


def grad_norm_metric(sq_norms: Sequence[float], checkpoints: Sequence[int] = (100, 400)) -> GradNormReport:
    """Running average of squared gradient norms up to each checkpoint round.

    Checkpoints beyond the trace length are reported at the last available
    round and flagged as partial.
    """
    values = np.asarray(sq_norms, dtype=float)
    if len(values) < 2:
        raise ValueError("need at least two measurements")
    running = np.cumsum(values) / np.arange(1, len(values) + 1)
    averages = {}
    partial = False
    for c in checkpoints:
        if c > len(values):
            partial = True
        averages[c] = float(running[min(c, len(values)) - 1])
    return GradNormReport(averages, partial)
