"""Synthetic continual-learning streams: rotated class layouts in a shared plane.

Every task places its class means on the unit circle of one 2-D subspace
(spanned by the orthonormal columns of ``Q``), rotated by a task angle.
Seen tasks are equally spaced in [0, pi); unseen tasks sit halfway between
two neighbouring seen tasks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    theta: float
    n_classes: int
    sigma: float
    n_train: int
    n_test: int
    seen: bool = True

    def __post_init__(self):
        if not 0.0 <= self.theta < 2 * math.pi:
            raise ValueError(f"task angle {self.theta} outside [0, 2pi)")
        if min(self.n_train, self.n_test) < self.n_classes:
            raise ValueError("train/test sizes must be >= number of classes")


@dataclass
class TaskData:
    spec: TaskSpec
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray


@dataclass
class TaskStream:
    Q: np.ndarray  # (d, 2)
    seen: list[TaskSpec]
    unseen: list[TaskSpec]
    seed: int
    oracle_accuracy: dict[int, float] = field(default_factory=dict)
    _cache: dict[int, TaskData] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        gram = self.Q.T @ self.Q
        if not np.allclose(gram, np.eye(2), atol=1e-10, rtol=0):
            raise ValueError("embedding columns are not orthonormal")
        seen_angles = {round(t.theta, 12) for t in self.seen}
        if seen_angles & {round(t.theta, 12) for t in self.unseen}:
            raise ValueError("seen and unseen task angles overlap")

    @property
    def d(self) -> int:
        return self.Q.shape[0]

    @property
    def tasks(self) -> list[TaskSpec]:
        return self.seen + self.unseen

    def class_means(self, spec: TaskSpec) -> np.ndarray:
        ang = spec.theta + 2 * math.pi * np.arange(spec.n_classes) / spec.n_classes
        return np.stack([np.cos(ang), np.sin(ang)], axis=1) @ self.Q.T

    def dataset(self, task_id: int) -> TaskData:
        if task_id not in self._cache:
            spec = self.tasks[task_id]
            rng = np.random.default_rng([self.seed, 1, task_id])
            means = self.class_means(spec)

            def draw(n):
                y = rng.permutation(np.arange(n) % spec.n_classes)
                X = means[y] + spec.sigma * rng.standard_normal((n, self.d))
                return X, y

            Xtr, ytr = draw(spec.n_train)
            Xte, yte = draw(spec.n_test)
            self._cache[task_id] = TaskData(spec, Xtr, ytr, Xte, yte)
        return self._cache[task_id]

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "d": self.d,
            "Q": self.Q.tolist(),
            "tasks": [asdict(t) for t in self.tasks],
            "oracle_accuracy": {str(k): v for k, v in sorted(self.oracle_accuracy.items())},
        }


def nearest_mean_accuracy(stream: TaskStream, task_id: int) -> float:
    data = stream.dataset(task_id)
    means = stream.class_means(data.spec)
    d2 = ((data.X_test[:, None, :] - means[None]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == data.y_test))


def make_stream(d: int = 32, n_classes: int = 4, m_seen: int = 8, m_unseen: int = 4,
                sigma: float = 0.15, seed: int = 0, n_train: int = 512,
                n_test: int = 256) -> TaskStream:
    if d < 2 or n_classes < 2:
        raise ValueError("need d >= 2 and at least 2 classes")
    if m_seen < 1 or m_unseen < 0 or sigma < 0:
        raise ValueError("invalid stream sizes")
    if m_unseen > m_seen:
        raise ValueError(f"m_unseen={m_unseen} exceeds m_seen={m_seen} (one midpoint per gap)")
    rng = np.random.default_rng([seed, 0])
    Q, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    seen = [TaskSpec(t, t * math.pi / m_seen, n_classes, sigma, n_train, n_test)
            for t in range(m_seen)]
    # unseen tasks sit at midpoints between spread-out pairs of neighbouring seen tasks
    unseen = [TaskSpec(m_seen + u, ((u * m_seen) // m_unseen + 0.5) * math.pi / m_seen, n_classes,
                       sigma, n_train, n_test, seen=False) for u in range(m_unseen)]
    stream = TaskStream(Q, seen, unseen, seed)
    stream.oracle_accuracy = {t.task_id: nearest_mean_accuracy(stream, t.task_id)
                              for t in stream.tasks}
    return stream


def batches(X: np.ndarray, y: np.ndarray, batch_size: int, seed) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(X))
    for start in range(0, len(X), batch_size):
        idx = order[start:start + batch_size]
        yield X[idx], y[idx]
