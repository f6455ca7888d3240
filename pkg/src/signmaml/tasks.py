"""Synthetic few-shot task distributions and the episodic sampler.

Two families: gaussian-blobs (N-way K-shot classification, class means
uniform in a box, isotropic noise) and sinusoid regression (amplitude and
phase drawn per task). Randomness is counter-based: every task is generated
from a Philox stream keyed by (seed, domain, episode, task index), so
sampling is order-independent and reproducible regardless of how episodes
are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import LossKind

# stream domains keep train / validation / test / fixture draws disjoint
DOMAIN_TRAIN = 0
DOMAIN_VAL = 1
DOMAIN_TEST = 2
DOMAIN_FIXTURE = 3


@dataclass(frozen=True)
class StreamKey:
    """Counter-based RNG stream coordinates."""

    seed: int
    domain: int = DOMAIN_TRAIN
    episode: int = 0
    task: int = 0

    def for_task(self, index: int) -> "StreamKey":
        return StreamKey(self.seed, self.domain, self.episode, index)

    def rng(self) -> np.random.Generator:
        if not (0 <= self.domain < 2**8 and 0 <= self.episode < 2**32 and 0 <= self.task < 2**24):
            raise ValueError(f"stream coordinates out of range: {self}")
        key = (
            ((int(self.seed) & (2**64 - 1)) << 64)
            | (self.domain << 56)
            | (self.episode << 24)
            | self.task
        )
        return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class Task:
    """Support/query split of one episode's data."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    loss_kind: LossKind
    n_way: int
    k_shot: int
    n_query: int


@dataclass(frozen=True)
class TaskDistribution:
    """Parameters of a synthetic task family.

    For gaussian-blobs: ``input_dim``, ``n_way``, ``k_shot``, ``n_query``
    (per class), ``separation`` (class means uniform in [-s, s]^d) and
    ``noise`` (isotropic point scatter). For sinusoid: ``k_shot`` support
    and ``n_query`` query points of A*sin(x + phi) with A in [amp_min,
    amp_max], phi in [phase_min, phase_max], x uniform in [-5, 5].
    """

    kind: str = "gaussian-blobs"
    input_dim: int = 8
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    separation: float = 5.0
    noise: float = 1.0
    amp_min: float = 0.1
    amp_max: float = 5.0
    phase_min: float = 0.0
    phase_max: float = math.pi

    def __post_init__(self):
        if self.kind not in ("gaussian-blobs", "sinusoid"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "gaussian-blobs" and self.n_way < 2:
            raise ValueError("classification needs at least 2 ways")
        if self.k_shot < 1 or self.n_query < 1:
            raise ValueError("need at least one support and one query example")

    @property
    def loss_kind(self) -> LossKind:
        return LossKind.CROSS_ENTROPY if self.kind == "gaussian-blobs" else LossKind.MSE


def sample_task(dist: TaskDistribution, stream: StreamKey) -> Task:
    rng = stream.rng()
    if dist.kind == "gaussian-blobs":
        return _sample_blobs(dist, rng)[0]
    return _sample_sinusoid(dist, rng)


def sample_task_with_means(dist: TaskDistribution, stream: StreamKey) -> tuple[Task, np.ndarray]:
    """Blob task together with the true class means (for calibration)."""
    if dist.kind != "gaussian-blobs":
        raise ValueError("class means only exist for gaussian-blobs tasks")
    return _sample_blobs(dist, stream.rng())


def sample_episode(dist: TaskDistribution, count: int, stream: StreamKey) -> list[Task]:
    """Sample ``count`` independent tasks from per-task substreams."""
    if count < 1:
        raise ValueError(f"episode needs at least one task, got {count}")
    return [sample_task(dist, stream.for_task(i)) for i in range(count)]


def _sample_blobs(dist: TaskDistribution, rng: np.random.Generator) -> tuple[Task, np.ndarray]:
    n, k, q, d = dist.n_way, dist.k_shot, dist.n_query, dist.input_dim
    means = rng.uniform(-dist.separation, dist.separation, size=(n, d))
    support_x = np.empty((n * k, d))
    query_x = np.empty((n * q, d))
    for c in range(n):
        points = means[c] + dist.noise * rng.standard_normal((k + q, d))
        support_x[c * k : (c + 1) * k] = points[:k]
        query_x[c * q : (c + 1) * q] = points[k:]
    support_y = np.repeat(np.arange(n, dtype=np.int64), k)
    query_y = np.repeat(np.arange(n, dtype=np.int64), q)
    task = Task(support_x, support_y, query_x, query_y, LossKind.CROSS_ENTROPY, n, k, q)
    return task, means


def _sample_sinusoid(dist: TaskDistribution, rng: np.random.Generator) -> Task:
    amplitude = rng.uniform(dist.amp_min, dist.amp_max)
    phase = rng.uniform(dist.phase_min, dist.phase_max)
    xs = rng.uniform(-5.0, 5.0, size=(dist.k_shot, 1))
    xq = rng.uniform(-5.0, 5.0, size=(dist.n_query, 1))
    return Task(
        xs,
        amplitude * np.sin(xs + phase),
        xq,
        amplitude * np.sin(xq + phase),
        LossKind.MSE,
        1,
        dist.k_shot,
        dist.n_query,
    )


def nearest_mean_accuracy(task: Task, means: np.ndarray) -> float:
    """Query accuracy of classifying by the nearest of the given class
    means. With the true means this is the Bayes-optimal rule for equal
    isotropic class noise."""
    dists = ((task.query_x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(dists, axis=1) == task.query_y))
