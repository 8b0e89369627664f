"""Seeded few-shot task generators.

Three families: sinusoid regression (the classic few-shot regression
benchmark), Gaussian blob classification, and an analytic quadratic family
that every closed-form oracle in the test suite relies on.

Randomness comes from counter-based Philox generators keyed by
``(master_seed, stream, task_id, tag)`` through ``numpy.random.SeedSequence``
spawn keys.  Task parameters, support samples and query samples each use their
own tag, so the whole task stream is a pure function of the master seed and,
for a fixed task, changing the query size can never change the support set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ConfigError, Dataset

__all__ = [
    "TaskFamily",
    "Task",
    "substream",
    "sample_task",
    "sample_task_batch",
    "TAG_PARAMS",
    "TAG_SUPPORT",
    "TAG_QUERY",
    "TAG_QUERY_ALT",
]

# Stream tags inside a task.
TAG_PARAMS = 0
TAG_SUPPORT = 1
TAG_QUERY = 2
TAG_QUERY_ALT = 3  # second query draw, used when resampling for the meta perturbation

# Namespaces for non-task streams (model init, SWP masks, instruments...).
# Kept in one place so no two consumers ever share a stream.
NS_TASK = 0
NS_INIT = 1
NS_MASK = 2
NS_DIRECTIONS = 3
NS_SHARPNESS = 4
NS_PROBES = 5
NS_SUBSAMPLE = 6
NS_HELDOUT = 7

SINUSOID_AMPLITUDE_RANGE = (0.1, 5.0)
SINUSOID_PHASE_RANGE = (0.0, np.pi)
SINUSOID_INPUT_RANGE = (-5.0, 5.0)
BLOBS_MEAN_RANGE = (-3.0, 3.0)


def substream(master_seed: int, *key) -> np.random.Generator:
    """Independent Philox stream for ``(master_seed, *key)``."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class TaskFamily:
    """Hyperparameters of a task distribution.

    ``n_support``/``n_query`` are totals; for ``blobs`` they must be divisible
    by ``ways`` (K-shot means K examples per class).
    """

    kind: str
    n_support: int = 5
    n_query: int = 10
    dim: int = 1
    ways: int = 2
    noise: float = 0.5
    lambda_min: float = 0.5
    lambda_max: float = 2.0

    def __post_init__(self):
        if self.kind not in ("sinusoid", "blobs", "quadratic"):
            raise ConfigError(f"unknown task family {self.kind!r}")
        if self.n_support < 1 or self.n_query < 1:
            raise ConfigError("support and query sizes must be at least 1")
        if self.kind == "blobs":
            if self.ways < 2:
                raise ConfigError("blobs needs at least 2 ways")
            if self.n_support % self.ways or self.n_query % self.ways:
                raise ConfigError("blobs sample counts must be divisible by ways")
            if self.noise <= 0:
                raise ConfigError("blob noise must be positive")
        if self.kind == "quadratic" and not 0 < self.lambda_min <= self.lambda_max:
            raise ConfigError("quadratic eigenvalue range needs 0 < lambda_min <= lambda_max")
        if self.dim < 1:
            raise ConfigError("input dimension must be positive")

    @property
    def input_dim(self) -> int:
        return 1 if self.kind == "sinusoid" else self.dim

    @property
    def output_dim(self) -> int:
        if self.kind == "sinusoid":
            return 1
        if self.kind == "blobs":
            return self.ways
        return self.dim

    @property
    def loss_kind(self) -> str:
        if self.kind == "sinusoid":
            return "mse"
        if self.kind == "blobs":
            return "cross_entropy"
        return "quadratic_analytic"


@dataclass(frozen=True)
class Task:
    """One episode: a support set, a query set and the generating parameters."""

    support: Dataset
    query: Dataset
    family: str
    task_id: int
    params: dict


def _sinusoid_set(rng, amplitude, phase, n):
    lo, hi = SINUSOID_INPUT_RANGE
    x = rng.uniform(lo, hi, size=(n, 1))
    y = amplitude * np.sin(x + phase)
    return Dataset("mse", x, y)


def _blobs_set(rng, means, noise, n, ways):
    per_class = n // ways
    xs, ys = [], []
    for k in range(ways):
        xs.append(means[k] + noise * rng.standard_normal((per_class, means.shape[1])))
        ys.append(np.full(per_class, k, dtype=np.int64))
    return Dataset("cross_entropy", np.concatenate(xs), np.concatenate(ys))


def sample_task(family: TaskFamily, master_seed: int, task_id: int, stream: int = NS_TASK) -> Task:
    """Deterministic task draw for ``(master_seed, task_id)``.

    ``stream`` selects a disjoint task universe (``NS_HELDOUT`` gives the
    fresh evaluation stream); the default is the training stream.
    """
    prng = substream(master_seed, stream, task_id, TAG_PARAMS)

    if family.kind == "sinusoid":
        amplitude = prng.uniform(*SINUSOID_AMPLITUDE_RANGE)
        phase = prng.uniform(*SINUSOID_PHASE_RANGE)
        support = _sinusoid_set(
            substream(master_seed, stream, task_id, TAG_SUPPORT), amplitude, phase, family.n_support
        )
        query = _sinusoid_set(
            substream(master_seed, stream, task_id, TAG_QUERY), amplitude, phase, family.n_query
        )
        params = {"amplitude": amplitude, "phase": phase}

    elif family.kind == "blobs":
        lo, hi = BLOBS_MEAN_RANGE
        means = prng.uniform(lo, hi, size=(family.ways, family.dim))
        support = _blobs_set(
            substream(master_seed, stream, task_id, TAG_SUPPORT),
            means, family.noise, family.n_support, family.ways,
        )
        query = _blobs_set(
            substream(master_seed, stream, task_id, TAG_QUERY),
            means, family.noise, family.n_query, family.ways,
        )
        params = {"means": means}

    else:
        a, center = _random_spd(prng, family.dim, family.lambda_min, family.lambda_max)
        data = Dataset.quadratic(a, center)
        support = query = data
        params = {"a": a, "center": center}

    return Task(support=support, query=query, family=family.kind, task_id=int(task_id), params=params)


def _random_spd(rng, dim, lam_min, lam_max):
    """SPD matrix Q^T diag(lam) Q with eigenvalues uniform in the given range."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))  # fix the sign ambiguity so draws are canonical
    lam = rng.uniform(lam_min, lam_max, size=dim)
    a = (q * lam) @ q.T
    a = 0.5 * (a + a.T)
    center = rng.uniform(-1.0, 1.0, size=dim)
    return a, center


def sample_task_batch(
    family: TaskFamily, master_seed: int, iteration: int, m: int, stream: int = NS_TASK
) -> list[Task]:
    """Tasks ``iteration*m + j`` for ``j in range(m)``, in order."""
    if m < 1:
        raise ConfigError("batch size must be at least 1")
    base = int(iteration) * int(m)
    return [sample_task(family, master_seed, base + j, stream=stream) for j in range(m)]


def resample_query(task: Task, family: TaskFamily, master_seed: int, stream: int = NS_TASK) -> Task:
    """The same task with a fresh, independent query draw (alt stream tag)."""
    rng = substream(master_seed, stream, task.task_id, TAG_QUERY_ALT)
    if family.kind == "sinusoid":
        query = _sinusoid_set(rng, task.params["amplitude"], task.params["phase"], family.n_query)
    elif family.kind == "blobs":
        query = _blobs_set(rng, task.params["means"], family.noise, family.n_query, family.ways)
    else:
        return task  # the analytic family has nothing to resample
    return Task(task.support, query, task.family, task.task_id, task.params)
