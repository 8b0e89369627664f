"""MAML core: inner-loop adaptation and exact meta-gradients.

The inner loop is plain gradient descent on the support set.  The
meta-gradient is computed exactly by a reverse Hessian-vector-product sweep
over the stored inner trajectory (backprop through the optimization), which
for one inner step reduces to the closed form

    (I - beta_low * H_support(theta)) grad_query(theta')

First-order MAML skips the sweep and returns the query gradient at the
adapted parameters.

Both entry points accept two perturbation offsets so the sharpness-aware
variants can reuse them: ``start_offset`` shifts the trajectory start
(``theta_0 = theta + start_offset``) and ``grad_offset`` shifts the point
where the first inner gradient is evaluated.  Offsets are treated as
constants during differentiation (they are never differentiated through),
and for multi-step runs ``grad_offset`` applies to step 0 only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .models import ConfigError, DivergenceError, ModelSpec, grad, hvp, loss
from .parallel import ordered_map
from .tasks import Task

__all__ = [
    "InnerConfig",
    "MetaConfig",
    "ConvergenceTrace",
    "TraceRow",
    "TrainState",
    "inner_adapt",
    "meta_gradient",
    "maml_meta_step",
    "erm_step",
]


@dataclass(frozen=True)
class InnerConfig:
    """Lower-level settings: step size, step count, FOMAML switch.

    ``subsample`` > 0 draws that many support points per inner step (a fresh
    draw each step from the caller-provided generator); 0 means full batch.
    """

    beta_low: float
    steps: int = 1
    first_order: bool = False
    subsample: int = 0

    def __post_init__(self):
        if self.beta_low < 0:
            raise ConfigError("beta_low must be nonnegative")
        if self.steps < 1:
            raise ConfigError("at least one inner step is required")
        if self.subsample < 0:
            raise ConfigError("subsample must be nonnegative")


@dataclass(frozen=True)
class MetaConfig:
    beta_up: float
    m: int = 1
    t: int = 1

    def __post_init__(self):
        if self.beta_up <= 0 or self.m < 1 or self.t < 1:
            raise ConfigError("meta step size, batch size and horizon must be positive")


class ConvergenceTrace:
    """Per-iteration squared meta-gradient norms with their prefix means.

    Appending keeps the invariant ``running[i] == mean(values[:i+1])`` (with
    the count continuing across a checkpoint resume, where earlier values are
    summarized by ``carry_sum``/``carry_count``).
    """

    def __init__(self, carry_sum: float = 0.0, carry_count: int = 0):
        self.iters: list[int] = []
        self.values: list[float] = []
        self.running: list[float] = []
        self._sum = float(carry_sum)
        self._count = int(carry_count)

    def append(self, iteration: int, value: float) -> float:
        self._sum += value
        self._count += 1
        avg = self._sum / self._count
        self.iters.append(iteration)
        self.values.append(value)
        self.running.append(avg)
        return avg

    @property
    def total(self) -> float:
        return self._sum

    @property
    def count(self) -> int:
        return self._count

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class TraceRow:
    """One trace-CSV record."""

    iteration: int
    meta_loss: float
    grad_norm_sq: float
    running_avg: float
    wall_ms: float
    eps_norm: float = 0.0
    mean_eps_m_norm: float = 0.0
    degenerate_flags: int = 0


@dataclass
class TrainState:
    """Meta-parameters plus the bookkeeping a training loop owns exclusively."""

    theta: np.ndarray
    t: int = 0
    seed: int = 0
    trace: ConvergenceTrace = field(default_factory=ConvergenceTrace)
    rows: list[TraceRow] = field(default_factory=list)
    grad_evals: int = 0


def _head_project(v: np.ndarray, head_split: int) -> np.ndarray:
    out = v.copy()
    out[:head_split] = 0.0
    return out


def _inner_run(model, theta, task, cfg, start_offset, grad_offset, head_split, step0_subset, rng):
    """Trajectory plus what the reverse sweep needs to replay it exactly.

    Returns ``(traj, points, datasets)`` where ``points[j]`` is the gradient
    evaluation point of step ``j`` and ``datasets[j]`` the (possibly
    subsampled) support set used there.
    """
    if cfg.subsample and rng is None:
        raise ConfigError("per-step subsampling needs a generator")
    theta = np.asarray(theta, dtype=np.float64)
    theta0 = theta if start_offset is None else theta + start_offset
    traj = [theta0]
    points = []
    datasets = []
    current = theta0
    for j in range(cfg.steps):
        data = task.support
        if step0_subset is not None and j == 0:
            data = data.subset(step0_subset)
        if cfg.subsample and cfg.subsample < data.n:
            data = data.subset(rng.choice(data.n, size=cfg.subsample, replace=False))
        point = current if (grad_offset is None or j > 0) else current + grad_offset
        g = grad(model, point, data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite inner gradient at step {j}", step=j)
        if head_split:
            # ANIL: the inner update touches only the head.
            g = _head_project(g, head_split)
        current = current - cfg.beta_low * g
        if not np.all(np.isfinite(current)):
            raise DivergenceError(f"non-finite parameters after step {j}", step=j)
        traj.append(current)
        points.append(point)
        datasets.append(data)
    return traj, points, datasets


def inner_adapt(
    model: ModelSpec,
    theta: np.ndarray,
    task: Task,
    cfg: InnerConfig,
    start_offset: np.ndarray | None = None,
    grad_offset: np.ndarray | None = None,
    head_split: int | None = None,
    step0_subset: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> list[np.ndarray]:
    """Gradient-descent trajectory ``[theta_0, ..., theta_K]`` on the support set.

    With ``start_offset = eps`` and ``grad_offset = eps_m`` a single step
    computes ``theta + eps - beta_low * grad(theta + eps + eps_m; support)``,
    the biased descent step the sharpness-aware variants are built from.
    """
    traj, _, _ = _inner_run(
        model, theta, task, cfg, start_offset, grad_offset, int(head_split or 0), step0_subset, rng
    )
    return traj


def meta_gradient(
    model: ModelSpec,
    theta: np.ndarray,
    task: Task,
    cfg: InnerConfig,
    start_offset: np.ndarray | None = None,
    grad_offset: np.ndarray | None = None,
    head_split: int | None = None,
    step0_subset: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, float]:
    """Exact per-task meta-gradient and the query loss at the adapted point.

    The reverse sweep applies ``v <- v - beta_low * H_j v`` for each inner
    step ``j`` from last to first, with ``H_j`` the support Hessian at that
    step's evaluation point.  Offsets enter only as constants.  With
    ``first_order`` set, the sweep is skipped entirely.
    """
    head = int(head_split or 0)
    traj, points, datasets = _inner_run(
        model, theta, task, cfg, start_offset, grad_offset, head, step0_subset, rng
    )
    adapted = traj[-1]
    query_loss = loss(model, adapted, task.query)
    v = grad(model, adapted, task.query)
    if not np.all(np.isfinite(v)) or not np.isfinite(query_loss):
        raise DivergenceError("non-finite query loss or gradient", step=cfg.steps)
    if cfg.first_order:
        return v, query_loss
    for j in range(cfg.steps - 1, -1, -1):
        u = _head_project(v, head) if head else v
        v = v - cfg.beta_low * hvp(model, points[j], datasets[j], u)
    if not np.all(np.isfinite(v)):
        raise DivergenceError("non-finite meta-gradient", step=0)
    return v, query_loss


def _per_task_cost(cfg: InnerConfig) -> int:
    """Gradient-evaluation units of one meta-gradient (an HVP counts as two)."""
    return cfg.steps + 1 + (0 if cfg.first_order else 2 * cfg.steps)


def _apply_update(state, gsum, qlosses, meta, wall_start, eps_norm, mean_eps_m_norm, degenerate):
    m = len(qlosses)
    state.theta = state.theta - meta.beta_up * gsum
    if not np.all(np.isfinite(state.theta)):
        raise DivergenceError("non-finite meta-parameters", iteration=state.t + 1)
    state.t += 1
    grad_norm_sq = float(np.dot(gsum / m, gsum / m))
    running = state.trace.append(state.t, grad_norm_sq)
    wall_ms = (time.perf_counter() - wall_start) * 1e3
    state.rows.append(
        TraceRow(
            iteration=state.t,
            meta_loss=float(np.mean(qlosses)),
            grad_norm_sq=grad_norm_sq,
            running_avg=running,
            wall_ms=wall_ms,
            eps_norm=eps_norm,
            mean_eps_m_norm=mean_eps_m_norm,
            degenerate_flags=degenerate,
        )
    )
    return state


def maml_meta_step(
    model: ModelSpec,
    state: TrainState,
    tasks: list[Task],
    inner: InnerConfig,
    meta: MetaConfig,
    threads: int = 1,
) -> TrainState:
    """One meta-update: ``theta <- theta - beta_up * sum_m g_m``.

    Per-task gradients may be computed concurrently; the sum always reduces in
    task order, and the trace records ``|sum g_m / M|^2`` and the mean query
    loss.
    """
    if len(tasks) != meta.m:
        raise ConfigError(f"got {len(tasks)} tasks for a batch of {meta.m}")
    start = time.perf_counter()

    def one(indexed):
        idx, task = indexed
        try:
            return meta_gradient(model, state.theta, task, inner)
        except DivergenceError as err:
            err.task_index = idx
            err.iteration = state.t + 1
            raise

    results = ordered_map(one, enumerate(tasks), threads)
    gsum = np.zeros_like(state.theta)
    for g, _ in results:
        gsum = gsum + g
    state.grad_evals += _per_task_cost(inner) * len(tasks)
    return _apply_update(state, gsum, [q for _, q in results], meta, start, 0.0, 0.0, 0)


def erm_step(
    model: ModelSpec,
    state: TrainState,
    tasks: list[Task],
    meta: MetaConfig,
    threads: int = 1,
) -> TrainState:
    """Plain gradient descent on the support losses averaged across tasks.

    The multi-task baseline used for landscape comparisons and the
    stationary-point checks.
    """
    start = time.perf_counter()

    def one(indexed):
        idx, task = indexed
        g = grad(model, state.theta, task.support)
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite task gradient", task_index=idx, iteration=state.t + 1)
        return g, loss(model, state.theta, task.support)

    results = ordered_map(one, enumerate(tasks), threads)
    gmean = np.zeros_like(state.theta)
    for g, _ in results:
        gmean = gmean + g
    gmean /= len(tasks)
    state.grad_evals += len(tasks)

    state.theta = state.theta - meta.beta_up * gmean
    state.t += 1
    grad_norm_sq = float(np.dot(gmean, gmean))
    running = state.trace.append(state.t, grad_norm_sq)
    wall_ms = (time.perf_counter() - start) * 1e3
    state.rows.append(
        TraceRow(
            iteration=state.t,
            meta_loss=float(np.mean([q for _, q in results])),
            grad_norm_sq=grad_norm_sq,
            running_avg=running,
            wall_ms=wall_ms,
        )
    )
    return state
