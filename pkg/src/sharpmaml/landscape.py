"""Loss-landscape instruments.

Everything here measures geometry rather than trains: 2-D loss sections
along filter-normalized random directions, a projected-gradient-ascent
sharpness measure (the true constrained maximum is approximated by search,
deliberately independent of the closed-form ascent step the training loop
uses), and train/test generalization-gap measurement over task streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ConfigError, Dataset, DivergenceError, ModelSpec, _forward, grad, loss
from .meta import InnerConfig, inner_adapt
from .parallel import ordered_map
from .tasks import NS_DIRECTIONS, NS_HELDOUT, TaskFamily, Task, sample_task, substream

__all__ = [
    "Directions",
    "LandscapeGrid",
    "SharpnessResult",
    "GapResult",
    "random_directions",
    "loss_grid",
    "sharpness",
    "sharpness_schedule",
    "generalization_gap",
]

# Cells whose objective is non-finite store the largest finite float and set
# the diverged flag; landscapes legitimately contain blow-up regions.
DIVERGED_SENTINEL = float(np.finfo(np.float64).max)

ASCENT_STEPS = 20


@dataclass(frozen=True)
class Directions:
    """A filter-normalized, orthogonalized direction pair."""

    d1: np.ndarray
    d2: np.ndarray
    zeroed_groups: tuple = ()

    def __iter__(self):
        return iter((self.d1, self.d2))


@dataclass
class LandscapeGrid:
    """A 2-D section: ``values[i, j]`` is the objective at
    ``theta + xs[j] * d1 + ys[i] * d2``."""

    d1: np.ndarray
    d2: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray
    diverged: np.ndarray
    objective_tag: str


def _param_groups(model: ModelSpec):
    """Flat-index groups for filter normalization.

    Dense layers get one group per output unit's incoming weights (a column
    of W); biases form one group per layer.
    """
    groups = []
    offset = 0
    for li, (fan_in, fan_out) in enumerate(zip(model.layer_widths[:-1], model.layer_widths[1:])):
        for j in range(fan_out):
            idx = offset + j + fan_out * np.arange(fan_in)
            groups.append((f"layer{li}.unit{j}", idx))
        offset += fan_in * fan_out
        groups.append((f"layer{li}.bias", np.arange(offset, offset + fan_out)))
        offset += fan_out
    return groups


def random_directions(model: ModelSpec, theta: np.ndarray, seed: int) -> Directions:
    """Two Gaussian directions rescaled so each parameter group matches the
    group norm of ``theta``, then orthogonalized.

    Groups where ``theta`` itself has zero norm get a zero direction and are
    reported in ``zeroed_groups``.
    """
    if model.kind != "mlp":
        raise ConfigError("filter-normalized directions are defined for mlp models")
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (model.dim,):
        raise ConfigError("parameter vector does not match the model")
    rng = substream(seed, NS_DIRECTIONS)
    raw = [rng.standard_normal(model.dim), rng.standard_normal(model.dim)]
    zeroed = []
    dirs = []
    for d in raw:
        out = np.zeros(model.dim)
        for name, idx in _param_groups(model):
            ref = np.linalg.norm(theta[idx])
            cur = np.linalg.norm(d[idx])
            if ref == 0.0 or cur == 0.0:
                if ref == 0.0 and name not in zeroed:
                    zeroed.append(name)
                continue
            out[idx] = d[idx] * (ref / cur)
        dirs.append(out)
    d1, d2 = dirs
    # Gram-Schmidt on the flat vectors after normalization.
    denom = float(d1 @ d1)
    if denom > 0.0:
        d2 = d2 - (float(d1 @ d2) / denom) * d1
    return Directions(d1=d1, d2=d2, zeroed_groups=tuple(zeroed))


def _cell_objective(model, theta, task, objective_tag, inner):
    if objective_tag == "erm_task_loss":
        return loss(model, theta, task.support)
    # One-step adapted loss on the same set: the per-task meta objective
    # whose stationary points coincide with the plain loss's.
    adapted = inner_adapt(model, theta, task, inner)[-1]
    return loss(model, adapted, task.support)


def loss_grid(
    model: ModelSpec,
    theta: np.ndarray,
    task: Task,
    directions,
    extent: float = 1.0,
    resolution: int = 51,
    objective_tag: str = "erm_task_loss",
    inner: InnerConfig | None = None,
    threads: int = 1,
) -> LandscapeGrid:
    """Uniform 2-D section of the task loss (or the adapted task loss).

    Cells where the objective is non-finite get the divergence sentinel and a
    flag instead of aborting the sweep.
    """
    if resolution < 2:
        raise ConfigError("grid resolution must be at least 2")
    if objective_tag not in ("erm_task_loss", "maml_task_loss"):
        raise ConfigError(f"unknown objective {objective_tag!r}")
    if objective_tag == "maml_task_loss" and inner is None:
        raise ConfigError("the adapted-loss grid needs an inner configuration")
    theta = np.asarray(theta, dtype=np.float64)
    d1, d2 = directions
    xs = np.linspace(-extent, extent, resolution)
    ys = np.linspace(-extent, extent, resolution)

    def row(i):
        vals = np.empty(resolution)
        flags = np.zeros(resolution, dtype=bool)
        for j in range(resolution):
            point = theta + xs[j] * d1 + ys[i] * d2
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    v = _cell_objective(model, point, task, objective_tag, inner)
            except DivergenceError:
                v = np.nan
            if not np.isfinite(v):
                vals[j] = DIVERGED_SENTINEL
                flags[j] = True
            else:
                vals[j] = v
        return vals, flags

    rows = ordered_map(row, range(resolution), threads)
    values = np.stack([r[0] for r in rows])
    diverged = np.stack([r[1] for r in rows])
    return LandscapeGrid(d1=np.asarray(d1, dtype=np.float64), d2=np.asarray(d2, dtype=np.float64),
                         xs=xs, ys=ys, values=values, diverged=diverged,
                         objective_tag=objective_tag)


@dataclass(frozen=True)
class SharpnessResult:
    alpha: float
    value: float
    argmax_norm: float
    restarts: int
    argmax: np.ndarray


def sharpness(
    model: ModelSpec,
    theta: np.ndarray,
    data: Dataset,
    alpha: float,
    budget: int = 8,
    rng: np.random.Generator | None = None,
    warm_start: np.ndarray | None = None,
) -> SharpnessResult:
    """Lower bound on ``max_{|eps| <= alpha} [L(theta+eps) - L(theta)]``.

    Multi-start projected gradient ascent: ``budget`` restarts of 20
    fixed-length steps (length ``alpha/10`` along the normalized gradient,
    then projection back onto the ball).  One restart starts along the loss
    gradient at ``theta``; the rest are random points on the sphere.  A warm
    start is prepended when given, which makes an increasing-radius schedule
    monotone by construction.
    """
    if alpha <= 0:
        raise ConfigError("sharpness radius must be positive")
    if budget < 1:
        raise ConfigError("at least one restart is required")
    if rng is None:
        rng = np.random.default_rng(0)
    theta = np.asarray(theta, dtype=np.float64)
    base = loss(model, theta, data)
    step = alpha / 10.0

    starts = []
    if warm_start is not None and np.linalg.norm(warm_start) > 0:
        ws = np.asarray(warm_start, dtype=np.float64)
        if np.linalg.norm(ws) > alpha:
            ws = ws * (alpha / np.linalg.norm(ws))
        starts.append(ws)
    g0 = grad(model, theta, data)
    n0 = np.linalg.norm(g0)
    if n0 > 0:
        starts.append((alpha / n0) * g0)
    while len(starts) < budget + (warm_start is not None):
        d = rng.standard_normal(theta.shape[0])
        starts.append((alpha / np.linalg.norm(d)) * d)

    best_val = 0.0  # eps = 0 is always feasible
    best_eps = np.zeros_like(theta)
    for eps in starts:
        eps = eps.copy()
        for _ in range(ASCENT_STEPS):
            g = grad(model, theta + eps, data)
            gn = np.linalg.norm(g)
            if not np.isfinite(gn) or gn == 0.0:
                break
            eps = eps + (step / gn) * g
            norm = np.linalg.norm(eps)
            if norm > alpha:
                eps *= alpha / norm
        val = loss(model, theta + eps, data) - base
        if np.isfinite(val) and val > best_val:
            best_val = val
            best_eps = eps
    return SharpnessResult(alpha=float(alpha), value=float(best_val),
                           argmax_norm=float(np.linalg.norm(best_eps)),
                           restarts=int(budget), argmax=best_eps)


def sharpness_schedule(
    model: ModelSpec,
    theta: np.ndarray,
    data: Dataset,
    alphas,
    budget: int = 8,
    rng: np.random.Generator | None = None,
) -> list[SharpnessResult]:
    """Sharpness over an increasing radius schedule, warm-starting each radius
    from the previous argmax so the reported values are non-decreasing."""
    alphas = list(alphas)
    if any(b < a for a, b in zip(alphas, alphas[1:])):
        raise ConfigError("the radius schedule must be sorted ascending")
    if rng is None:
        rng = np.random.default_rng(0)
    results = []
    warm = None
    for alpha in alphas:
        res = sharpness(model, theta, data, alpha, budget, rng, warm_start=warm)
        if results and res.value < results[-1].value:
            # The warm start already achieves the previous value inside the
            # larger ball; keep the better point.
            res = SharpnessResult(alpha=float(alpha), value=results[-1].value,
                                  argmax_norm=results[-1].argmax_norm,
                                  restarts=budget, argmax=results[-1].argmax)
        results.append(res)
        warm = res.argmax
    return results


@dataclass(frozen=True)
class GapResult:
    train_metric: float
    test_metric: float
    gap: float


def _post_adapt_metric(model, theta, task, inner):
    adapted = inner_adapt(model, theta, task, inner)[-1]
    if task.query.loss_kind == "cross_entropy":
        # Error rate: fraction of query labels not matching the argmax logit.
        _, acts = _forward(model, adapted, task.query.inputs)
        pred = np.argmax(acts[-1], axis=1)
        return float(np.mean(pred != task.query.targets))
    return loss(model, adapted, task.query)


def generalization_gap(
    model: ModelSpec,
    theta: np.ndarray,
    family: TaskFamily,
    inner: InnerConfig,
    n_train_tasks: int,
    n_test_tasks: int,
    seeds,
) -> GapResult:
    """Post-adaptation query metric on training-stream tasks versus freshly
    sampled held-out tasks; ``gap = test - train``.

    The metric is query MSE for regression families and error rate for
    classification.  Results are averaged over the given master seeds.
    """
    if n_train_tasks < 1 or n_test_tasks < 1:
        raise ConfigError("task counts must be at least 1")
    seeds = [int(s) for s in np.atleast_1d(seeds)]
    train_vals, test_vals = [], []
    for seed in seeds:
        for tid in range(n_train_tasks):
            task = sample_task(family, seed, tid)
            train_vals.append(_post_adapt_metric(model, theta, task, inner))
        for tid in range(n_test_tasks):
            task = sample_task(family, seed, tid, stream=NS_HELDOUT)
            test_vals.append(_post_adapt_metric(model, theta, task, inner))
    train_metric = float(np.mean(train_vals))
    test_metric = float(np.mean(test_vals))
    return GapResult(train_metric=train_metric, test_metric=test_metric,
                     gap=test_metric - train_metric)
