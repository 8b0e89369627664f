"""Sharpness-aware MAML variants and their efficiency reductions.

The three variants wrap the MAML core with normalized gradient-ascent
perturbations:

* ``sharp_low`` perturbs each task's inner gradient evaluation point by
  ``eps_m = alpha_low * g / |g|`` (support gradient at theta).
* ``sharp_up`` perturbs the meta iterate by ``eps = alpha_up * h / |h|``
  where ``h`` sums the per-task meta-gradients of the unperturbed-start
  adaptation.
* ``sharp_both`` applies both, computing ``eps_m`` first, then ``eps`` from
  the ``eps_m``-perturbed adaptations, then the final update from the doubly
  perturbed descent step ``theta + eps - beta_low * grad(theta + eps + eps_m)``.

Both perturbations are held constant during meta-differentiation (the usual
first-order treatment; the normalization is never differentiated through).
Exactly normalized or exactly zero: a vanishing gradient or a zero radius
yields the zero vector and raises a degeneracy flag instead of an error.

ESAM adds two cost reducers to the inner perturbation: a Bernoulli mask on
``eps_m`` (stochastic weight perturbation, one mask per meta-iteration shared
across tasks) and sharpness-sensitive data selection, which keeps only the
fraction ``mu`` of support samples whose loss rose most under ``eps_m``.  The
selected subset drives both the biased descent gradient and the matching
Hessian term, so the meta-gradient stays the exact derivative of the realized
update; at ``xi = 1, mu = 1`` everything reduces bit-for-bit to ``sharp_low``.

ANIL restricts inner adaptation (and ``eps_m``) to the parameter head at
``head_split``; the meta-update still moves the full vector.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .models import ConfigError, DivergenceError, ModelSpec, grad, per_sample_loss
from .meta import (
    InnerConfig,
    MetaConfig,
    TraceRow,
    TrainState,
    _head_project,
    _per_task_cost,
    meta_gradient,
)
from .parallel import ordered_map
from .tasks import NS_MASK, Task, substream

__all__ = [
    "VARIANTS",
    "SharpConfig",
    "PerturbPair",
    "lower_perturbation",
    "upper_perturbation",
    "swp_mask",
    "sds_select",
    "anil_project",
    "sharp_meta_step",
]

VARIANTS = ("maml", "fomaml", "sharp_low", "sharp_up", "sharp_both")

# Below this, a gradient is treated as exactly stationary and the
# perturbation degenerates to zero (flagged, not an error).
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class SharpConfig:
    """Variant selection plus perturbation radii and the ESAM/ANIL switches."""

    variant: str = "maml"
    alpha_low: float = 0.0
    alpha_up: float = 0.0
    esam_enabled: bool = False
    xi: float = 1.0
    mu: float = 1.0
    anil_enabled: bool = False
    resample_query: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.alpha_low < 0 or self.alpha_up < 0:
            raise ConfigError("perturbation radii must be nonnegative")
        if self.variant in ("maml", "fomaml") and (self.alpha_low or self.alpha_up):
            raise ConfigError(f"{self.variant} requires both radii to be zero")
        if self.variant == "sharp_low" and self.alpha_up:
            raise ConfigError("sharp_low requires alpha_up = 0")
        if self.variant == "sharp_up" and self.alpha_low:
            raise ConfigError("sharp_up requires alpha_low = 0")
        if not 0.0 <= self.xi <= 1.0:
            raise ConfigError("xi must lie in [0, 1]")
        if not 0.0 < self.mu <= 1.0:
            raise ConfigError("mu must lie in (0, 1]")


@dataclass(frozen=True)
class PerturbPair:
    """The meta perturbation and the per-task inner perturbations of one step."""

    eps: np.ndarray
    eps_m: list

    def __post_init__(self):
        for v in [self.eps, *self.eps_m]:
            if v is not None and not np.all(np.isfinite(v)):
                raise ConfigError("perturbations must be finite")

    def check_norms(self, alpha_up: float, alpha_low: float):
        if self.eps is not None and np.linalg.norm(self.eps) > alpha_up + 1e-12:
            raise ConfigError("meta perturbation exceeds its radius")
        for v in self.eps_m:
            if v is not None and np.linalg.norm(v) > alpha_low + 1e-12:
                raise ConfigError("inner perturbation exceeds its radius")


def _normalized(direction: np.ndarray, radius: float):
    """``radius * direction / |direction|``, or (zeros, True) when degenerate."""
    norm = np.linalg.norm(direction)
    if radius == 0.0 or norm < DEGENERATE_NORM:
        return np.zeros_like(direction), True
    return (radius / norm) * direction, False


def lower_perturbation(
    model: ModelSpec,
    theta: np.ndarray,
    task: Task,
    alpha_low: float,
    head_split: int = 0,
) -> tuple[np.ndarray, bool]:
    """Inner ascent direction ``alpha_low * g / |g|`` from the support gradient.

    Returns the perturbation and a degeneracy flag.  With ``head_split`` set,
    the gradient is projected to the head before normalizing, so the emitted
    norm is still exactly ``alpha_low`` inside the head subspace.
    """
    if alpha_low < 0:
        raise ConfigError("alpha_low must be nonnegative")
    if alpha_low == 0.0:
        return np.zeros_like(np.asarray(theta, dtype=np.float64)), True
    g = grad(model, theta, task.support)
    if head_split:
        g = _head_project(g, head_split)
    return _normalized(g, alpha_low)


def upper_perturbation(
    model: ModelSpec,
    theta: np.ndarray,
    tasks: list[Task],
    inner: InnerConfig,
    alpha_up: float,
    eps_m: list | None = None,
    head_split: int = 0,
    step0_subsets: list | None = None,
    upper_tasks: list[Task] | None = None,
    threads: int = 1,
) -> tuple[np.ndarray, bool]:
    """Meta ascent direction from the summed full meta-gradients.

    The per-task meta-gradients are evaluated with the inner perturbations
    ``eps_m`` in place (zero start offset), always with the exact Hessian
    term.  ``upper_tasks`` substitutes a different query draw for this pass
    when query resampling is on.
    """
    if alpha_up < 0:
        raise ConfigError("alpha_up must be nonnegative")
    theta = np.asarray(theta, dtype=np.float64)
    if alpha_up == 0.0:
        return np.zeros_like(theta), True
    eps_m = eps_m or [None] * len(tasks)
    subsets = step0_subsets or [None] * len(tasks)
    eval_tasks = upper_tasks or tasks
    full = InnerConfig(inner.beta_low, inner.steps, first_order=False, subsample=inner.subsample)

    def one(indexed):
        idx, task = indexed
        g, _ = meta_gradient(
            model, theta, task, full,
            grad_offset=eps_m[idx], head_split=head_split, step0_subset=subsets[idx],
        )
        return g

    grads = ordered_map(one, enumerate(eval_tasks), threads)
    h = np.zeros_like(theta)
    for g in grads:
        h = h + g
    return _normalized(h, alpha_up)


def swp_mask(dim: int, xi: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Bernoulli(xi) 0/1 mask for stochastic weight perturbation."""
    if not 0.0 <= xi <= 1.0:
        raise ConfigError("xi must lie in [0, 1]")
    return (rng.random(dim) < xi).astype(np.float64)


def sds_select(perturbed_losses, base_losses, mu: float) -> np.ndarray:
    """Indices of the ``ceil(mu * n)`` samples whose loss rose most.

    The implied threshold is the order statistic of the loss increases; ties
    break toward the lower index.  Returned indices are sorted ascending.
    """
    perturbed_losses = np.asarray(perturbed_losses, dtype=np.float64)
    base_losses = np.asarray(base_losses, dtype=np.float64)
    if perturbed_losses.shape != base_losses.shape or perturbed_losses.ndim != 1:
        raise ConfigError("loss vectors must be equal-length 1-D arrays")
    n = perturbed_losses.shape[0]
    if n == 0:
        raise ConfigError("empty loss vectors")
    if not 0.0 < mu <= 1.0:
        raise ConfigError("mu must lie in (0, 1]")
    keep = math.ceil(mu * n)
    increases = perturbed_losses - base_losses
    order = np.argsort(-increases, kind="stable")  # stable: ties by lower index
    return np.sort(order[:keep])


def anil_project(g: np.ndarray, model: ModelSpec) -> np.ndarray:
    """Zero the body block (indices below ``head_split``) of a flat vector."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (model.dim,):
        raise ConfigError(f"vector has shape {g.shape}, expected ({model.dim},)")
    return _head_project(g, model.head_split)


def sharp_meta_step(
    model: ModelSpec,
    state: TrainState,
    tasks: list[Task],
    inner: InnerConfig,
    meta: MetaConfig,
    sharp: SharpConfig,
    threads: int = 1,
    upper_tasks: list[Task] | None = None,
) -> TrainState:
    """One meta-update of the configured variant.

    With both radii zero this is bit-identical to :func:`meta.maml_meta_step`
    under the same seed: zero perturbations and disabled reducers take the
    very same code path.  The trace's squared-gradient diagnostic is always
    the *unperturbed* meta-gradient (recomputed when perturbations are
    active), since that is the quantity the convergence rate is stated for.
    """
    if len(tasks) != meta.m:
        raise ConfigError(f"got {len(tasks)} tasks for a batch of {meta.m}")
    start = time.perf_counter()
    theta = state.theta
    head = model.head_split if sharp.anil_enabled else 0
    first_order = sharp.variant == "fomaml"
    update_cfg = InnerConfig(inner.beta_low, inner.steps, first_order, inner.subsample)
    degenerate = 0
    cost = 0

    # Per-task inner perturbations (plus ESAM's mask and data selection).
    if sharp.alpha_low > 0.0:
        eps_m = []
        for task in tasks:
            pert, degen = lower_perturbation(model, theta, task, sharp.alpha_low, head)
            degenerate += int(degen)
            eps_m.append(pert)
            cost += 1
        if sharp.esam_enabled and sharp.xi < 1.0:
            mask = swp_mask(model.dim, sharp.xi, substream(state.seed, NS_MASK, state.t))
            eps_m = [pert * mask for pert in eps_m]
    else:
        eps_m = [None] * len(tasks)

    subsets = [None] * len(tasks)
    if sharp.esam_enabled and sharp.mu < 1.0:
        for idx, task in enumerate(tasks):
            base = per_sample_loss(model, theta, task.support)
            shifted = theta if eps_m[idx] is None else theta + eps_m[idx]
            perturbed = per_sample_loss(model, shifted, task.support)
            subsets[idx] = sds_select(perturbed, base, sharp.mu)

    # Meta perturbation from the eps_m-perturbed adaptations.
    if sharp.alpha_up > 0.0:
        eps, degen = upper_perturbation(
            model, theta, tasks, inner, sharp.alpha_up,
            eps_m=eps_m, head_split=head, step0_subsets=subsets,
            upper_tasks=upper_tasks, threads=threads,
        )
        degenerate += int(degen)
        cost += _per_task_cost(InnerConfig(inner.beta_low, inner.steps)) * len(tasks)
    else:
        eps = None

    perturbed_run = eps is not None or any(p is not None for p in eps_m) or any(
        s is not None for s in subsets
    )

    def one(indexed):
        idx, task = indexed
        try:
            return meta_gradient(
                model, theta, task, update_cfg,
                start_offset=eps, grad_offset=eps_m[idx],
                head_split=head, step0_subset=subsets[idx],
            )
        except DivergenceError as err:
            err.task_index = idx
            err.iteration = state.t + 1
            raise

    results = ordered_map(one, enumerate(tasks), threads)
    cost += _per_task_cost(update_cfg) * len(tasks)
    gsum = np.zeros_like(theta)
    for g, _ in results:
        gsum = gsum + g
    qlosses = [q for _, q in results]

    # Rate diagnostic: the meta-gradient of the unperturbed objective.
    if perturbed_run:
        def diag(indexed):
            idx, task = indexed
            g, _ = meta_gradient(model, theta, task, update_cfg, head_split=head)
            return g

        diag_grads = ordered_map(diag, enumerate(tasks), threads)
        cost += _per_task_cost(update_cfg) * len(tasks)
        diag_sum = np.zeros_like(theta)
        for g in diag_grads:
            diag_sum = diag_sum + g
    else:
        diag_sum = gsum

    state.grad_evals += cost
    eps_norm = 0.0 if eps is None else float(np.linalg.norm(eps))
    mean_eps_m = float(
        np.mean([0.0 if p is None else np.linalg.norm(p) for p in eps_m])
    )

    # The update uses gsum; the trace records the diagnostic norm.
    m = len(tasks)
    state.theta = theta - meta.beta_up * gsum
    if not np.all(np.isfinite(state.theta)):
        raise DivergenceError("non-finite meta-parameters", iteration=state.t + 1)
    state.t += 1
    grad_norm_sq = float(np.dot(diag_sum / m, diag_sum / m))
    running = state.trace.append(state.t, grad_norm_sq)
    wall_ms = (time.perf_counter() - start) * 1e3
    state.rows.append(
        TraceRow(
            iteration=state.t,
            meta_loss=float(np.mean(qlosses)),
            grad_norm_sq=grad_norm_sq,
            running_avg=running,
            wall_ms=wall_ms,
            eps_norm=eps_norm,
            mean_eps_m_norm=mean_eps_m,
            degenerate_flags=degenerate,
        )
    )
    return state
