"""Executable theory: bound calculators and convergence diagnostics.

Three instruments live here.

* ``pac_bound`` evaluates the PAC-Bayes generalization bound for the
  sharpness-aware meta-learner: worst-case empirical loss in the radius-alpha
  ball, plus the lower-level algorithm's uniform-stability constant, plus a
  dimension/sample complexity term.  ``bound_alpha_sweep`` traces the bound
  over a radius grid and checks the claim that a vanishing radius is never
  optimal: every sufficiently small radius is beaten by some larger one.
* ``lemma1_check`` verifies, instance by instance, that stationary points
  (and local minimizers) of a task's plain loss remain stationary points
  (local minimizers) of its one-step-adapted loss.
* ``convergence_diagnostic`` summarizes a squared-meta-gradient trace by its
  final running average and the log-log slope of the running average, the
  empirical counterpart of an O(1/sqrt(T)) rate statement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .models import ConfigError, ModelSpec, grad, hvp, loss, loss_and_grad
from .meta import ConvergenceTrace, InnerConfig, inner_adapt, meta_gradient
from .tasks import NS_PROBES, Task, substream

__all__ = [
    "BoundInputs",
    "SweepRow",
    "SweepResult",
    "Lemma1Report",
    "DiagnosticResult",
    "pac_bound",
    "bound_alpha_sweep",
    "lemma1_check",
    "convergence_diagnostic",
    "gd_uniform_stability",
]

# The detailed derivation of the bound carries an additive constant inside
# the square root that the headline form drops; both are exposed.
APPENDIX_CONSTANT = 14.0


@dataclass(frozen=True)
class BoundInputs:
    """Everything the generalization bound needs.

    ``k`` parameter dimension, ``n`` per-task samples, ``m`` tasks,
    ``delta`` failure probability, ``alpha`` perturbation radius,
    ``theta_norm_sq`` squared parameter norm, ``gamma_a`` uniform stability
    of the lower-level algorithm, ``empirical_term`` the measured
    ``max_{|eps| <= alpha} F(theta + eps)`` (losses assumed in [0, 1]).
    """

    k: int
    n: int
    m: int
    delta: float
    alpha: float
    theta_norm_sq: float
    gamma_a: float = 0.0
    empirical_term: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("parameter dimension must be positive")
        if self.n < 1 or self.m < 1 or self.n * self.m < 2:
            raise ConfigError("the bound needs at least two training samples in total")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.alpha <= 0.0:
            raise ConfigError("the perturbation radius must be positive")
        if self.theta_norm_sq < 0.0 or self.gamma_a < 0.0:
            raise ConfigError("norms and stability constants are nonnegative")
        if not 0.0 <= self.empirical_term <= 1.0:
            raise ConfigError("the empirical term is a loss in [0, 1]")

    @property
    def total(self) -> int:
        return self.n * self.m


def _sqrt_term(k, total, delta, alpha, theta_norm_sq, constant):
    inflate = (1.0 + math.sqrt(math.log(total) / k)) ** 2
    inner = (
        k * math.log1p(theta_norm_sq / alpha**2 * inflate)
        + constant
        + 2.0 * math.log(1.0 / delta)
        + 5.0 * math.log(total)
    )
    return math.sqrt(inner / (4.0 * total))


def pac_bound(b: BoundInputs, include_appendix_constant: bool = False) -> float:
    """Upper bound on the population loss of the perturbed meta-learner.

    ``empirical_term + gamma_a + sqrt((k ln(1 + |theta|^2/alpha^2 (1 +
    sqrt(ln(nM)/k))^2) + 2 ln(1/delta) + 5 ln(nM)) / (4 nM))``; the optional
    constant adds the detailed derivation's +14 inside the square root.
    """
    constant = APPENDIX_CONSTANT if include_appendix_constant else 0.0
    return b.empirical_term + b.gamma_a + _sqrt_term(
        b.k, b.total, b.delta, b.alpha, b.theta_norm_sq, constant
    )


def gd_uniform_stability(c: float, n: int) -> float:
    """Convenience ``c / n`` stability constant for lower-level gradient descent."""
    if n < 1 or c < 0:
        raise ConfigError("need n >= 1 and c >= 0")
    return c / n


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    empirical_term: float
    sqrt_term: float
    gamma_a: float
    bound: float
    qualifying: bool


@dataclass(frozen=True)
class SweepResult:
    rows: list
    argmin_alpha: float
    threshold: float
    claim_checked: bool
    claim_holds: bool


def _small_alpha_threshold(c: float, total: int, k: int) -> float:
    """Radius below which the bound's log term alone exceeds 1.

    ``sqrt(c / (exp(4 nM / k) - 1))``, computed in log space so huge
    exponents degrade to zero instead of overflowing.
    """
    if c == 0.0:
        return 0.0
    ratio = 4.0 * total / k
    if ratio > 700.0:  # exp overflows float64; the threshold underflows anyway
        return math.sqrt(c) * math.exp(-0.5 * ratio)
    return math.sqrt(c / math.expm1(ratio))


def bound_alpha_sweep(
    b: BoundInputs,
    alphas,
    empirical_term_fn=None,
    include_appendix_constant: bool = False,
) -> SweepResult:
    """Bound values over a radius grid plus the small-radius existence check.

    ``empirical_term_fn`` maps a radius to the measured worst-case empirical
    loss (defaults to the constant ``b.empirical_term``).  A grid radius is
    *qualifying* when it falls below the small-alpha threshold; the claim
    holds when every qualifying radius is beaten by some strictly larger grid
    radius.  ``b.alpha`` is ignored; the grid supplies the radii.
    """
    alphas = [float(a) for a in alphas]
    if not alphas or any(a <= 0 for a in alphas):
        raise ConfigError("radii must be positive")
    if any(y < x for x, y in zip(alphas, alphas[1:])):
        raise ConfigError("radii must be sorted ascending")
    if empirical_term_fn is None:
        empirical_term_fn = lambda _alpha: b.empirical_term

    constant = APPENDIX_CONSTANT if include_appendix_constant else 0.0
    total = b.total
    c = b.theta_norm_sq * (1.0 + math.sqrt(math.log(total) / b.k)) ** 2
    threshold = _small_alpha_threshold(c, total, b.k)

    rows = []
    for alpha in alphas:
        emp = float(empirical_term_fn(alpha))
        if not 0.0 <= emp <= 1.0:
            raise ConfigError("the empirical term must stay within [0, 1]")
        sqrt_term = _sqrt_term(b.k, total, b.delta, alpha, b.theta_norm_sq, constant)
        rows.append(
            SweepRow(
                alpha=alpha,
                empirical_term=emp,
                sqrt_term=sqrt_term,
                gamma_a=b.gamma_a,
                bound=emp + b.gamma_a + sqrt_term,
                qualifying=alpha < threshold,
            )
        )

    argmin_alpha = min(rows, key=lambda r: r.bound).alpha
    claim_checked = any(r.qualifying for r in rows)
    claim_holds = True
    for i, row in enumerate(rows):
        if not row.qualifying:
            continue
        if not any(r.bound < row.bound for r in rows[i + 1 :]):
            claim_holds = False
            break
    return SweepResult(
        rows=rows,
        argmin_alpha=argmin_alpha,
        threshold=threshold,
        claim_checked=claim_checked,
        claim_holds=claim_holds and claim_checked,
    )


@dataclass(frozen=True)
class Lemma1Report:
    """Outcome of the stationary-point preservation check."""

    status: str  # verified | inconclusive | failed
    probes: list


def _same_data(a, b) -> bool:
    if a is b:
        return True
    if a.loss_kind != b.loss_kind:
        return False
    if a.loss_kind == "quadratic_analytic":
        return np.array_equal(a.quad_a, b.quad_a) and np.array_equal(a.quad_center, b.quad_center)
    return np.array_equal(a.inputs, b.inputs) and np.array_equal(a.targets, b.targets)


def _operator_norm_estimate(model, theta, data, rng, iters=30):
    v = rng.standard_normal(model.dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        hv = hvp(model, theta, data, v)
        est = float(np.linalg.norm(hv))
        if est == 0.0:
            return 0.0
        v = hv / est
    return est


def _find_stationary(model, task, start, tol_grad):
    fun = lambda x: loss_and_grad(model, x, task.support)
    res = optimize.minimize(fun, start, jac=True, method="L-BFGS-B",
                            options={"maxiter": 2000, "ftol": 1e-18, "gtol": 1e-14})
    x = res.x
    # Newton polish with the exact Hessian-vector product.
    res = optimize.minimize(
        fun, x, jac=True, method="Newton-CG",
        hessp=lambda x, p: hvp(model, x, task.support, p),
        options={"maxiter": 200, "xtol": 1e-16},
    )
    x = res.x
    gnorm = float(np.linalg.norm(grad(model, x, task.support)))
    return x, gnorm


def lemma1_check(
    model: ModelSpec,
    task: Task,
    inner: InnerConfig,
    n_probes: int = 5,
    seed: int = 0,
    tol_grad: float = 1e-9,
    tol_min: float = 1e-6,
) -> Lemma1Report:
    """Verify that stationary points of the task loss stay stationary (and
    minimizers stay minimizers) for the adapted loss.

    Requires ``task.support == task.query`` (the setting the statement is
    made in).  For quadratics the stationary point and the adapted-loss
    Hessian ``(I - beta A)^2 A`` are closed forms and the check is exact; for
    MLPs each probe optimizes the task loss from a random start to gradient
    norm ``tol_grad``, then asserts the meta-gradient is small in proportion
    and that random second-difference Rayleigh quotients of the adapted loss
    are nonnegative up to ``tol_min``.  Probes that fail to reach ``tol_grad``
    are inconclusive, not failures.
    """
    if not _same_data(task.support, task.query):
        raise ConfigError("the check is stated for support == query")
    probes = []

    if model.kind == "quadratic":
        a = task.support.quad_a
        center = task.support.quad_center
        theta_star = center  # the unique stationary point, exactly
        gnorm = float(np.linalg.norm(grad(model, theta_star, task.support)))
        mg, _ = meta_gradient(model, theta_star, task, inner)
        lam = np.linalg.eigvalsh(a)
        maml_hessian_eigs = (1.0 - inner.beta_low * lam) ** 2 * lam
        ok = gnorm <= tol_grad and float(np.linalg.norm(mg)) <= tol_grad and bool(
            np.all(maml_hessian_eigs >= -1e-12)
        )
        probes.append(
            {
                "grad_norm": gnorm,
                "meta_grad_norm": float(np.linalg.norm(mg)),
                "meta_grad_bound": tol_grad,
                "min_adapted_curvature": float(maml_hessian_eigs.min()),
                "status": "verified" if ok else "failed",
            }
        )
        return Lemma1Report(status=probes[0]["status"], probes=probes)

    rng = substream(seed, NS_PROBES)
    statuses = []
    for _ in range(n_probes):
        start = rng.standard_normal(model.dim)
        theta_star, gnorm = _find_stationary(model, task, start, tol_grad)
        if gnorm > tol_grad:
            probes.append({"grad_norm": gnorm, "status": "inconclusive"})
            statuses.append("inconclusive")
            continue
        h_bound = _operator_norm_estimate(model, theta_star, task.support, rng)
        bound = tol_grad * (1.0 + inner.beta_low * h_bound) ** inner.steps
        mg, _ = meta_gradient(model, theta_star, task, inner)
        mg_norm = float(np.linalg.norm(mg))

        # Second-difference Rayleigh quotients of the adapted loss.
        def adapted_loss(x):
            return loss(model, inner_adapt(model, x, task, inner)[-1], task.support)

        h = 1e-3
        base = adapted_loss(theta_star)
        curvatures = []
        for _ in range(n_probes):
            v = rng.standard_normal(model.dim)
            v /= np.linalg.norm(v)
            curvatures.append(
                (adapted_loss(theta_star + h * v) - 2 * base + adapted_loss(theta_star - h * v))
                / h**2
            )
        ok = mg_norm <= bound and all(cv >= -tol_min for cv in curvatures)
        probes.append(
            {
                "grad_norm": gnorm,
                "meta_grad_norm": mg_norm,
                "meta_grad_bound": bound,
                "min_adapted_curvature": float(min(curvatures)),
                "status": "verified" if ok else "failed",
            }
        )
        statuses.append(probes[-1]["status"])

    if "failed" in statuses:
        status = "failed"
    elif "verified" in statuses:
        status = "verified"
    else:
        status = "inconclusive"
    return Lemma1Report(status=status, probes=probes)


@dataclass(frozen=True)
class DiagnosticResult:
    final_avg: float
    slope: float
    slope_defined: bool


def convergence_diagnostic(trace: ConvergenceTrace) -> DiagnosticResult:
    """Final running average and the log-log slope over the trace's last half.

    A running average hitting zero (or a negative value) makes the log slope
    undefined; it is then reported as 0 with ``slope_defined`` false.
    """
    if len(trace) < 100:
        raise ConfigError("the diagnostic needs at least 100 trace points")
    running = np.asarray(trace.running)
    iters = np.asarray(trace.iters, dtype=np.float64)
    final_avg = float(running[-1])
    half = len(running) // 2
    tail_avg = running[half:]
    tail_it = iters[half:]
    if np.any(tail_avg <= 0.0):
        return DiagnosticResult(final_avg=final_avg, slope=0.0, slope_defined=False)
    slope = float(np.polyfit(np.log(tail_it), np.log(tail_avg), 1)[0])
    return DiagnosticResult(final_avg=final_avg, slope=slope, slope_defined=True)
