"""MAML and sharpness-aware MAML on small differentiable models.

A numpy library for bilevel meta-optimization experiments at desk scale,
with exact second-order meta-gradients and built-in verification
instruments: closed-form oracles, loss-landscape sections, a sharpness
measure, a stationary-point preservation checker, a PAC-Bayes bound
calculator and convergence-rate diagnostics.
"""

from .models import (
    ACTIVATIONS,
    ConfigError,
    Dataset,
    DivergenceError,
    ModelSpec,
    fd_grad,
    grad,
    hvp,
    init_params,
    loss,
    loss_and_grad,
    per_sample_loss,
)
from .tasks import Task, TaskFamily, sample_task, sample_task_batch, substream
from .meta import (
    ConvergenceTrace,
    InnerConfig,
    MetaConfig,
    TraceRow,
    TrainState,
    erm_step,
    inner_adapt,
    maml_meta_step,
    meta_gradient,
)
from .sharp import (
    PerturbPair,
    SharpConfig,
    anil_project,
    lower_perturbation,
    sds_select,
    sharp_meta_step,
    swp_mask,
    upper_perturbation,
)
from .landscape import (
    Directions,
    LandscapeGrid,
    generalization_gap,
    loss_grid,
    random_directions,
    sharpness,
    sharpness_schedule,
)
from .theory import (
    BoundInputs,
    bound_alpha_sweep,
    convergence_diagnostic,
    gd_uniform_stability,
    lemma1_check,
    pac_bound,
)

__version__ = "0.1.0"
