"""Linear quantile hidden Markov models with latent drop-out class transitions."""

from .core import (
    DegenerateFitError,
    IdentifiabilityError,
    InvalidParameterError,
    LqhmmError,
    ModelSpec,
    MonotonicityError,
    NonConvergenceError,
    NumericalFailureError,
    PanelDataset,
    Posteriors,
    QldoParams,
    QuantileLevel,
    ald_log_density,
    check_loss,
    ldo_class_probs,
    linear_predictor,
)
from .em import EmConfig, FitResult, e_step, fit, initialize, n_free_params
from .likelihood import backward, forward, forward_backward, subject_loglik, total_loglik
from .simulate import SimScenario, default_scenario, generate, replicate_study

__version__ = "0.1.0"
