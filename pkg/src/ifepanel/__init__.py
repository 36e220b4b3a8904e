"""Panel regression with interactive fixed effects.

Least-squares estimation of linear panels whose unobserved heterogeneity is
a low-rank loadings-times-factors structure of unknown rank, plus
bias-corrected inference, factor-number selection, perturbation-expansion
diagnostics, and a Monte Carlo harness.
"""

__version__ = "0.1.0"

from .errors import IfePanelError
from .estimator import (
    EstimatorConfig,
    FactorFit,
    IterationScheme,
    estimate,
    principal_components,
    profile_objective,
)
from .panel import (
    EffectiveSize,
    PanelDataset,
    ProjectionSpec,
    load_csv,
    project_additive_effects,
    write_csv,
)

__all__ = [
    "EstimatorConfig",
    "EffectiveSize",
    "FactorFit",
    "IfePanelError",
    "IterationScheme",
    "PanelDataset",
    "ProjectionSpec",
    "__version__",
    "estimate",
    "load_csv",
    "principal_components",
    "profile_objective",
    "project_additive_effects",
    "write_csv",
]
