"""Posterior approximation by minimizing the expected squared L2
distance between approximate and true log posteriors at shared sample
points, with full-rank Gaussian, transformed, and mixture families."""

from .core import (
    Evaluator,
    FiniteDiffRules,
    SampleBatch,
    SampleRecord,
    ScaledSpace,
    TargetDensity,
    evaluate,
    freeze_scaling,
)
from .engine import FitConfig, FitReport, fit, fit_multistart
from .gaussian import FullRankGaussian
from .mixture import MixtureComponent, MixturePosterior
from .objective import (
    ObjectiveWeights,
    el2o_value,
    fit_gradient_free,
    fit_log_pbar,
    outer_optimize,
    update_gradient_only,
    update_mu,
    update_sigma_hessian,
)
from .problems import catalog, catalog_truth, get_problem
from .transforms import BoundaryTransform, SinhSkewTransform, TransformChain

__version__ = "0.1.0"

__all__ = [
    "BoundaryTransform",
    "Evaluator",
    "FiniteDiffRules",
    "FitConfig",
    "FitReport",
    "FullRankGaussian",
    "MixtureComponent",
    "MixturePosterior",
    "ObjectiveWeights",
    "SampleBatch",
    "SampleRecord",
    "ScaledSpace",
    "SinhSkewTransform",
    "TargetDensity",
    "TransformChain",
    "catalog",
    "catalog_truth",
    "el2o_value",
    "evaluate",
    "fit",
    "fit_gradient_free",
    "fit_log_pbar",
    "fit_multistart",
    "freeze_scaling",
    "get_problem",
    "outer_optimize",
    "update_gradient_only",
    "update_mu",
    "update_sigma_hessian",
]
