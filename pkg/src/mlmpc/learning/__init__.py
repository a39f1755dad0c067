"""Data handling and in-house ANN/GP training for hybrid modeling."""

from .data import Dataset, EmptyDataset, ScalingError
from .ann import (
    AnnSpec,
    NonFiniteLoss,
    ann_expressions,
    ann_forward,
    ann_init,
    ann_train,
    load_ann,
    save_ann,
)
from .gp import (
    AllRestartsFailed,
    CholeskyFailure,
    GpModel,
    Kernel,
    Product,
    RationalQuadratic,
    SquaredExponential,
    Sum,
    gp_fit,
    gp_log_marginal_likelihood,
    gp_lml_gradient,
    gp_mean_expression,
    gp_predict,
    load_gp,
    save_gp,
)
from .hybrid import ShapeMismatch, UnresolvedFeature, hybridize

__all__ = [
    "Dataset",
    "EmptyDataset",
    "ScalingError",
    "AnnSpec",
    "NonFiniteLoss",
    "ann_init",
    "ann_forward",
    "ann_train",
    "ann_expressions",
    "save_ann",
    "load_ann",
    "Kernel",
    "SquaredExponential",
    "RationalQuadratic",
    "Sum",
    "Product",
    "GpModel",
    "CholeskyFailure",
    "AllRestartsFailed",
    "gp_log_marginal_likelihood",
    "gp_lml_gradient",
    "gp_fit",
    "gp_predict",
    "gp_mean_expression",
    "save_gp",
    "load_gp",
    "hybridize",
    "UnresolvedFeature",
    "ShapeMismatch",
]
