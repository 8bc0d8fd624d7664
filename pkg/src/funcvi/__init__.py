"""Function-space variational inference with convolutional GP priors.

The main entry points are re-exported here; submodules hold the rest.
"""
from .block_cov import GaussianBatch, StructuredCov, gaussian_kl, inverse_and_logdet
from .cnngp_kernel import ArchSpec, equivalent_kernel, prior_structured_cov, resolution_schedule_arch
from .errors import DomainError, FuncVIError, NonFinite, NonPositiveDefinite, ShapeMismatch
from .fvi import FviModel, TrainConfig, predict, train
from .likelihoods import LikelihoodFamily, PredictiveMoments
from .varfam import VarFamily

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "DomainError", "FuncVIError", "FviModel", "GaussianBatch", "LikelihoodFamily",
    "NonFinite", "NonPositiveDefinite", "PredictiveMoments", "ShapeMismatch", "StructuredCov",
    "TrainConfig", "VarFamily", "equivalent_kernel", "gaussian_kl", "inverse_and_logdet",
    "predict", "prior_structured_cov", "resolution_schedule_arch", "train",
]
