"""Block composite inference for Gaussian-process regression.

Estimation with a chain-rule composite likelihood (CI) and the block CML/CCL
baselines, prediction with the best linear unbiased block predictor
(BLUBP) and the composite-likelihood predictor, and the exact dense
likelihood/BLUP for reference.
"""
from .composite import (
    METHODS,
    ComponentTerm,
    ccl_components,
    ci_components,
    cml_components,
    composite_loglik,
    composite_objective,
    concentrated_objective,
    fit_composite,
    profile_estimates,
)
from .conditional import (
    BlockCache,
    build_cache,
    cond_cov_matrix,
    cond_cross_cov,
    cond_mean,
    optimal_weights,
    projection_oracle,
)
from .design import Partition, SlicedDesign, generate_slhd, partition_dataset, validate_slhd
from .gp import (
    Dataset,
    FitOptions,
    FittedModel,
    GpParams,
    PredictionResult,
    blup,
    blup_batch,
    fit_mle,
    full_loglik,
    sample_gp,
)
from .kernel import CONSTANT, BasisSpec, NumericalError, ValidationError, basis_matrix, corr_matrix, sq_exp_corr
from .predict import (
    LambdaSystem,
    blubp_weights,
    check_lambda_pd,
    lambda_system,
    predict_batch,
    predict_blubp,
    predict_cl,
)

__version__ = "0.1.0"
