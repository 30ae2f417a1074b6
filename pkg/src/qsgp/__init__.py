"""Sparse variational Gaussian processes trained with O(1)-per-step stochastic estimators."""
from .artifact import ModelArtifact
from .chevron import VariationalState
from .control_variates import (
    ControlVariateState,
    LinearControlVariate,
    NystromControlVariate,
    cv_l_mu_correction,
    cv_l_sigma_correction,
    cv_linear_correction,
    cv_nystrom_correction,
    cv_quadratic_correction,
    cv_update_running,
    init_control_variate,
)
from .data import Dataset, Standardization, blobs_demo, load_csv, make_dataset, sinc_demo
from .elbo import exact_elbo, exact_elbo_bound, exact_posterior, log_marginal_likelihood
from .errors import DataError, InvalidState, NumericError, QSGPError, UnsupportedOperation
from .estimators import (
    BatchFeatures,
    IndexBatch,
    StochasticEstimate,
    estimate_elbo_lower_bound,
    estimate_hyper_grads,
    estimate_l_const,
    estimate_l_mu,
    estimate_l_sigma,
    sample_batch,
)
from .features import BasisExpansion, Hyperparameters, feature_block, features_at
from .optimizer import (
    TrainConfig,
    TrainData,
    closed_form_crr,
    init_state,
    init_training,
    rvm_prune,
    sgd_step,
    train,
)
from .predict import Metrics, PredictiveResult, class_probability, evaluate, predict, predict_augmented
from .sites import GAUSSIAN, LAPLACE, LOGISTIC, SiteProjection

__version__ = "0.1.0"
