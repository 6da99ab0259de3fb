"""Inference for counterfactual functionals of the treated under a multiplicative
instrumental-variable model: identification, cross-fitted influence-function
estimation, and grid test inversion."""

__version__ = "0.1.0"

from ._backend import BACKEND
from .dataset import Dataset, FoldPlan, Observation, Schema, load_csv, make_folds
from .eif import (
    CrossfitResult,
    DiscreteLaw,
    FoldEstimate,
    crossfit_estimate,
    crossfit_grid,
    eif_evaluate,
    estimate_h_fold,
    h_of_beta_exact,
    remainder_exact,
    robustness_suite,
    variance_fold,
)
from .errors import MivError, WeakInstrumentWarning
from .inference import (
    ConfidenceSet,
    GridSpec,
    Interval,
    att_estimate,
    att_exact,
    ci_h,
    invert_functional,
    invert_functional_multi,
    point_estimate,
    qtt_direct_moment,
)
from .learners import LearnerSpec
from .moments import MomentSpec, evaluate_m
from .nuisance import ClipConfig, NuisanceBundle, eval_bundle, fit_nuisances
from .sim import (
    CoverageConfig,
    CoverageReport,
    DgpSpec,
    DiscreteOracle,
    coverage_experiment,
    exact_law,
    generate,
    oracle_truth,
)
