"""Linear causal effect estimation from unpaired two-sample instrumental-variable data."""

from .datagen import GeneratorSpec, GroundTruth, gen_beta, gen_categorical, gen_continuous, generate
from .estimators import (
    Estimate,
    EstimatorConfig,
    estimate,
    gmm_on_support,
    naive_ols,
    ts_2sls,
    ts_iv,
    up_gmm,
    up_gmm_hd,
)
from .identifiability import (
    dense_identifiable,
    population_q_b,
    restricted_nullspace_holds,
    sparsest_solution_set,
    tsiv_bias_predict,
    tsiv_plateau,
)
from .inference import SandwichVariance, WeightFactor, sandwich_variance, wald_ci
from .lasso import l1_quadratic_solve
from .moments import (
    InstrumentKind,
    MomentSystem,
    UnpairedDataset,
    cov_hat,
    cross_fold_denominator_analytic,
    cross_fold_denominator_mc,
    cross_moments,
    fold_cross_cov,
    moment_system,
    omega_hat,
)

__version__ = "0.1.0"
