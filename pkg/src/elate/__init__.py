"""Extrapolation and smoothing of tempered expectations from SMC output.

The pipeline: define a target model (`elate.models`), run the waste-free
tempered SMC sampler (`elate.smc`), turn the per-temperature output into
regression data with variances (`elate.estimators`), fit the
derivative-augmented GP over inverse temperature (`elate.gp`), and read off
posterior expectations at t=1 or integrate for the log marginal likelihood
(`elate.quadrature`).  `elate.experiment` orchestrates seeded comparisons.
"""

from .errors import (
    ConditioningError,
    DataError,
    DegeneracyError,
    ElateError,
    FitFailureError,
    NumericalError,
    ParameterError,
    PoleError,
    RunawayLadderError,
)
from .estimators import (
    ExpectationDatum,
    RegressionDataset,
    build_dataset,
    it_bootstrap_variance,
    it_estimate,
    it_gradient_datum,
    load_dataset,
    save_dataset,
    smc_function_datum,
    smc_gradient_datum,
)
from .gp import (
    FitConfig,
    GpModel,
    KernelParams,
    RationalMean,
    elate_estimate,
    fit,
    posterior_predict,
)
from .models import (
    OracleSpec,
    TargetModel,
    build_model,
    gaussian_location_model,
    gaussian_mixture_model,
    log_tempered_unnormalized,
    logistic_model,
    mrna_model,
)
from .quadrature import (
    QuadratureResult,
    bq_integrate,
    simpson_nonuniform,
    ti_baselines,
    ti_elate,
    ti_elate_v2,
    trapezoid,
)
from .smc import (
    SmcConfig,
    SmcRun,
    TemperatureRecord,
    load_run,
    run_waste_free_smc,
    save_run,
)

__version__ = "0.1.0"
