"""Design-based inference for two-stage samples.

Horvitz-Thompson estimation of a total, its exact variance decomposition,
variance estimators (HT, Yates-Grundy, Hajek and their first-stage-only
simplifications), conditional Poisson and Sampford designs, coupled draws of
two first-stage designs and a deterministic Monte Carlo engine.
"""

from .designs import (
    DesignError,
    DesignSpec,
    EnumeratedDesign,
    InclusionTable,
    calibrate_rejective,
    draw,
    enumerate_design,
    exact_inclusion,
    poisson,
    pps_probabilities,
    rejective,
    sampford,
    srswor,
)
from .population import Population, SimPopConfig, build_population, generate_sim_population
from .twostage import (
    TwoStageDesign,
    TwoStageSample,
    VarianceDecomposition,
    draw_two_stage,
    exact_variance,
    ht_estimate,
    srswor_second_stage,
)

__version__ = "0.1.0"

__all__ = [
    "DesignError",
    "DesignSpec",
    "EnumeratedDesign",
    "InclusionTable",
    "Population",
    "SimPopConfig",
    "TwoStageDesign",
    "TwoStageSample",
    "VarianceDecomposition",
    "build_population",
    "calibrate_rejective",
    "draw",
    "draw_two_stage",
    "enumerate_design",
    "exact_inclusion",
    "exact_variance",
    "generate_sim_population",
    "ht_estimate",
    "poisson",
    "pps_probabilities",
    "rejective",
    "sampford",
    "srswor",
    "srswor_second_stage",
]
