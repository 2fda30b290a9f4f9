"""Adaptive optimal-fidelity multilevel Monte Carlo with a bubble-cloud surrogate."""
from .controller import CampaignConfig, CampaignReport, fit_decay, inflate_for_confidence, run_campaign
from .estimator import (
    LevelIndicators,
    allocate_for_budget,
    allocate_for_tolerance,
    estimate_indicators,
    estimator_error,
    mc_cost_estimate,
    of_mlmc_expectation,
    optimal_coefficients,
    reoptimize_with_floor,
    weighted_variances,
)
from .exceptions import (
    BudgetError,
    CampaignAbort,
    CloudGenerationError,
    ConfigError,
    EstimatorError,
    IndicatorError,
    OFMLMCError,
    StoreError,
)
from .levels import LevelHierarchy, warmup_allocation
from .models import BubbleCloudSurrogate, FaultyModel, SyntheticModel, build_model
from .scheduler import BatchPlan, execute_plan, valid_samples
from .store import CampaignStore, SampleLedger
from .streams import SampleKey, derive_stream, stream_key

__version__ = "0.1.0"
