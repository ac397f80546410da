"""Changepoint detection for spatially indexed functional time series."""

__version__ = "0.1.0"

from .changepoint import (
    ChangepointReport,
    NullDistribution,
    NullSettings,
    adjust_pvalues,
    change_magnitude,
    epidemic_statistic,
    ff_statistic,
    individual_reports,
    p_value,
    predicted_reports,
    score_statistic,
    simulate_null,
)
from .core import ChangeConfig, FunctionalDataset, RngSpec, SpatialDomain, validate_dataset
from .pipeline import PipelineConfig, SpatialPrediction, fit_spatial_prediction
