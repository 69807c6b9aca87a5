"""Group-fairness audits with ESL game values and their feature decomposition."""

from .esl import (
    ALL_FAMILIES,
    Allocation,
    EslFamily,
    FeatureContributionMatrix,
    Game,
    esl_coefficients,
    esl_value,
    gap_attribution,
    group_values,
    multi_stage,
    two_stage,
)
from .metrics import Baseline, Characteristic, ConfusionCounts, MetricKind, confusion, metric_value
from .model import CoalitionPredictionTable

__version__ = "0.1.0"
