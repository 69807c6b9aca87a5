"""Synthetic data with known structure for tests, demos and benchmarks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .coalitions import full_mask, members, nonempty_masks
from .dataset import CATEGORICAL, NUMERIC, Dataset, FeatureSpec
from .model import CoalitionPredictionTable

CENSUS_FEATURES = ("age", "educational-num", "hours-per-week", "marital-status")


def census_like(n: int = 3000, seed: int = 0, gender_effect: float = 0.0) -> Dataset:
    """Census-shaped dataset: four features, a binary gender and income label.

    Group 2 ("Female") works fewer hours and is less often married, which
    carries a gap in true positive rates into any model trained on these
    features.  ``gender_effect`` adds a direct effect on the label.
    """
    rng = np.random.default_rng(seed)
    female = rng.random(n) < 0.33
    age = np.clip(rng.normal(39, 12, n), 17, 90).round()
    educ = np.clip(rng.normal(10, 2.5, n), 1, 16).round()
    hours = np.clip(rng.normal(np.where(female, 36, 43), 10), 1, 99).round()
    p_married = np.where(female, 0.2, 0.6)
    u = rng.random(n)
    marital = np.where(u < p_married, "married", np.where(u < p_married + 0.3, "never-married", "other"))
    logit = (
        -7.0 + 0.04 * age + 0.3 * educ + 0.03 * hours
        + 1.6 * (marital == "married") - gender_effect * female
    )
    income = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int8)
    columns = {
        "age": age.astype(float),
        "educational-num": educ.astype(float),
        "hours-per-week": hours.astype(float),
        "marital-status": marital.astype(object),
    }
    specs = tuple(FeatureSpec(f, CATEGORICAL if f == "marital-status" else NUMERIC) for f in CENSUS_FEATURES)
    return Dataset(
        features=specs,
        columns=columns,
        label_column="income",
        labels=income,
        group_columns=("gender",),
        groups=np.where(female, 2, 1).astype(np.int8)[:, None],
        group_levels={"gender": ("Male", "Female")},
        row_ids=np.arange(n, dtype=np.int64),
    )


@dataclass(frozen=True, eq=False)
class SyntheticAudit:
    table: CoalitionPredictionTable
    y_true: np.ndarray
    groups: np.ndarray


def _balanced_labels(n: int, prevalence: float, n_attributes: int, rng) -> tuple[np.ndarray, np.ndarray]:
    groups = np.empty((n, n_attributes), dtype=np.int8)
    for j in range(n_attributes):
        groups[:, j] = rng.permutation(np.arange(n) % 2 + 1)
    y = np.zeros(n, dtype=np.int8)
    cell = np.zeros(n, dtype=np.int64)
    for j in range(n_attributes):
        cell = cell * 2 + (groups[:, j] - 1)
    for c in np.unique(cell):
        rows = rng.permutation(np.flatnonzero(cell == c))
        y[rows[: int(round(prevalence * len(rows)))]] = 1
    return y, groups


def planted_tpr_table(n: int = 5000, n_features: int = 2, tpr_offset: float = 0.1, seed: int = 0,
                      prevalence: float = 0.5, strengths: Sequence[float] | None = None) -> SyntheticAudit:
    """Prediction table whose group-2 TPR is ``tpr_offset`` below group 1's.

    Every instance carries one uniform score shared by all coalitions, so
    coalition predictions are nested and strongly correlated, as for models
    that share most of their signal.  For positives the coalition threshold
    grows with the summed strength of its features, from 0.5 to 0.8 on the
    full set (minus the offset for group 2).  Negatives get group-neutral
    false-positive thresholds.
    """
    rng = np.random.default_rng(seed)
    y, groups = _balanced_labels(n, prevalence, 1, rng)
    g = groups[:, 0]
    strengths = np.asarray(strengths if strengths is not None else np.linspace(1.0, 0.6, n_features), dtype=float)
    if strengths.shape != (n_features,):
        raise ValueError("one strength per feature is required")
    u = rng.random(n)
    universe = tuple(f"x{i + 1}" for i in range(n_features))
    table = CoalitionPredictionTable(universe, np.arange(n))
    for mask in nonempty_masks(n_features):
        share = strengths[members(mask)].sum() / strengths.sum()
        tp_threshold = 0.5 + 0.3 * share - np.where(g == 2, tpr_offset, 0.0)
        fp_threshold = 0.3 - 0.15 * share
        threshold = np.where(y == 1, tp_threshold, fp_threshold)
        table.add(mask, (u < threshold).astype(np.int8))
    return SyntheticAudit(table, y, groups)


def random_prediction_table(n_features: int, n: int = 400, seed: int = 0) -> SyntheticAudit:
    """Independent random predictions for every coalition (for counting work)."""
    rng = np.random.default_rng(seed)
    y, groups = _balanced_labels(n, 0.5, 1, rng)
    table = CoalitionPredictionTable(tuple(f"f{i + 1}" for i in range(n_features)), np.arange(n))
    for mask in nonempty_masks(n_features):
        table.add(mask, (rng.random(n) < 0.6).astype(np.int8))
    return SyntheticAudit(table, y, groups)


def exact_rate_predictions(y: np.ndarray, cell: np.ndarray, tpr: dict, fpr: float, rng) -> np.ndarray:
    """Predictions hitting a target TPR exactly within each cell.

    ``tpr`` maps a cell code to the fraction of its positives predicted 1;
    the count is rounded, so choose cell sizes that make it exact.
    """
    yhat = np.zeros(len(y), dtype=np.int8)
    for c in np.unique(cell):
        pos = rng.permutation(np.flatnonzero((cell == c) & (y == 1)))
        neg = rng.permutation(np.flatnonzero((cell == c) & (y == 0)))
        yhat[pos[: int(round(tpr[c] * len(pos)))]] = 1
        yhat[neg[: int(round(fpr * len(neg)))]] = 1
    return yhat


def equalized_table(n_per_group: Sequence[int] = (1200, 600), n_features: int = 2, tpr: float = 0.75,
                    seed: int = 0) -> SyntheticAudit:
    """Predictions with exactly equal group TPRs on every coalition.

    Each group has half positives; with the default sizes the positive
    counts (600, 300) make ``tpr`` exact for coalition-specific rates of
    the form ``tpr - 0.05 * (N - |S|)``.
    """
    rng = np.random.default_rng(seed)
    n = int(sum(n_per_group))
    g = np.repeat([1, 2], n_per_group).astype(np.int8)
    y = np.zeros(n, dtype=np.int8)
    for level, size in zip((1, 2), n_per_group):
        rows = np.flatnonzero(g == level)
        y[rng.permutation(rows)[: size // 2]] = 1
    universe = tuple(f"x{i + 1}" for i in range(n_features))
    table = CoalitionPredictionTable(universe, np.arange(n))
    for mask in nonempty_masks(n_features):
        rate = tpr - 0.05 * (n_features - bin(mask).count("1"))
        table.add(mask, exact_rate_predictions(y, g, {1: rate, 2: rate}, 0.2, rng))
    return SyntheticAudit(table, y, g[:, None])


def intersectional_table(cell_tpr: dict[tuple[int, int], float], positives_per_cell: int = 400,
                         negatives_per_cell: int = 400, n_features: int = 2, seed: int = 0) -> SyntheticAudit:
    """Two binary attributes with an exact TPR in each (level_1, level_2) cell.

    All coalitions share the full-model predictions, so the feature game is
    flat; the point of this table is the intersectional structure.
    """
    rng = np.random.default_rng(seed)
    cells = [(a, b) for a in (1, 2) for b in (1, 2)]
    per = positives_per_cell + negatives_per_cell
    groups = np.array([c for c in cells for _ in range(per)], dtype=np.int8)
    y = np.tile(np.r_[np.ones(positives_per_cell), np.zeros(negatives_per_cell)], 4).astype(np.int8)
    code = (groups[:, 0] - 1) * 2 + (groups[:, 1] - 1)
    rates = {(a - 1) * 2 + (b - 1): cell_tpr[(a, b)] for a, b in cells}
    yhat = exact_rate_predictions(y, code, rates, 0.2, rng)
    universe = tuple(f"x{i + 1}" for i in range(n_features))
    table = CoalitionPredictionTable(universe, np.arange(len(y)))
    for mask in nonempty_masks(n_features):
        table.add(mask, yhat)
    return SyntheticAudit(table, y, groups)


def permuted_group_table(n_per_group: int = 500, n_features: int = 3, seed: int = 0) -> SyntheticAudit:
    """Group 2 is an exact copy of group 1 (labels and every prediction)."""
    rng = np.random.default_rng(seed)
    y1 = (rng.random(n_per_group) < 0.5).astype(np.int8)
    y = np.r_[y1, y1]
    g = np.repeat([1, 2], n_per_group).astype(np.int8)
    universe = tuple(f"x{i + 1}" for i in range(n_features))
    table = CoalitionPredictionTable(universe, np.arange(2 * n_per_group))
    for mask in range(1, full_mask(n_features) + 1):
        half = (rng.random(n_per_group) < 0.5 + 0.1 * y1).astype(np.int8)
        table.add(mask, np.r_[half, half])
    return SyntheticAudit(table, y, g[:, None])
