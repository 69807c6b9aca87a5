"""Shared oracles and fixtures."""

from __future__ import annotations

import itertools
from math import factorial

import numpy as np
import pytest

from eslaudit.model import CoalitionPredictionTable


def permutation_shapley(n: int, v) -> np.ndarray:
    """Shapley value as the average marginal contribution over all orders."""
    vals = np.array([v(m) if m else 0.0 for m in range(1 << n)])
    orders = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    after = np.cumsum(1 << orders, axis=1)
    gains = vals[after] - vals[after - (1 << orders)]
    phi = np.zeros(n)
    np.add.at(phi, orders.ravel(), gains.ravel())
    return phi / factorial(n)


def random_values(n: int, rng) -> np.ndarray:
    """Random game table indexed by mask with v(empty) = 0."""
    vals = rng.normal(size=1 << n)
    vals[0] = 0.0
    return vals


def table_from_columns(universe, columns: dict[int, np.ndarray]) -> CoalitionPredictionTable:
    n = len(next(iter(columns.values())))
    table = CoalitionPredictionTable(tuple(universe), np.arange(n))
    for mask, col in columns.items():
        table.add(mask, np.asarray(col, dtype=np.int8))
    return table


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_audit_inputs(audit, directory, attributes=("gender",), levels=None):
    """Write a synthetic audit as prediction-table and labels CSVs for the import path."""
    from eslaudit.model import write_predictions

    levels = levels or [("a", "b")] * len(attributes)
    groups = np.asarray(audit.groups)
    if groups.ndim == 1:
        groups = groups[:, None]
    pred = directory / "predictions.csv"
    lab = directory / "labels.csv"
    write_predictions(audit.table, pred)
    with lab.open("w") as fh:
        fh.write(",".join(["row_id", "label", *attributes]) + "\n")
        for i, rid in enumerate(audit.table.instance_ids.tolist()):
            names = [levels[j][groups[i, j] - 1] for j in range(len(attributes))]
            fh.write(",".join([str(rid), str(int(audit.y_true[i])), *names]) + "\n")
    return pred, lab


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for text in sorted(ACCEPTANCE_LINES, key=lambda t: t[5:]):
            terminalreporter.write_line(text)
