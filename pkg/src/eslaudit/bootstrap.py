"""Stratified nonparametric bootstrap with replicate-level seeding.

Replicate ``b`` draws its indices from ``default_rng(master_seed + b)``, so
results do not depend on how replicates are spread over workers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import AuditError, DomainError, StratumError, UndefinedMetricError, UnstableResultError


@dataclass(frozen=True)
class BootstrapConfig:
    replications: int = 1000
    alpha: float = 0.05
    master_seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.replications < 2:
            raise DomainError("bootstrap needs at least two replications")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")


def strata_labels(groups: np.ndarray, y_true: np.ndarray) -> np.ndarray:
    """Stratum code per row from (group, label)."""
    return (np.asarray(groups, dtype=np.int64) - 1) * 2 + np.asarray(y_true, dtype=np.int64)


def stratified_resample(strata: np.ndarray, seed: int) -> np.ndarray:
    """Index vector resampled with replacement within each stratum.

    Position ``i`` receives a random row from the stratum of row ``i``, so
    per-stratum counts are preserved exactly.

    Raises:
        StratumError: No rows to resample.
    """
    strata = np.asarray(strata)
    if strata.ndim != 1 or len(strata) == 0:
        raise StratumError("strata must be a non-empty vector")
    rng = np.random.default_rng(seed)
    out = np.empty(len(strata), dtype=np.int64)
    for s in np.unique(strata):
        members = np.flatnonzero(strata == s)
        out[members] = members[rng.integers(0, len(members), size=len(members))]
    return out


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the value at rank ``ceil(q n)`` (1-based)."""
    n = len(sorted_values)
    rank = min(max(int(math.ceil(q * n - 1e-12)), 1), n)
    return float(sorted_values[rank - 1])


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    replicates: np.ndarray
    mean: float
    ci: tuple[float, float]
    failures: int
    alpha: float
    unstable: bool = False
    label: str = ""

    def to_dict(self) -> dict:
        return {"label": self.label, "mean": self.mean, "ci": list(self.ci), "failures": self.failures,
                "replications": int(len(self.replicates)), "alpha": self.alpha, "unstable": self.unstable}


@dataclass(frozen=True, eq=False)
class BootstrapRun:
    """Raw replicate matrix ``(B, k)``; failed replicates are NaN rows."""

    values: np.ndarray
    failed: np.ndarray
    config: BootstrapConfig
    labels: tuple[str, ...] = ()

    @property
    def failures(self) -> int:
        return int(self.failed.sum())

    @property
    def unstable(self) -> bool:
        return self.failures * 10 > self.config.replications

    def result(self, j: int = 0) -> BootstrapResult:
        col = self.values[~self.failed, j]
        if len(col) == 0:
            raise UnstableResultError("every bootstrap replicate failed", self.failures)
        srt = np.sort(col)
        a = self.config.alpha
        label = self.labels[j] if j < len(self.labels) else ""
        return BootstrapResult(
            replicates=self.values[:, j].copy(),
            mean=float(col.mean()),
            ci=(nearest_rank(srt, a / 2.0), nearest_rank(srt, 1.0 - a / 2.0)),
            failures=self.failures,
            alpha=a,
            unstable=self.unstable,
            label=label,
        )

    def results(self) -> list[BootstrapResult]:
        return [self.result(j) for j in range(self.values.shape[1])]

    def write_csv(self, path: str | Path) -> None:
        """One row per replicate with its seed and every statistic."""
        labels = list(self.labels) or [f"stat{j}" for j in range(self.values.shape[1])]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["replicate", "seed", "failed", *labels])
            for b in range(self.values.shape[0]):
                row = ["" if self.failed[b] else f"{x:.12g}" for x in self.values[b]]
                writer.writerow([b, self.config.master_seed + b, int(self.failed[b]), *row])


def run_bootstrap(statistic: Callable[[np.ndarray], float | Sequence[float]], strata: np.ndarray,
                  config: BootstrapConfig, labels: Sequence[str] = ()) -> BootstrapRun:
    """Evaluate ``statistic`` on ``B`` stratified resamples.

    ``statistic`` receives the resampled row indices and returns one value
    or a vector.  Replicates raising :class:`UndefinedMetricError` are
    recorded as failures.
    """
    strata = np.asarray(strata)
    probe = np.atleast_1d(np.asarray(statistic(np.arange(len(strata))), dtype=float))
    k = probe.shape[0]

    def one(b: int):
        idx = stratified_resample(strata, config.master_seed + b)
        try:
            return np.atleast_1d(np.asarray(statistic(idx), dtype=float)), False
        except UndefinedMetricError:
            return np.full(k, np.nan), True

    if config.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
            outcomes = list(pool.map(one, range(config.replications)))
    else:
        outcomes = [one(b) for b in range(config.replications)]
    values = np.vstack([o[0] for o in outcomes])
    failed = np.array([o[1] for o in outcomes], dtype=bool)
    if values.shape[1] != k:
        raise AuditError("statistic changed its output length between replicates")
    return BootstrapRun(values=values, failed=failed, config=config, labels=tuple(labels))


def bootstrap_ci(statistic: Callable[[np.ndarray], float], strata: np.ndarray,
                 config: BootstrapConfig, label: str = "") -> BootstrapResult:
    """Percentile interval of a scalar statistic.

    Raises:
        UnstableResultError: More than ``B/10`` replicates failed.
    """
    run = run_bootstrap(statistic, strata, config, (label,))
    if run.unstable:
        raise UnstableResultError(f"{run.failures} of {config.replications} bootstrap replicates failed",
                                  run.failures)
    return run.result(0)
