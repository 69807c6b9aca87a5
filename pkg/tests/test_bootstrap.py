import numpy as np
import pytest

from conftest import table_from_columns
from eslaudit.bootstrap import (
    BootstrapConfig,
    bootstrap_ci,
    nearest_rank,
    run_bootstrap,
    strata_labels,
    stratified_resample,
)
from eslaudit.errors import DomainError, StratumError, UndefinedMetricError, UnstableResultError
from eslaudit.inference import first_stage
from eslaudit.metrics import Characteristic


def test_stratum_sizes_preserved():
    strata = np.array([0, 0, 0, 1, 1, 1, 1, 1])
    idx = stratified_resample(strata, seed=3)
    assert np.sum(strata[idx] == 0) == 3 and np.sum(strata[idx] == 1) == 5
    np.testing.assert_array_equal(strata[idx], strata)


def test_resample_deterministic():
    strata = np.repeat([0, 1, 2], 10)
    np.testing.assert_array_equal(stratified_resample(strata, 9), stratified_resample(strata, 9))


def test_two_element_stratum_is_fair_coin():
    strata = np.zeros(2, dtype=int)
    draws = np.concatenate([stratified_resample(strata, s) for s in range(5000)])
    n = len(draws)
    assert abs(np.sum(draws == 0) - n / 2) <= 3 * np.sqrt(n / 4)


def test_empty_strata_rejected():
    with pytest.raises(StratumError):
        stratified_resample(np.array([], dtype=int), 0)


def test_strata_codes():
    np.testing.assert_array_equal(strata_labels(np.array([1, 1, 2, 2]), np.array([0, 1, 0, 1])), [0, 1, 2, 3])


def test_nearest_rank():
    v = np.arange(1, 101, dtype=float)
    assert nearest_rank(v, 0.025) == 3.0
    assert nearest_rank(v, 0.975) == 98.0
    assert nearest_rank(v, 0.0) == 1.0


def test_constant_statistic():
    r = bootstrap_ci(lambda idx: 2.5, np.zeros(20, dtype=int), BootstrapConfig(replications=50))
    assert r.ci == (2.5, 2.5) and r.mean == 2.5 and r.failures == 0


def test_config_domain():
    with pytest.raises(DomainError):
        BootstrapConfig(replications=1)


def test_replicate_seeds_independent_of_workers():
    strata = np.repeat([0, 1, 2, 3], 25)
    x = np.random.default_rng(0).normal(size=100)
    stat = lambda idx: float(x[idx].mean())
    a = run_bootstrap(stat, strata, BootstrapConfig(replications=200, master_seed=5, n_jobs=1))
    b = run_bootstrap(stat, strata, BootstrapConfig(replications=200, master_seed=5, n_jobs=4))
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values[7, 0] == stat(stratified_resample(strata, 5 + 7))


def test_failures_counted_and_unstable():
    strata = np.repeat([0, 1], 10)
    calls = iter(range(10**6))

    def flaky(idx):
        if next(calls) % 3 == 1:
            raise UndefinedMetricError("ppv")
        return 1.0

    run = run_bootstrap(flaky, strata, BootstrapConfig(replications=30))
    assert run.failures == 10 and run.unstable
    assert np.isnan(run.values[run.failed]).all()
    with pytest.raises(UnstableResultError):
        calls = iter(range(10**6))
        bootstrap_ci(flaky, strata, BootstrapConfig(replications=30))


def test_write_csv(tmp_path):
    run = run_bootstrap(lambda idx: [1.0, 2.0], np.zeros(5, dtype=int), BootstrapConfig(replications=4),
                        labels=("a", "b"))
    run.write_csv(tmp_path / "boot.csv")
    lines = (tmp_path / "boot.csv").read_text().splitlines()
    assert lines[0] == "replicate,seed,failed,a,b" and len(lines) == 5


def test_first_stage_coverage():
    """Percentile intervals of the first-stage gap cover the truth near 95% of the time."""
    rng = np.random.default_rng(77)
    true_gap = 2 * (0.8 - 0.7)
    n_pos, n_neg = 300, 100
    y = np.r_[np.ones(n_pos), np.zeros(n_neg), np.ones(n_pos), np.zeros(n_neg)].astype(np.int8)
    g = np.repeat([1, 2], n_pos + n_neg).astype(np.int8)
    strata = strata_labels(g, y)
    covered = 0
    trials = 200
    for trial in range(trials):
        p = np.where(g == 1, 0.8, 0.7)
        yhat = np.where(y == 1, rng.random(len(y)) < p, rng.random(len(y)) < 0.2).astype(np.int8)
        if trial == 0:
            char = Characteristic(table_from_columns(("x",), {1: yhat}), y, g, 0.5)
            direct = lambda idx: first_stage(char.resample(idx), "tpr", "shapley")[1].estimate
        stat = lambda idx: 2 * (yhat[idx][strata == 1].mean() - yhat[idx][strata == 3].mean())
        if trial == 0:
            idx = stratified_resample(strata, 0)
            assert stat(idx) == pytest.approx(direct(idx), abs=1e-12)
        r = bootstrap_ci(stat, strata, BootstrapConfig(replications=200, master_seed=trial * 1000))
        covered += r.ci[0] <= true_gap <= r.ci[1]
    assert abs(covered / trials - 0.95) <= 0.05
