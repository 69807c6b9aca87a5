"""Asymptotic tests for group-value gaps and feature-contribution gaps.

Second-stage variances come from per-instance influence values of each
rate estimator.  For a rate ``r = sum(a_i) / sum(d_i)`` over a population
the influence of instance ``i`` is ``(a_i - r d_i) / sum(d)``, centred
within each (group, label) stratum because stratum sizes are held fixed,
as in the stratified bootstrap.  The plug-in covariance of two rates is the
inner product of their influence vectors.  For TPR this is
``n+ [P(I_S I_T) - p_S p_T] / n+^2``, rates on disjoint groups have zero
covariance, and the pooled rate's covariances follow from
``TP_A = TP_1 + TP_2``.  Every contribution estimate is linear in the rates,
so its variance is a quadratic form in these covariances.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Mapping, Sequence

import numpy as np

from .esl import (
    ALL_FAMILIES,
    Allocation,
    EslFamily,
    FeatureContributionMatrix,
    coalition_weights,
    esl_coefficients,
    evaluated_masks,
    gap_attribution,
    group_values,
)
from .errors import (
    DegenerateVarianceError,
    DomainError,
    IncompleteCriterionError,
    IncompleteVoteError,
    NumericalConsistencyError,
    UndefinedMetricError,
    UndefinedTestError,
)
from .metrics import Baseline, Characteristic, MetricKind, metrics_for_criterion

NEGATIVE_VARIANCE_TOL = 1e-9
POPULATIONS = (1, 2, 3)
_STD_NORMAL = NormalDist()


def normal_quantile(p: float) -> float:
    return _STD_NORMAL.inv_cdf(p)


def two_sided_p(z: float) -> float:
    """``2 (1 - Phi(|z|))`` via the complementary error function."""
    return math.erfc(abs(z) / math.sqrt(2.0))


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass(frozen=True)
class TestResult:
    """Estimate with standard error, z, two-sided p-value and symmetric CI."""

    __test__ = False  # keep pytest from collecting this class

    label: str
    estimate: float
    standard_error: float
    z: float
    p_value: float
    ci: tuple[float, float]
    alpha: float
    extras: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_estimate(cls, label: str, estimate: float, se: float, alpha: float, **extras) -> "TestResult":
        if not 0.0 < alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
        if not se >= 0.0:
            raise NumericalConsistencyError(f"{label}: invalid standard error {se}")
        q = normal_quantile(1.0 - alpha / 2.0)
        if se > 0.0:
            z = estimate / se
        else:
            z = 0.0 if estimate == 0.0 else math.copysign(math.inf, estimate)
        return cls(label, float(estimate), float(se), float(z), two_sided_p(z),
                   (float(estimate - q * se), float(estimate + q * se)), alpha, dict(extras))

    @classmethod
    def from_ci(cls, label: str, estimate: float, lo: float, hi: float, alpha: float = 0.05) -> "TestResult":
        """Recover a result from a published estimate and symmetric interval."""
        q = normal_quantile(1.0 - alpha / 2.0)
        se = (hi - lo) / (2.0 * q)
        out = cls.from_estimate(label, estimate, se, alpha)
        return cls(out.label, out.estimate, out.standard_error, out.z, out.p_value, (float(lo), float(hi)), alpha)

    def rejects(self, alpha: float | None = None) -> bool:
        a = self.alpha if alpha is None else alpha
        if a == self.alpha:
            return not (self.ci[0] <= 0.0 <= self.ci[1])
        return self.p_value < a

    @property
    def stars(self) -> str:
        return significance_stars(self.p_value)

    def to_dict(self) -> dict:
        out = {
            "label": self.label,
            "status": "ok",
            "estimate": self.estimate,
            "standard_error": self.standard_error,
            "z": self.z,
            "p_value": self.p_value,
            "ci": list(self.ci),
            "alpha": self.alpha,
            "reject": self.rejects(),
            "stars": self.stars,
        }
        out.update(self.extras)
        return out


def first_stage_test(group_values: Allocation | float, counts: Sequence[int], pooled: float, b1: float,
                     alpha: float = 0.05, baseline: float = 0.5,
                     group_rates: Sequence[float] | None = None, label: str = "first_stage") -> TestResult:
    """Z test of equal group values.

    The null standard error is ``(b1 / baseline) sqrt(p (1 - p) (1/n_1 + 1/n_2))``
    with the pooled rate ``p``; at baseline 1/2 the factor is ``2 b1``.  The
    interval is built from the same standard error.  When group rates are
    supplied, the unpooled interval is attached under ``ci_unpooled``.

    Args:
        group_values: Two-group allocation, or the gap ``phi_1 - phi_2``.
        counts: Metric denominators for the two groups.
        pooled: Metric on the union of both groups.
        b1: First coefficient of the family for two players.
    """
    n1, n2 = (int(c) for c in counts)
    if n1 <= 0 or n2 <= 0:
        raise UndefinedTestError(f"{label}: group denominators must be positive, got {n1}, {n2}")
    if not 0.0 < pooled < 1.0:
        raise DegenerateVarianceError(f"{label}: pooled rate {pooled} leaves no variance under the null")
    d = group_values.gap if isinstance(group_values, Allocation) else float(group_values)
    scale = b1 / baseline
    se = abs(scale) * math.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    extras = {"pooled_rate": pooled, "n": [n1, n2], "b1": b1}
    if group_rates is not None:
        p1, p2 = group_rates
        se_u = abs(scale) * math.sqrt(p1 * (1.0 - p1) / n1 + p2 * (1.0 - p2) / n2)
        q = normal_quantile(1.0 - alpha / 2.0)
        extras.update({"group_rates": [p1, p2], "se_unpooled": se_u,
                       "ci_unpooled": [d - q * se_u, d + q * se_u]})
    return TestResult.from_estimate(label, d, se, alpha, **extras)


def first_stage(char: Characteristic, kind: MetricKind | str, family: EslFamily | str,
                alpha: float = 0.05) -> tuple[Allocation, TestResult]:
    """Group allocation and its first-stage test on the full feature set."""
    kind = MetricKind.parse(kind)
    family = EslFamily.parse(family)
    full = char.table.full
    alloc = group_values(char, kind, family, full)
    c1, c2 = (char.counts(m, full) for m in (1, 2))
    counts = (c1.denominator(kind), c2.denominator(kind))
    pooled = char.rate(kind, 3, full)
    rates = (char.rate(kind, 1, full), char.rate(kind, 2, full))
    b1 = esl_coefficients(family, 2)[1]
    test = first_stage_test(alloc, counts, pooled, b1, alpha, char.baseline.value, rates,
                            label=f"{kind.value}:{family.value}:groups")
    return alloc, test


def _numerator_denominator(kind: MetricKind, y: np.ndarray, yhat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = y.astype(float)
    p = yhat.astype(float)
    if kind is MetricKind.SR:
        return p, np.ones_like(p)
    if kind is MetricKind.TPR:
        return y * p, y
    if kind is MetricKind.FPR:
        return (1.0 - y) * p, 1.0 - y
    if kind is MetricKind.PPV:
        return y * p, p
    return y * (1.0 - p), 1.0 - p


def _strata(keys: np.ndarray) -> list[np.ndarray]:
    """Row indices of each distinct row of ``keys``."""
    _, codes = np.unique(keys, axis=0, return_inverse=True)
    codes = codes.ravel()
    return [np.flatnonzero(codes == h) for h in range(codes.max() + 1)]


def rate_influence(kind: MetricKind | str, y: np.ndarray, yhat: np.ndarray, rows: np.ndarray):
    """Rate on ``rows`` and its per-instance influence vector (zero off ``rows``).

    Returns:
        ``(rate, influence, denominator)``.

    Raises:
        UndefinedMetricError: Zero denominator on ``rows``.
    """
    kind = MetricKind.parse(kind)
    a, d = _numerator_denominator(kind, y, yhat)
    den = float(d[rows].sum())
    if den == 0.0:
        raise UndefinedMetricError(kind)
    r = float(a[rows].sum()) / den
    psi = np.where(rows, (a - r * d) / den, 0.0)
    return r, psi, den


class CovarianceEstimates:
    """Plug-in covariances of metric rates across populations and coalitions.

    Populations are group coalitions: 1 (group 1), 2 (group 2), 3 (both).
    Entries whose denominator is zero are recorded in ``undefined``.
    """

    def __init__(self, kind: MetricKind, table, y_true: np.ndarray, groups: np.ndarray,
                 baseline: Baseline, coalitions: Sequence[int]):
        self.kind = kind
        self.table = table
        self.y_true = np.asarray(y_true)
        self.groups = np.asarray(groups)
        self.baseline = baseline
        self.coalitions = tuple(coalitions)
        self.extrapolated = not kind.fixed_denominator
        self.index: dict[tuple[int, int], int] = {}
        self.rates: dict[tuple[int, int], float] = {}
        self.denominators: dict[tuple[int, int], float] = {}
        self.undefined: set[tuple[int, int]] = set()
        n = len(self.y_true)
        self._strata = _strata(np.column_stack([self.groups, self.y_true]))
        self.psi = np.zeros((n, len(POPULATIONS) * len(self.coalitions)))
        for j, (pop, mask) in enumerate(itertools.product(POPULATIONS, self.coalitions)):
            self.index[(pop, mask)] = j
            try:
                r, col, den = rate_influence(kind, self.y_true, table.column(mask), self.population_rows(pop))
            except UndefinedMetricError:
                self.undefined.add((pop, mask))
                self.rates[(pop, mask)] = math.nan
                self.denominators[(pop, mask)] = 0.0
                continue
            self.rates[(pop, mask)] = r
            self.denominators[(pop, mask)] = den
            for rows in self._strata:
                col[rows] -= col[rows].mean()
            self.psi[:, j] = col

    def population_rows(self, pop: int) -> np.ndarray:
        if pop == 3:
            return np.ones(len(self.y_true), dtype=bool)
        return self.groups == pop

    def _col(self, pop: int, mask: int) -> int:
        key = (pop, mask)
        if key in self.undefined:
            raise UndefinedMetricError(self.kind, (pop, self.table.label(mask)))
        try:
            return self.index[key]
        except KeyError:
            raise DomainError(f"no covariance entry for population {pop}, coalition {self.table.label(mask)}") from None

    def cov(self, pop_a: int, mask_a: int, pop_b: int, mask_b: int) -> float:
        return float(self.psi[:, self._col(pop_a, mask_a)] @ self.psi[:, self._col(pop_b, mask_b)])

    def var(self, pop: int, mask: int) -> float:
        return self.cov(pop, mask, pop, mask)

    def correlation(self, pop_a: int, mask_a: int, pop_b: int, mask_b: int) -> float:
        den = math.sqrt(self.var(pop_a, mask_a) * self.var(pop_b, mask_b))
        return self.cov(pop_a, mask_a, pop_b, mask_b) / den if den > 0 else 0.0

    def joint_probability(self, group: int, mask_a: int, mask_b: int) -> float:
        """Empirical ``P(I_S = 1, I_T = 1)`` over the group's denominator rows."""
        a_s, d = _numerator_denominator(self.kind, self.y_true, self.table.column(mask_a))
        a_t, _ = _numerator_denominator(self.kind, self.y_true, self.table.column(mask_b))
        rows = self.population_rows(group) & (d > 0)
        if not rows.any():
            raise UndefinedMetricError(self.kind, (group, self.table.label(mask_a)))
        return float(np.mean(a_s[rows] * a_t[rows]))

    def count_covariance(self, group: int, mask_a: int, mask_b: int) -> float:
        """``n [P(I_S I_T) - p_S p_T]``: covariance of the two numerator counts."""
        if self.extrapolated:
            raise DomainError("count covariance is defined for fixed-denominator metrics only")
        n = self.denominators[(group, mask_a)]
        p_s = self.rates[(group, mask_a)]
        p_t = self.rates[(group, mask_b)]
        return n * (self.joint_probability(group, mask_a, mask_b) - p_s * p_t)

    def matrix(self) -> np.ndarray:
        """Full covariance matrix over ``index`` order."""
        return self.psi.T @ self.psi

    def rate_vector(self) -> np.ndarray:
        out = np.full(self.psi.shape[1], math.nan)
        for key, j in self.index.items():
            out[j] = self.rates[key]
        return out

    def vector(self, weights: Mapping[tuple[int, int], float]) -> np.ndarray:
        u = np.zeros(self.psi.shape[1])
        for key, c in weights.items():
            if c != 0.0:
                u[self._col(*key)] += c
        return u

    def quadratic(self, u: np.ndarray, w: np.ndarray) -> float:
        """``u' Sigma w`` evaluated without forming ``Sigma``."""
        return float((self.psi @ u) @ (self.psi @ w))


def estimate_second_stage_covariances(table, y_true: np.ndarray, group_labels: np.ndarray,
                                      kind: MetricKind | str, baseline: Baseline | float,
                                      coalitions: Sequence[int] | None = None) -> CovarianceEstimates:
    """Plug-in covariance estimates for every (population, coalition) rate.

    Args:
        coalitions: Restrict to these coalitions; defaults to all stored ones.
    """
    kind = MetricKind.parse(kind)
    groups = np.asarray(group_labels)
    if groups.ndim == 2:
        groups = groups[:, 0]
    base = baseline if isinstance(baseline, Baseline) else Baseline.fixed(baseline)
    masks = table.masks() if coalitions is None else sorted(set(coalitions))
    return CovarianceEstimates(kind, table, y_true, groups, base, masks)


def contribution_weights(family: EslFamily, n_features: int, feature: int, group: int,
                         baseline: float) -> dict[tuple[int, int], float]:
    """Coefficients of each rate ``r(pop, S)`` in the contribution ``C^k_g``."""
    wn = coalition_weights(family, n_features)
    w2 = coalition_weights(family, 2)
    out: dict[tuple[int, int], float] = {}
    for mask in evaluated_masks(family, n_features):
        cf = wn.coefficient(feature, mask)
        if cf == 0.0:
            continue
        for pop in POPULATIONS:
            cg = w2.coefficient(group, pop)
            if cg != 0.0:
                out[(pop, mask)] = out.get((pop, mask), 0.0) + cf * cg / baseline
    return out


def second_stage_test(matrix: FeatureContributionMatrix, cov: CovarianceEstimates,
                      family: EslFamily | str | None = None, alpha: float = 0.05) -> list[TestResult | UndefinedMetricError]:
    """One Z test per feature of equal contributions to the two groups.

    Entries are :class:`TestResult` or, for features touching an undefined
    rate, the :class:`UndefinedMetricError` that voided them.

    Raises:
        NumericalConsistencyError: Assembled variance below ``-1e-9`` or the
            contribution estimate disagrees with the rates in ``cov``.
    """
    family = matrix.family if family is None else EslFamily.parse(family)
    if family != matrix.family:
        raise DomainError(f"matrix was computed with {matrix.family.value}, not {family.value}")
    kind = cov.kind
    if matrix.kind is not None and matrix.kind != kind:
        raise DomainError("covariance estimates and matrix use different metrics")
    beta = cov.baseline.value
    gaps = gap_attribution(matrix)
    n = len(matrix.features)
    out: list[TestResult | UndefinedMetricError] = []
    rates = cov.rate_vector()
    for k, feature in enumerate(matrix.features):
        label = f"{kind.value}:{family.value}:{feature}"
        try:
            a1 = cov.vector(contribution_weights(family, n, k, 0, beta))
            a2 = cov.vector(contribution_weights(family, n, k, 1, beta))
        except UndefinedMetricError as exc:
            out.append(exc)
            continue
        est = float(gaps.deltas[k])
        touched = (a1 != 0) | (a2 != 0)
        check = float((a1 - a2)[touched] @ rates[touched])
        if abs(check - est) > 1e-9 * max(1.0, abs(est)):
            raise NumericalConsistencyError(f"{label}: contribution {est} disagrees with rates ({check})")
        v1 = cov.quadratic(a1, a1)
        v2 = cov.quadratic(a2, a2)
        c12 = cov.quadratic(a1, a2)
        var = v1 + v2 - 2.0 * c12
        if var < -NEGATIVE_VARIANCE_TOL:
            raise NumericalConsistencyError(f"{label}: assembled variance {var:.3e} is negative")
        var = max(var, 0.0)
        extras = {"var_group1": v1, "var_group2": v2, "cov_groups": c12}
        if cov.extrapolated:
            extras["extrapolated"] = True
        out.append(TestResult.from_estimate(label, est, math.sqrt(var), alpha, **extras))
    return out


def multi_stage_contrast(char: Characteristic, kind: MetricKind | str, family: EslFamily | str,
                         cell_a: tuple[int, ...], cell_b: tuple[int, ...], alpha: float = 0.05,
                         feature_mask: int | None = None) -> TestResult:
    """Z test of equal values for two cells of a nested allocation.

    Both cells are tuples of level codes of the same depth.  Each cell value
    is linear in the rates of the intersection coalitions, so the variance
    follows from the rate influence vectors.  Empty intersections enter as
    the empty coalition and carry no variance.
    """
    kind = MetricKind.parse(kind)
    family = EslFamily.parse(family)
    depth = len(cell_a)
    if len(cell_b) != depth or not 1 <= depth <= char.n_attributes:
        raise DomainError("cells must share a depth within the attribute count")
    mask = char.table.full if feature_mask is None else feature_mask
    w = coalition_weights(family, 2)
    beta = char.baseline.value
    yhat = char.table.column(mask)
    est = 0.0
    infl = np.zeros(len(char.y_true))
    for masks in itertools.product((1, 2, 3), repeat=depth):
        ca = cb = 1.0
        for la, lb, m in zip(cell_a, cell_b, masks):
            ca *= w.coefficient(la - 1, m)
            cb *= w.coefficient(lb - 1, m)
        c = ca - cb
        if c == 0.0:
            continue
        rows = char.rows(masks + (3,) * (char.n_attributes - depth))
        try:
            r, psi, _ = rate_influence(kind, char.y_true, yhat, rows)
        except UndefinedMetricError:
            continue
        est += c * r / beta
        infl += (c / beta) * psi
    for rows in _strata(np.column_stack([char.groups, char.y_true])):
        infl[rows] -= infl[rows].mean()
    se = float(np.sqrt(infl @ infl))
    return TestResult.from_estimate(f"{kind.value}:{family.value}:{cell_a}-{cell_b}", est, se, alpha)


@dataclass(frozen=True)
class CriterionVerdict:
    criterion: str
    satisfied: bool
    rejected: tuple[str, ...]
    alpha: float

    def to_dict(self) -> dict:
        return {"criterion": self.criterion, "satisfied": self.satisfied,
                "rejected_metrics": list(self.rejected), "alpha": self.alpha}


def criterion_verdict(results: Mapping[MetricKind | str, TestResult], criterion: str,
                      alpha: float = 0.05) -> CriterionVerdict:
    """A criterion holds iff none of its constituent tests rejects at ``alpha``."""
    needed = metrics_for_criterion(criterion)
    parsed = {MetricKind.parse(k): v for k, v in results.items()}
    missing = [k.value for k in needed if k not in parsed]
    if missing:
        raise IncompleteCriterionError(f"{criterion} needs results for {missing}")
    rejected = tuple(k.value for k in needed if parsed[k].rejects(alpha))
    return CriterionVerdict(criterion, not rejected, rejected, alpha)


@dataclass(frozen=True)
class VoteVerdict:
    flags: dict[str, bool]
    votes: int
    verdict: str
    threshold: int = 3

    def to_dict(self) -> dict:
        return {"flags": dict(self.flags), "votes": self.votes, "verdict": self.verdict, "threshold": self.threshold}


def majority_vote(results: Mapping[EslFamily | str, TestResult], alpha: float = 0.05) -> VoteVerdict:
    """Unfair iff at least three of the five families reject equal contributions."""
    parsed = {EslFamily.parse(f): r for f, r in results.items()}
    missing = [f.value for f in ALL_FAMILIES if f not in parsed]
    if missing:
        raise IncompleteVoteError(f"majority vote needs all five families, missing {missing}")
    flags = {f.value: bool(parsed[f].rejects(alpha)) for f in ALL_FAMILIES}
    votes = sum(flags.values())
    return VoteVerdict(flags=flags, votes=votes, verdict="unfair" if votes >= 3 else "fair")
