"""Confusion counts, classification rates and normalized characteristic values."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CompletenessError, DomainError, ShapeError, UndefinedMetricError


class MetricKind(str, enum.Enum):
    SR = "sr"
    TPR = "tpr"
    FPR = "fpr"
    PPV = "ppv"
    NPV = "npv"

    @classmethod
    def parse(cls, value: "str | MetricKind") -> "MetricKind":
        if isinstance(value, MetricKind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DomainError(f"unknown metric {value!r}; choose from {[k.value for k in cls]}") from None

    @property
    def fixed_denominator(self) -> bool:
        """True when the denominator does not depend on the predictions."""
        return self in (MetricKind.SR, MetricKind.TPR, MetricKind.FPR)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise DomainError("confusion counts must be non-negative")

    @property
    def actual_pos(self) -> int:
        return self.tp + self.fn

    @property
    def actual_neg(self) -> int:
        return self.fp + self.tn

    @property
    def pred_pos(self) -> int:
        return self.tp + self.fp

    @property
    def pred_neg(self) -> int:
        return self.fn + self.tn

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def numerator(self, kind: MetricKind) -> int:
        return {
            MetricKind.SR: self.pred_pos,
            MetricKind.TPR: self.tp,
            MetricKind.FPR: self.fp,
            MetricKind.PPV: self.tp,
            MetricKind.NPV: self.fn,
        }[kind]

    def denominator(self, kind: MetricKind) -> int:
        return {
            MetricKind.SR: self.total,
            MetricKind.TPR: self.actual_pos,
            MetricKind.FPR: self.actual_neg,
            MetricKind.PPV: self.pred_pos,
            MetricKind.NPV: self.pred_neg,
        }[kind]


def confusion(y_true: np.ndarray, y_hat: np.ndarray, row_mask: np.ndarray | None = None) -> ConfusionCounts:
    """Confusion counts over the rows selected by ``row_mask`` (all rows if None)."""
    y_true = np.asarray(y_true)
    y_hat = np.asarray(y_hat)
    if y_true.shape != y_hat.shape or y_true.ndim != 1:
        raise ShapeError(f"y_true {y_true.shape} and y_hat {y_hat.shape} must be equal-length vectors")
    if row_mask is not None:
        row_mask = np.asarray(row_mask, dtype=bool)
        if row_mask.shape != y_true.shape:
            raise ShapeError("row mask length does not match the label vector")
        y_true = y_true[row_mask]
        y_hat = y_hat[row_mask]
    t = y_true.astype(bool)
    p = y_hat.astype(bool)
    tp = int(np.count_nonzero(t & p))
    fn = int(np.count_nonzero(t)) - tp
    fp = int(np.count_nonzero(p)) - tp
    tn = len(t) - tp - fn - fp
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def metric_value(c: ConfusionCounts, kind: MetricKind | str, coalition=None) -> float:
    """Rate of ``kind`` from confusion counts.

    NPV follows the P(Y=1 | Yhat=0) orientation, i.e. ``fn / pred_neg``,
    where smaller values are better.
    """
    kind = MetricKind.parse(kind)
    den = c.denominator(kind)
    if den == 0:
        raise UndefinedMetricError(kind, coalition)
    return c.numerator(kind) / den


@dataclass(frozen=True)
class Baseline:
    """Random-classifier reference that divides every characteristic value."""

    mode: str
    value: float

    def __post_init__(self):
        if self.mode not in ("half", "prevalence", "fixed"):
            raise DomainError(f"unknown baseline mode {self.mode!r}")
        if not 0.0 < self.value < 1.0:
            raise DomainError(f"baseline must lie strictly inside (0, 1), got {self.value}")

    @classmethod
    def half(cls) -> "Baseline":
        return cls("half", 0.5)

    @classmethod
    def prevalence(cls, y_true: np.ndarray) -> "Baseline":
        return cls("prevalence", float(np.mean(y_true)))

    @classmethod
    def fixed(cls, x: float) -> "Baseline":
        return cls("fixed", float(x))

    @classmethod
    def parse(cls, text: "str | float | Baseline", y_true: np.ndarray | None = None) -> "Baseline":
        if isinstance(text, Baseline):
            return text
        if isinstance(text, (int, float)):
            return cls.fixed(float(text))
        text = str(text).strip().lower()
        if text == "half":
            return cls.half()
        if text == "prevalence":
            if y_true is None:
                raise DomainError("prevalence baseline needs labels")
            return cls.prevalence(y_true)
        try:
            return cls.fixed(float(text))
        except ValueError:
            raise DomainError(f"baseline must be half, prevalence or a number, got {text!r}") from None


class Characteristic:
    """Memoized characteristic function over (group coalition, feature coalition).

    ``groups`` holds level codes (1 or 2) with one column per sensitive
    attribute.  A group coalition is a bitmask over the two levels of the
    first attribute (1 = level 1, 2 = level 2, 3 = both) or a tuple with
    one such mask per attribute; rows are selected by the conjunction.
    The value is the metric on the selected rows divided by the baseline,
    and 0 for the empty coalition.

    ``evaluations`` counts distinct metric computations, i.e. memo misses on
    non-empty group coalitions.  Setting ``trace`` to a set records every
    requested key, hit or miss.
    """

    def __init__(self, table, y_true: np.ndarray, groups: np.ndarray, baseline: Baseline | float):
        y_true = np.asarray(y_true)
        groups = np.asarray(groups)
        if groups.ndim == 1:
            groups = groups[:, None]
        if y_true.shape != (len(table.instance_ids),) or groups.shape[0] != len(y_true):
            raise ShapeError("labels, groups and prediction table must cover the same instances")
        if not np.all((y_true == 0) | (y_true == 1)):
            raise DomainError("labels must be 0 or 1")
        if not np.all((groups == 1) | (groups == 2)):
            raise DomainError("group codes must be 1 or 2")
        self.table = table
        self.y_true = y_true.astype(np.int8)
        self.groups = groups.astype(np.int8)
        self.baseline = baseline if isinstance(baseline, Baseline) else Baseline.fixed(baseline)
        self._memo: dict[tuple, float] = {}
        self._counts: dict[tuple, ConfusionCounts] = {}
        self.evaluations = 0
        self.trace: set | None = None
        self._row_cache: dict[tuple, np.ndarray] = {}

    @property
    def n_attributes(self) -> int:
        return self.groups.shape[1]

    def _key(self, group_coalition) -> tuple[int, ...]:
        if isinstance(group_coalition, (int, np.integer)):
            key = (int(group_coalition),) + (3,) * (self.n_attributes - 1)
        else:
            key = tuple(int(m) for m in group_coalition)
            if len(key) != self.n_attributes:
                raise DomainError(f"group coalition {group_coalition} does not match {self.n_attributes} attribute(s)")
        if any(m < 0 or m > 3 for m in key):
            raise DomainError(f"group coalition {group_coalition} outside the two levels")
        return key

    def rows(self, group_coalition) -> np.ndarray:
        """Boolean row selector for a group coalition."""
        key = self._key(group_coalition)
        hit = self._row_cache.get(key)
        if hit is None:
            sel = np.ones(len(self.y_true), dtype=bool)
            for j, m in enumerate(key):
                if m == 3:
                    continue
                if m == 0:
                    sel[:] = False
                    break
                sel &= self.groups[:, j] == m
            self._row_cache[key] = hit = sel
        return hit

    def counts(self, group_coalition, feature_mask: int) -> ConfusionCounts:
        key = (self._key(group_coalition), int(feature_mask))
        hit = self._counts.get(key)
        if hit is None:
            hit = confusion(self.y_true, self.table.column(feature_mask), self.rows(key[0]))
            self._counts[key] = hit
        return hit

    def rate(self, kind: MetricKind | str, group_coalition, feature_mask: int) -> float:
        kind = MetricKind.parse(kind)
        c = self.counts(group_coalition, feature_mask)
        return metric_value(c, kind, coalition=(self._key(group_coalition), self.table.label(feature_mask)))

    def value(self, kind: MetricKind | str, group_coalition, feature_mask: int) -> float:
        kind = MetricKind.parse(kind)
        gkey = self._key(group_coalition)
        if any(m == 0 for m in gkey):
            return 0.0
        key = (kind, gkey, int(feature_mask))
        if self.trace is not None:
            self.trace.add(key)
        hit = self._memo.get(key)
        if hit is None:
            hit = self.rate(kind, gkey, feature_mask) / self.baseline.value
            self._memo[key] = hit
            self.evaluations += 1
        return hit

    __call__ = value

    def reset_counter(self) -> None:
        self.evaluations = 0

    def clear(self) -> None:
        self._memo.clear()
        self._counts.clear()
        self.evaluations = 0

    def resample(self, rows: np.ndarray) -> "Characteristic":
        """Fresh characteristic over a row-resampled copy of the inputs."""
        return Characteristic(self.table.take(rows), self.y_true[rows], self.groups[rows], self.baseline)


def characteristic(table, group_coalition, feature_coalition: int, kind: MetricKind | str,
                   baseline: Baseline | float, y_true: np.ndarray, group_labels: np.ndarray) -> float:
    """One-off characteristic value; see :class:`Characteristic` for the cached form."""
    if feature_coalition not in table:
        raise CompletenessError(f"prediction table lacks coalition {{{table.label(feature_coalition)}}}")
    return Characteristic(table, y_true, group_labels, baseline).value(kind, group_coalition, feature_coalition)


def metrics_for_criterion(criterion: str) -> Sequence[MetricKind]:
    table = {
        "independence": (MetricKind.SR,),
        "separation": (MetricKind.TPR, MetricKind.FPR),
        "sufficiency": (MetricKind.PPV, MetricKind.NPV),
        "eod": (MetricKind.TPR,),
    }
    try:
        return table[criterion]
    except KeyError:
        raise DomainError(f"unknown criterion {criterion!r}; choose from {sorted(table)}") from None
