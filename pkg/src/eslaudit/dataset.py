"""Loading, validation, splitting and encoding of tabular audit data.

A dataset has one binary outcome, one or more binary sensitive attributes
(levels coded 1 and 2) and a list of numeric or categorical features.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CardinalityError, LabelError, SchemaError, SplitError

NUMERIC = "numeric"
CATEGORICAL = "categorical"
MISSING_TOKENS = frozenset({"", "?", "na", "n/a", "nan", "null", "none"})
MISSING_CATEGORY = "<missing>"


def is_missing(token: str) -> bool:
    return token.strip().lower() in MISSING_TOKENS


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")


@dataclass
class Schema:
    """Column-role declaration for :func:`load_csv`.

    Attributes:
        label: Outcome column.
        groups: Sensitive-attribute columns, in nesting order.
        features: Feature columns. ``None`` takes every remaining column.
        kinds: Optional per-feature kind override (``numeric``/``categorical``).
        positive_label: Raw label text treated as Y=1. When unset the label
            column must already hold 0/1.
        group_levels: Optional per-attribute ``(level_1, level_2)`` mapping.
            Defaults to first-appearance order.
        id_column: Optional column holding integer row identifiers.
    """

    label: str
    groups: Sequence[str]
    features: Sequence[str] | None = None
    kinds: dict[str, str] = field(default_factory=dict)
    positive_label: str | None = None
    group_levels: dict[str, tuple[str, str]] = field(default_factory=dict)
    id_column: str | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated audit data held column-wise.

    Numeric features are float arrays with NaN for missing values;
    categorical features are object arrays of strings where missing values
    have already been mapped to :data:`MISSING_CATEGORY`.
    """

    features: tuple[FeatureSpec, ...]
    columns: dict[str, np.ndarray]
    label_column: str
    labels: np.ndarray
    group_columns: tuple[str, ...]
    groups: np.ndarray
    group_levels: dict[str, tuple[str, str]]
    row_ids: np.ndarray
    id_column: str | None = None
    dropped_rows: int = 0
    warnings: tuple[dict, ...] = ()

    def __post_init__(self):
        n = len(self.labels)
        if n < 1:
            raise SchemaError("dataset has no rows")
        if self.groups.shape != (n, len(self.group_columns)):
            raise SchemaError("group matrix does not match row count")
        if not set(np.unique(self.labels)) <= {0, 1}:
            raise LabelError("labels must be 0 or 1")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        reserved = {self.label_column, *self.group_columns}
        if reserved & set(names):
            raise SchemaError(f"features overlap label/group columns: {sorted(reserved & set(names))}")
        for j, attr in enumerate(self.group_columns):
            if set(np.unique(self.groups[:, j])) != {1, 2}:
                raise CardinalityError(f"group column {attr!r} must have exactly two levels")

    @property
    def row_count(self) -> int:
        return len(self.labels)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def kind(self, name: str) -> str:
        for f in self.features:
            if f.name == name:
                return f.kind
        raise SchemaError(f"unknown feature {name!r}")

    def group(self, attribute: str | int = 0) -> np.ndarray:
        """Level codes (1 or 2) of one sensitive attribute."""
        j = attribute if isinstance(attribute, int) else self.group_columns.index(attribute)
        return self.groups[:, j]

    def schema(self) -> Schema:
        """Schema that reloads this dataset from :func:`write_csv` output."""
        return Schema(
            label=self.label_column,
            groups=list(self.group_columns),
            features=list(self.feature_names),
            kinds={f.name: f.kind for f in self.features},
            group_levels=dict(self.group_levels),
            id_column=self.id_column,
        )

    def equals(self, other: "Dataset") -> bool:
        """Field-by-field comparison treating NaN as equal to NaN."""
        if (
            self.features != other.features
            or self.label_column != other.label_column
            or self.group_columns != other.group_columns
            or self.group_levels != other.group_levels
        ):
            return False
        if not (
            np.array_equal(self.labels, other.labels)
            and np.array_equal(self.groups, other.groups)
            and np.array_equal(self.row_ids, other.row_ids)
        ):
            return False
        for f in self.features:
            a, b = self.columns[f.name], other.columns[f.name]
            if f.kind == NUMERIC:
                if not np.array_equal(a, b, equal_nan=True):
                    return False
            elif list(a) != list(b):
                return False
        return True


def _probe_kind(values: list[str]) -> str:
    seen = False
    for v in values:
        if is_missing(v):
            continue
        seen = True
        try:
            x = float(v)
        except ValueError:
            return CATEGORICAL
        if not math.isfinite(x):
            return CATEGORICAL
    return NUMERIC if seen else CATEGORICAL


def _parse_label(raw: str, positive: str | None) -> int:
    if positive is not None:
        return int(raw.strip() == positive)
    try:
        x = float(raw)
    except ValueError:
        raise LabelError(f"label value {raw!r} is not 0/1; declare the positive label") from None
    if x not in (0.0, 1.0):
        raise LabelError(f"label value {raw!r} is not 0/1")
    return int(x)


def load_csv(path: str | Path, schema: Schema) -> Dataset:
    """Read and validate a CSV file.

    Rows with a missing label or sensitive-attribute value are dropped and
    counted in the returned dataset's warnings.

    Raises:
        SchemaError: A declared column is missing or roles overlap.
        CardinalityError: A sensitive attribute does not have two levels.
        LabelError: The outcome is not binary.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        records = [row for row in reader if row]
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate column names in header")
    for row_no, row in enumerate(records, start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}:{row_no}: expected {len(header)} fields, got {len(row)}")

    groups = list(schema.groups)
    if not groups:
        raise SchemaError("at least one sensitive attribute is required")
    reserved = [schema.label, *groups] + ([schema.id_column] if schema.id_column else [])
    if len(set(reserved)) != len(reserved):
        raise SchemaError("label, group and id columns must be distinct")
    if schema.features is None:
        features = [h for h in header if h not in reserved]
    else:
        features = list(schema.features)
    if len(set(features)) != len(features):
        raise SchemaError("feature names must be unique")
    clash = set(features) & set(reserved)
    if clash:
        raise SchemaError(f"features overlap label/group/id columns: {sorted(clash)}")
    missing = [c for c in [*reserved, *features] if c not in header]
    if missing:
        raise SchemaError(f"{path}: declared columns not found: {missing}")
    col = {name: header.index(name) for name in header}

    warnings: list[dict] = []
    keep = []
    dropped = 0
    for row in records:
        if is_missing(row[col[schema.label]]) or any(is_missing(row[col[g]]) for g in groups):
            dropped += 1
            continue
        keep.append(row)
    if dropped:
        warnings.append({"stage": "dataset", "event": "rows_dropped", "reason": "missing label or group", "count": dropped})
    if not keep:
        raise SchemaError(f"{path}: no rows left after dropping missing labels/groups")

    raw_labels = [row[col[schema.label]] for row in keep]
    if schema.positive_label is not None:
        distinct = {v.strip() for v in raw_labels}
        if len(distinct) > 2:
            raise LabelError(f"label column {schema.label!r} has {len(distinct)} distinct values")
    labels = np.array([_parse_label(v, schema.positive_label) for v in raw_labels], dtype=np.int8)

    codes = np.zeros((len(keep), len(groups)), dtype=np.int8)
    levels: dict[str, tuple[str, str]] = {}
    for j, attr in enumerate(groups):
        values = [row[col[attr]].strip() for row in keep]
        order = list(dict.fromkeys(values))
        if len(order) != 2:
            raise CardinalityError(f"group column {attr!r} has {len(order)} levels {order[:5]}, expected 2")
        if attr in schema.group_levels:
            declared = tuple(schema.group_levels[attr])
            if set(declared) != set(order):
                raise CardinalityError(f"group column {attr!r}: declared levels {declared} do not match observed {order}")
            order = list(declared)
        levels[attr] = (order[0], order[1])
        codes[:, j] = [1 if v == order[0] else 2 for v in values]

    specs = []
    columns: dict[str, np.ndarray] = {}
    for name in features:
        raw = [row[col[name]] for row in keep]
        kind = schema.kinds.get(name) or _probe_kind(raw)
        spec = FeatureSpec(name, kind)
        if kind == NUMERIC:
            try:
                columns[name] = np.array([np.nan if is_missing(v) else float(v) for v in raw], dtype=float)
            except ValueError as exc:
                raise SchemaError(f"feature {name!r} declared numeric: {exc}") from None
        else:
            columns[name] = np.array([MISSING_CATEGORY if is_missing(v) else v.strip() for v in raw], dtype=object)
        specs.append(spec)

    if schema.id_column:
        try:
            row_ids = np.array([int(row[col[schema.id_column]]) for row in keep], dtype=np.int64)
        except ValueError:
            raise SchemaError(f"id column {schema.id_column!r} must hold integers") from None
        if len(np.unique(row_ids)) != len(row_ids):
            raise SchemaError(f"id column {schema.id_column!r} has duplicate values")
    else:
        row_ids = np.arange(len(keep), dtype=np.int64)

    return Dataset(
        features=tuple(specs),
        columns=columns,
        label_column=schema.label,
        labels=labels,
        group_columns=tuple(groups),
        groups=codes,
        group_levels=levels,
        row_ids=row_ids,
        id_column=schema.id_column,
        dropped_rows=dropped,
        warnings=tuple(warnings),
    )


def write_csv(data: Dataset, path: str | Path) -> None:
    """Write a dataset so that ``load_csv(path, data.schema())`` restores it."""
    header = ([data.id_column] if data.id_column else []) + list(data.feature_names)
    header += [data.label_column, *data.group_columns]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.row_count):
            row = [str(int(data.row_ids[i]))] if data.id_column else []
            for f in data.features:
                v = data.columns[f.name][i]
                if f.kind == NUMERIC:
                    row.append("" if np.isnan(v) else repr(float(v)))
                else:
                    row.append(v)
            row.append(str(int(data.labels[i])))
            for j, attr in enumerate(data.group_columns):
                row.append(data.group_levels[attr][data.groups[i, j] - 1])
            writer.writerow(row)


@dataclass(frozen=True, eq=False)
class SplitPair:
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int
    warnings: tuple[dict, ...] = ()

    def __post_init__(self):
        if len(self.train_indices) == 0 or len(self.test_indices) == 0:
            raise SplitError("both splits must be non-empty")
        if len(np.intersect1d(self.train_indices, self.test_indices)):
            raise SplitError("train and test indices overlap")


def _allocate(sizes: np.ndarray, fraction: float, total: int) -> np.ndarray:
    """Largest-remainder allocation of ``total`` test rows across strata,
    with every stratum of two or more rows kept in both splits."""
    quota = sizes * fraction
    alloc = np.floor(quota).astype(int)
    lo = np.where(sizes >= 2, 1, 0)
    hi = np.where(sizes >= 2, sizes - 1, 0)
    alloc = np.clip(alloc, lo, hi)
    remainder = quota - np.floor(quota)
    for idx in np.argsort(-remainder, kind="stable"):
        if alloc.sum() >= total:
            break
        if alloc[idx] < hi[idx]:
            alloc[idx] += 1
    return alloc


def split(data: Dataset, test_fraction: float, seed: int) -> SplitPair:
    """Stratified train/test split on (label, first sensitive attribute).

    Strata with a single row go to the training split and are reported in
    the warnings, unless that would leave the test split empty.
    """
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = data.row_count
    if n < 2:
        raise SplitError("need at least two rows to split")
    rng = np.random.default_rng(seed)
    key = data.labels.astype(int) * 2 + (data.group(0).astype(int) - 1)
    strata = [np.flatnonzero(key == k) for k in np.unique(key)]
    sizes = np.array([len(s) for s in strata])
    total = min(max(int(round(test_fraction * n)), 1), n - 1)
    alloc = _allocate(sizes, test_fraction, total)

    warnings = []
    singles = [s for s in strata if len(s) == 1]
    if singles:
        warnings.append({"stage": "split", "event": "singleton_strata", "count": len(singles),
                         "rows": [int(s[0]) for s in singles]})

    test_parts = []
    for members_, k in zip(strata, alloc):
        perm = rng.permutation(members_)
        test_parts.append(perm[:k])
    test = np.concatenate(test_parts) if test_parts else np.array([], dtype=int)
    if len(test) == 0:
        # only singleton strata: fall back to an unstratified draw among them
        pool = rng.permutation(np.concatenate(strata))
        test = pool[:total]
        warnings.append({"stage": "split", "event": "unstratified_fallback", "test_rows": int(total)})
    test = np.sort(test.astype(np.int64))
    train = np.setdiff1d(np.arange(n, dtype=np.int64), test)
    return SplitPair(train_indices=train, test_indices=test, seed=seed, warnings=tuple(warnings))


@dataclass(frozen=True, eq=False)
class EncodedMatrix:
    """Dense model matrix for every dataset row, fitted on the train split.

    ``column_map[j]`` names the source feature of encoded column ``j``; a
    one-hot group of columns always maps to a single feature.
    """

    values: np.ndarray
    columns: tuple[str, ...]
    column_map: tuple[str, ...]
    standardization: dict[str, tuple[float, float]]
    categories: dict[str, tuple[str, ...]]
    imputation: dict[str, float]
    dropped: tuple[str, ...] = ()
    unseen_counts: dict[str, int] = field(default_factory=dict)
    warnings: tuple[dict, ...] = ()

    def column_indices(self, features: Sequence[str]) -> np.ndarray:
        wanted = set(features)
        return np.array([j for j, src in enumerate(self.column_map) if src in wanted], dtype=int)

    def restrict(self, features: Sequence[str], rows: np.ndarray | None = None) -> np.ndarray:
        block = self.values[:, self.column_indices(features)]
        return block if rows is None else block[rows]


def encode(data: Dataset, split_pair: SplitPair) -> EncodedMatrix:
    """Standardize numeric and one-hot encode categorical features.

    Every constant (median, mean, stddev, category list) is taken from the
    training rows only.
    """
    train = split_pair.train_indices
    if train.max(initial=-1) >= data.row_count or split_pair.test_indices.max(initial=-1) >= data.row_count:
        raise SplitError("split indices exceed the dataset")
    train_mask = np.zeros(data.row_count, dtype=bool)
    train_mask[train] = True

    blocks, names, sources = [], [], []
    standardization, categories, imputation = {}, {}, {}
    dropped, warnings, unseen = [], [], {}
    for f in data.features:
        x = data.columns[f.name]
        if f.kind == NUMERIC:
            observed = x[train_mask & ~np.isnan(x)]
            if len(observed) == 0:
                dropped.append(f.name)
                warnings.append({"stage": "encode", "event": "column_dropped", "feature": f.name,
                                 "reason": "no observed training values"})
                continue
            median = float(np.median(observed))
            filled = np.where(np.isnan(x), median, x)
            mean = float(filled[train_mask].mean())
            std = float(filled[train_mask].std())
            if std <= 1e-12 * max(1.0, abs(mean)):
                dropped.append(f.name)
                warnings.append({"stage": "encode", "event": "column_dropped", "feature": f.name,
                                 "reason": "zero training variance"})
                continue
            imputation[f.name] = median
            standardization[f.name] = (mean, std)
            blocks.append(((filled - mean) / std)[:, None])
            names.append(f.name)
            sources.append(f.name)
        else:
            cats = tuple(sorted(set(x[train_mask])))
            categories[f.name] = cats
            onehot = np.stack([(x == c) for c in cats], axis=1).astype(float)
            n_unseen = int(np.sum(~train_mask & ~np.isin(x, cats)))
            if n_unseen:
                unseen[f.name] = n_unseen
                warnings.append({"stage": "encode", "event": "unseen_categories", "feature": f.name,
                                 "count": n_unseen})
            blocks.append(onehot)
            names.extend(f"{f.name}={c}" for c in cats)
            sources.extend([f.name] * len(cats))
    values = np.hstack(blocks) if blocks else np.zeros((data.row_count, 0))
    return EncodedMatrix(
        values=values,
        columns=tuple(names),
        column_map=tuple(sources),
        standardization=standardization,
        categories=categories,
        imputation=imputation,
        dropped=tuple(dropped),
        unseen_counts=unseen,
        warnings=tuple(warnings),
    )
