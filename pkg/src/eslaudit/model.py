"""Per-coalition predictions.

Each feature coalition gets its own class-weighted logistic model trained on
the features in that coalition; predictions on the test split are collected
in a :class:`CoalitionPredictionTable`.  Tables can also be imported from a
CSV produced elsewhere.
"""

from __future__ import annotations

import csv
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .coalitions import (
    MAX_PLAYERS,
    coalition_label,
    full_mask,
    mask_from_names,
    names_from_mask,
    nonempty_masks,
    singleton_masks,
)
from .dataset import Dataset, EncodedMatrix, SplitPair, encode
from .errors import (
    CompletenessError,
    DegenerateModelError,
    DomainError,
    PredictionValueError,
    SchemaError,
    ShapeError,
)


@dataclass(frozen=True)
class ClassifierConfig:
    learning_rate: float = 0.5
    epochs: int = 500
    l2: float = 0.0
    class_weighted: bool = True
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise DomainError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.epochs < 1:
            raise DomainError("epochs must be at least 1")
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if self.l2 < 0:
            raise DomainError("l2 must be non-negative")


@dataclass(frozen=True, eq=False)
class TrainedModel:
    weights: np.ndarray
    intercept: float
    coalition: tuple[str, ...]

    def __post_init__(self):
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.intercept)):
            raise DegenerateModelError("non-finite model parameters", self.coalition)

    def scores(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != len(self.weights):
            raise ShapeError(f"model on {self.coalition} expects {len(self.weights)} columns, got {x.shape}")
        return x @ self.weights + self.intercept


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def class_weights(y: np.ndarray, balanced: bool = True) -> np.ndarray:
    """Per-row weights ``n / (2 n_c)`` for the row's class, or all ones."""
    y = np.asarray(y)
    if not balanced:
        return np.ones(len(y))
    n = len(y)
    n1 = int(y.sum())
    n0 = n - n1
    return np.where(y == 1, n / (2.0 * n1), n / (2.0 * n0))


def train(x: np.ndarray, y: np.ndarray, config: ClassifierConfig,
          coalition: Sequence[str] = ()) -> TrainedModel:
    """Fit logistic regression by full-batch gradient descent from zero.

    Args:
        x: Encoded training matrix restricted to the coalition's columns.
        y: Binary training labels.
        config: Optimizer and weighting settings.
        coalition: Feature names, recorded on the model.

    Raises:
        DegenerateModelError: Only one class present in ``y``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    coalition = tuple(coalition)
    if x.ndim != 2 or x.shape[0] != len(y):
        raise ShapeError(f"design matrix {x.shape} does not match {len(y)} labels")
    n1 = int(y.sum())
    if n1 == 0 or n1 == len(y):
        raise DegenerateModelError(f"training labels for {coalition} contain a single class", coalition)
    sw = class_weights(y, config.class_weighted)
    norm = sw.sum()
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(config.epochs):
        resid = sw * (sigmoid(x @ w + b) - y)
        grad_w = x.T @ resid / norm + config.l2 * w
        grad_b = resid.sum() / norm
        w -= config.learning_rate * grad_w
        b -= config.learning_rate * grad_b
    return TrainedModel(weights=w, intercept=float(b), coalition=coalition)


def predict_proba(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    return sigmoid(model.scores(np.asarray(x, dtype=float)))


def predict(model: TrainedModel, x: np.ndarray, threshold: float) -> np.ndarray:
    """Hard labels: 1 where the predicted probability is at least ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must lie in (0, 1), got {threshold}")
    return (predict_proba(model, x) >= threshold).astype(np.int8)


class CoalitionPredictionTable:
    """Test-split predictions keyed by feature-coalition bitmask.

    Bit ``i`` of a key refers to ``universe[i]``.  Each key may be written
    once; the empty coalition never holds a column.
    """

    def __init__(self, universe: Sequence[str], instance_ids: Sequence[int]):
        if not universe:
            raise DomainError("feature universe must be non-empty")
        if len(set(universe)) != len(universe):
            raise DomainError("feature universe has duplicate names")
        self.universe = tuple(universe)
        self.instance_ids = np.asarray(instance_ids, dtype=np.int64)
        self._entries: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()
        self.provenance: dict = {}

    @property
    def n_features(self) -> int:
        return len(self.universe)

    @property
    def full(self) -> int:
        return full_mask(len(self.universe))

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, mask: int) -> bool:
        return mask in self._entries

    def masks(self) -> list[int]:
        return sorted(self._entries)

    def add(self, mask: int, column: np.ndarray) -> None:
        if mask <= 0 or mask > self.full:
            raise DomainError(f"coalition mask {mask} outside the universe {self.universe}")
        col = np.asarray(column)
        if col.shape != (len(self.instance_ids),):
            raise ShapeError(f"column for {self.label(mask)} has shape {col.shape}, "
                             f"expected ({len(self.instance_ids)},)")
        if not np.all((col == 0) | (col == 1)):
            raise PredictionValueError(f"predictions for {self.label(mask)} must be 0 or 1")
        col = col.astype(np.int8)
        col.setflags(write=False)
        with self._lock:
            if mask in self._entries:
                raise DomainError(f"coalition {self.label(mask)} already stored")
            self._entries[mask] = col

    def column(self, mask: int) -> np.ndarray:
        try:
            return self._entries[mask]
        except KeyError:
            raise CompletenessError(f"prediction table lacks coalition {{{self.label(mask)}}}") from None

    def label(self, mask: int) -> str:
        return coalition_label(mask, self.universe)

    def require(self, masks: Iterable[int]) -> None:
        missing = [m for m in masks if m not in self._entries]
        if missing:
            shown = ", ".join("{" + self.label(m) + "}" for m in missing[:5])
            raise CompletenessError(f"prediction table lacks {len(missing)} coalition(s): {shown}")

    def validate(self) -> "CoalitionPredictionTable":
        self.require([self.full])
        return self

    def take(self, rows: np.ndarray) -> "CoalitionPredictionTable":
        """Row-resampled copy (used by the bootstrap)."""
        out = CoalitionPredictionTable(self.universe, self.instance_ids[rows])
        for mask, col in self._entries.items():
            c = col[rows]
            c.setflags(write=False)
            out._entries[mask] = c
        out.provenance = dict(self.provenance)
        return out

    def equals(self, other: "CoalitionPredictionTable") -> bool:
        return (
            self.universe == other.universe
            and np.array_equal(self.instance_ids, other.instance_ids)
            and self.masks() == other.masks()
            and all(np.array_equal(self._entries[m], other._entries[m]) for m in self._entries)
        )


def required_coalitions(n_features: int, families: Iterable[str], two_stage: bool = True) -> list[int]:
    """Coalitions a set of allocation rules needs.

    A first-stage-only audit needs the full coalition.  The two-stage
    Equal Surplus rule needs the singletons plus the full coalition; every
    other rule needs all non-empty coalitions.
    """
    families = list(families)
    full = full_mask(n_features)
    if not two_stage:
        return [full]
    if all(f == "equal_surplus" for f in families):
        return sorted(set(singleton_masks(n_features)) | {full})
    if n_features > MAX_PLAYERS:
        raise DomainError(f"exact enumeration is capped at {MAX_PLAYERS} features")
    return list(nonempty_masks(n_features))


def build_coalition_table(
    data: Dataset,
    split_pair: SplitPair,
    universe: Sequence[str],
    config: ClassifierConfig,
    coalitions: str | Iterable[int | Sequence[str]] = "all",
    encoded: EncodedMatrix | None = None,
    n_jobs: int = 1,
) -> CoalitionPredictionTable:
    """Train one model per requested coalition and predict on the test split.

    Args:
        coalitions: ``"all"`` for every non-empty subset of ``universe``, or
            an iterable of bitmasks or feature-name tuples.
        encoded: Pre-computed encoding; computed from ``split_pair`` if omitted.
        n_jobs: Number of worker threads for independent trainings.

    Raises:
        DomainError: A coalition refers to features outside ``universe``.
        DegenerateModelError: Raised with the failing coalition attached.
    """
    universe = tuple(universe)
    if not universe:
        raise DomainError("feature universe must be non-empty")
    unknown = [f for f in universe if f not in data.feature_names]
    if unknown:
        raise DomainError(f"universe features not in dataset: {unknown}")
    if coalitions == "all":
        if len(universe) > MAX_PLAYERS:
            raise DomainError(f'"all" coalitions is capped at {MAX_PLAYERS} features')
        masks = list(nonempty_masks(len(universe)))
    else:
        masks = []
        for c in coalitions:
            m = c if isinstance(c, (int, np.integer)) else mask_from_names(c, universe)
            m = int(m)
            if m <= 0 or m >> len(universe):
                raise DomainError(f"coalition {c!r} is outside the universe {universe}")
            masks.append(m)
        masks = sorted(set(masks))
    enc = encoded if encoded is not None else encode(data, split_pair)
    y_train = data.labels[split_pair.train_indices]
    table = CoalitionPredictionTable(universe, data.row_ids[split_pair.test_indices])
    table.provenance = {"coalition_semantics": "retrain", "threshold": config.threshold,
                        "dropped_features": list(enc.dropped)}

    def fit(mask: int) -> None:
        names = names_from_mask(mask, universe)
        x_train = enc.restrict(names, split_pair.train_indices)
        x_test = enc.restrict(names, split_pair.test_indices)
        try:
            model = train(x_train, y_train, config, names)
        except DegenerateModelError as exc:
            raise DegenerateModelError(f"coalition {{{';'.join(names)}}}: {exc}", names) from exc
        table.add(mask, predict(model, x_test, config.threshold))

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            list(pool.map(fit, masks))
    else:
        for m in masks:
            fit(m)
    return table


def import_predictions(path: str | Path, universe: Sequence[str] | None = None,
                       instance_ids: Sequence[int] | None = None) -> CoalitionPredictionTable:
    """Read a prediction table CSV with columns ``coalition,row_id,y_hat``.

    The universe defaults to the union of feature names seen in the file;
    the full coalition must be present.  When ``instance_ids`` is given the
    file must cover exactly those rows.
    """
    path = Path(path)
    cols: dict[frozenset, dict[int, float]] = {}
    names_seen: dict[str, None] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"coalition", "row_id", "y_hat"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise SchemaError(f"{path}: prediction table needs columns {sorted(need)}")
        for line_no, rec in enumerate(reader, start=2):
            names = [s.strip() for s in rec["coalition"].split(";") if s.strip()]
            if not names:
                raise SchemaError(f"{path}:{line_no}: empty coalition")
            for s in names:
                names_seen.setdefault(s)
            try:
                row_id = int(rec["row_id"])
                value = float(rec["y_hat"])
            except ValueError:
                raise PredictionValueError(f"{path}:{line_no}: bad row_id/y_hat") from None
            if value not in (0.0, 1.0):
                raise PredictionValueError(f"{path}:{line_no}: prediction {rec['y_hat']!r} is not 0 or 1")
            bucket = cols.setdefault(frozenset(names), {})
            if row_id in bucket:
                raise SchemaError(f"{path}:{line_no}: duplicate row {row_id} for coalition {rec['coalition']}")
            bucket[row_id] = value
    if not cols:
        raise CompletenessError(f"{path}: no predictions")
    if universe is None:
        universe = tuple(sorted(names_seen))
    universe = tuple(universe)
    first = next(iter(cols.values()))
    ids = np.array(sorted(first), dtype=np.int64) if instance_ids is None else np.asarray(instance_ids, dtype=np.int64)
    table = CoalitionPredictionTable(universe, ids)
    for key, bucket in cols.items():
        mask = mask_from_names(key, universe)
        if set(bucket) != set(ids.tolist()):
            raise ShapeError(f"coalition {{{';'.join(sorted(key))}}} does not cover the expected instance ids")
        table.add(mask, np.array([bucket[i] for i in ids.tolist()]))
    table.provenance = {"coalition_semantics": "imported", "source": str(path)}
    return table.validate()


def write_predictions(table: CoalitionPredictionTable, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["coalition", "row_id", "y_hat"])
        for mask in table.masks():
            label = table.label(mask)
            for rid, yh in zip(table.instance_ids.tolist(), table.column(mask).tolist()):
                writer.writerow([label, rid, yh])
