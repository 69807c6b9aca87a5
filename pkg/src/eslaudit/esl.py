"""Efficient-symmetric-linear (ESL) values and their nested applications.

Every ESL rule is the Shapley value of the rescaled game ``b_|S| v(S)`` for
a family-specific sequence ``b_0 = 0, b_1, ..., b_a = 1``.  Writing the sum
per coalition ``T`` instead of per marginal contribution gives

    phi_k = sum_{T containing k}   b_t (t-1)! (a-t)! / a!  v(T)
          - sum_{T not containing k} b_t t! (a-t-1)! / a!  v(T)

so coalitions with ``b_t = 0`` are never evaluated.  For Equal Surplus that
leaves the singletons and the grand coalition, which is what keeps the
two-stage decomposition linear in the number of features.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb, factorial
from typing import Callable, Mapping, Sequence

import numpy as np

from .coalitions import check_player_count, full_mask, popcount
from .errors import AuditError, DomainError, NumericalConsistencyError, UndefinedMetricError
from .metrics import Characteristic, MetricKind

EFFICIENCY_TOL = 1e-9


class EslFamily(str, enum.Enum):
    SHAPLEY = "shapley"
    SOLIDARITY = "solidarity"
    CONSENSUS = "consensus"
    EQUAL_SURPLUS = "equal_surplus"
    LSP = "lsp"

    @classmethod
    def parse(cls, value: "str | EslFamily") -> "EslFamily":
        if isinstance(value, EslFamily):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DomainError(f"unknown ESL family {value!r}; choose from {[f.value for f in cls]}") from None

    def b(self, s: int, a: int) -> Fraction:
        return _b(self, s, a)


ALL_FAMILIES = (
    EslFamily.EQUAL_SURPLUS,
    EslFamily.SHAPLEY,
    EslFamily.SOLIDARITY,
    EslFamily.CONSENSUS,
    EslFamily.LSP,
)


def _b(family: EslFamily, s: int, a: int) -> Fraction:
    if s == 0:
        return Fraction(0)
    if s == a:
        return Fraction(1)
    if family is EslFamily.SHAPLEY:
        return Fraction(1)
    if family is EslFamily.SOLIDARITY:
        return Fraction(1, s + 1)
    if family is EslFamily.EQUAL_SURPLUS:
        return Fraction(a - 1) if s == 1 else Fraction(0)
    if family is EslFamily.CONSENSUS:
        return Fraction(a, 2) if s == 1 else Fraction(1, 2)
    if family is EslFamily.LSP:
        return Fraction(comb(a - 1, s) * s) / Fraction(2) ** (a - 2)
    raise DomainError(f"unknown ESL family {family!r}")


def esl_coefficients(family: EslFamily | str, a: int) -> tuple[float, ...]:
    """The sequence ``(b_0, ..., b_a)`` of a family for ``a`` players."""
    family = EslFamily.parse(family)
    if a < 1:
        raise DomainError("player count must be at least 1")
    return tuple(float(_b(family, s, a)) for s in range(a + 1))


def shapley_weight(s: int, a: int) -> Fraction:
    """``s! (a-s-1)! / a!``: weight of a coalition of size ``s`` not containing the player."""
    return Fraction(factorial(s) * factorial(a - s - 1), factorial(a))


@dataclass(frozen=True)
class CoalitionWeights:
    """Per-size coefficients of ``v(T)`` in the value of a player.

    ``inside[t]`` applies when the player belongs to ``T``, ``outside[t]``
    when it does not (``outside[a]`` is unused).
    """

    family: EslFamily
    a: int
    inside: tuple[float, ...]
    outside: tuple[float, ...]

    def active_sizes(self) -> list[int]:
        return [t for t in range(1, self.a + 1) if self.inside[t] != 0.0 or self.outside[t] != 0.0]

    def coefficient(self, player: int, mask: int) -> float:
        t = popcount(mask)
        return self.inside[t] if (mask >> player) & 1 else self.outside[t]


def coalition_weights(family: EslFamily | str, a: int) -> CoalitionWeights:
    family = EslFamily.parse(family)
    check_player_count(a)
    inside = [0.0] * (a + 1)
    outside = [0.0] * (a + 1)
    for t in range(1, a + 1):
        b = _b(family, t, a)
        inside[t] = float(b * shapley_weight(t - 1, a))
        if t < a:
            outside[t] = float(-b * shapley_weight(t, a))
    return CoalitionWeights(family, a, tuple(inside), tuple(outside))


def evaluated_masks(family: EslFamily | str, a: int) -> list[int]:
    """Coalitions whose value the family actually needs, in increasing order."""
    w = coalition_weights(family, a)
    sizes = set(w.active_sizes())
    return [m for m in range(1, full_mask(a) + 1) if popcount(m) in sizes]


class Game:
    """Cooperative game with a memoized characteristic function.

    ``evaluator`` receives a coalition bitmask and returns its value; the
    empty coalition is fixed at 0 and never passed to it.
    """

    def __init__(self, n_players: int, evaluator: Callable[[int], float], players: Sequence[str] | None = None):
        check_player_count(n_players)
        self.n_players = n_players
        self.evaluator = evaluator
        self.players = tuple(players) if players is not None else tuple(str(i + 1) for i in range(n_players))
        if len(self.players) != n_players:
            raise DomainError("player names do not match the player count")
        self.memo: dict[int, float] = {}
        self.evaluations = 0

    @classmethod
    def from_values(cls, n_players: int, values: Mapping[int, float] | Sequence[float],
                    players: Sequence[str] | None = None) -> "Game":
        """Game from an explicit table indexed by mask (a sequence must include mask 0)."""
        if isinstance(values, Mapping):
            table = dict(values)
            return cls(n_players, lambda m: float(table[m]), players)
        arr = np.asarray(values, dtype=float)
        if arr.shape != (full_mask(n_players) + 1,):
            raise DomainError(f"value table needs {full_mask(n_players) + 1} entries")
        return cls(n_players, lambda m: float(arr[m]), players)

    @property
    def grand(self) -> int:
        return full_mask(self.n_players)

    def value(self, mask: int) -> float:
        if mask == 0:
            return 0.0
        hit = self.memo.get(mask)
        if hit is None:
            try:
                hit = float(self.evaluator(mask))
            except AuditError as exc:
                if getattr(exc, "coalition", None) is None:
                    exc.coalition = mask
                raise
            self.memo[mask] = hit
            self.evaluations += 1
        return hit

    __call__ = value


@dataclass(frozen=True, eq=False)
class Allocation:
    values: np.ndarray
    family: EslFamily
    total: float
    players: tuple[str, ...] = ()

    def __post_init__(self):
        gap = abs(float(np.sum(self.values)) - self.total)
        if gap > EFFICIENCY_TOL * max(1.0, abs(self.total), float(np.max(np.abs(self.values), initial=0.0))):
            raise NumericalConsistencyError(f"allocation violates efficiency by {gap:.3e}")

    def __getitem__(self, i: int) -> float:
        return float(self.values[i])

    def __len__(self) -> int:
        return len(self.values)

    @property
    def gap(self) -> float:
        """First minus second player (two-player allocations)."""
        return float(self.values[0] - self.values[1])

    def shares(self) -> np.ndarray:
        """Values as fractions of the grand-coalition value."""
        if self.total == 0:
            return np.full(len(self.values), np.nan)
        return self.values / self.total


def esl_value(game: Game, family: EslFamily | str) -> Allocation:
    """ESL allocation of ``game`` by exact enumeration.

    Only coalitions with a non-zero ``b`` coefficient are evaluated.
    """
    family = EslFamily.parse(family)
    a = game.n_players
    w = coalition_weights(family, a)
    idx = np.arange(a)
    phi = np.zeros(a)
    for mask in evaluated_masks(family, a):
        v = game.value(mask)
        t = popcount(mask)
        inside = ((mask >> idx) & 1).astype(bool)
        phi += np.where(inside, w.inside[t], w.outside[t]) * v
    return Allocation(values=phi, family=family, total=game.value(game.grand), players=game.players)


def _group_game(char: Characteristic, kind: MetricKind, feature_mask: int, labels: Sequence[str]) -> Game:
    return Game(2, lambda m: char.value(kind, m, feature_mask), labels)


def group_values(char: Characteristic, kind: MetricKind | str, family: EslFamily | str,
                 feature_mask: int | None = None, labels: Sequence[str] = ("1", "2")) -> Allocation:
    """Allocation of the metric's characteristic value across the two groups.

    Args:
        char: Characteristic function over the audit's prediction table.
        kind: Metric.
        family: ESL rule.
        feature_mask: Feature coalition; defaults to the full universe.
        labels: Names of the two groups.
    """
    kind = MetricKind.parse(kind)
    mask = char.table.full if feature_mask is None else feature_mask
    return esl_value(_group_game(char, kind, mask, labels), family)


@dataclass(frozen=True, eq=False)
class FeatureContributionMatrix:
    """Contributions ``values[k, g]`` of feature ``k`` to group ``g``'s value.

    ``evaluations`` is the number of distinct characteristic values the
    decomposition requested, whether or not they were already cached.
    """

    features: tuple[str, ...]
    groups: tuple[str, ...]
    values: np.ndarray
    family: EslFamily
    group_totals: np.ndarray
    kind: MetricKind | None = None
    baseline: float | None = None
    evaluations: int = 0
    group_allocations: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.values.shape != (len(self.features), len(self.groups)):
            raise DomainError(f"contribution matrix shape {self.values.shape} does not match "
                              f"{len(self.features)} features x {len(self.groups)} groups")
        sums = self.values.sum(axis=0)
        scale = max(1.0, float(np.max(np.abs(self.values), initial=0.0)))
        if np.any(np.abs(sums - self.group_totals) > EFFICIENCY_TOL * scale):
            raise NumericalConsistencyError("feature contributions do not sum to the group values")

    @classmethod
    def from_columns(cls, features: Sequence[str], columns: Mapping[str, Sequence[float]],
                     family: EslFamily | str) -> "FeatureContributionMatrix":
        """Build from per-group contribution columns; totals are the column sums."""
        groups = tuple(columns)
        values = np.column_stack([np.asarray(columns[g], dtype=float) for g in groups])
        return cls(tuple(features), groups, values, EslFamily.parse(family), values.sum(axis=0))

    def column(self, group: str | int) -> np.ndarray:
        j = group if isinstance(group, int) else self.groups.index(group)
        return self.values[:, j]


def two_stage(char: Characteristic, kind: MetricKind | str, family: EslFamily | str,
              labels: Sequence[str] = ("1", "2")) -> FeatureContributionMatrix:
    """Decompose each group's value over the features.

    For group ``g`` the feature game is ``S -> phi_g(S)`` where ``phi_g(S)``
    is the group allocation computed from the predictions of coalition
    ``S``; the same family then allocates that game over the features.

    Raises:
        CompletenessError: The table lacks a coalition the family needs.
    """
    kind = MetricKind.parse(kind)
    family = EslFamily.parse(family)
    table = char.table
    n = table.n_features
    table.require(evaluated_masks(family, n))
    outer_trace = char.trace
    char.trace = set()
    cache: dict[int, Allocation] = {}

    def alloc(mask: int) -> Allocation:
        hit = cache.get(mask)
        if hit is None:
            hit = cache[mask] = group_values(char, kind, family, mask, labels)
        return hit

    cols = []
    totals = []
    try:
        for g in range(2):
            game = Game(n, lambda m, g=g: alloc(m)[g], table.universe)
            a = esl_value(game, family)
            cols.append(a.values)
            totals.append(a.total)
    finally:
        requested = char.trace
        char.trace = outer_trace
        if outer_trace is not None:
            outer_trace |= requested
    return FeatureContributionMatrix(
        features=table.universe,
        groups=tuple(labels),
        values=np.column_stack(cols),
        family=family,
        group_totals=np.array(totals),
        kind=kind,
        baseline=char.baseline.value,
        evaluations=len(requested),
        group_allocations=cache,
    )


@dataclass(frozen=True)
class GapAttribution:
    deltas: np.ndarray
    total: float
    features: tuple[str, ...]


def gap_attribution(matrix: FeatureContributionMatrix) -> GapAttribution:
    """Per-feature contribution gaps ``C^k_1 - C^k_2``; they sum to the group gap."""
    if len(matrix.groups) != 2:
        raise DomainError("gap attribution needs exactly two groups")
    deltas = matrix.values[:, 0] - matrix.values[:, 1]
    total = float(matrix.group_totals[0] - matrix.group_totals[1])
    if abs(float(deltas.sum()) - total) > EFFICIENCY_TOL * max(1.0, abs(total)):
        raise NumericalConsistencyError("feature gaps do not add up to the group gap")
    return GapAttribution(deltas=deltas, total=total, features=matrix.features)


@dataclass(frozen=True, eq=False)
class MultiStageResult:
    """Nested allocation over intersections of binary attributes.

    ``levels[d]`` maps a tuple of ``d + 1`` level codes (attribute order as
    given) to that cell's value.  Cells whose own intersection is empty or
    has an undefined metric are listed in ``undefined``; such intersections
    enter their siblings' values as the empty coalition (value 0).
    """

    attributes: tuple[str, ...]
    family: EslFamily
    kind: MetricKind
    total: float
    levels: tuple[dict[tuple[int, ...], float], ...]
    undefined: frozenset = frozenset()
    contributions: dict = field(default_factory=dict)

    @property
    def cells(self) -> dict[tuple[int, ...], float]:
        return self.levels[-1]

    def children(self, prefix: tuple[int, ...]) -> dict[tuple[int, ...], float]:
        return {k: v for k, v in self.levels[len(prefix)].items() if k[: len(prefix)] == prefix}


def _intersection_values(char: Characteristic, kind: MetricKind, feature_mask: int, depth: int):
    values: dict[tuple[int, ...], float] = {}
    failed: set[tuple[int, ...]] = set()
    for masks in itertools.product((1, 2, 3), repeat=depth):
        key = masks + (3,) * (char.n_attributes - depth)
        try:
            values[masks] = char.value(kind, key, feature_mask)
        except UndefinedMetricError:
            if all(m == 3 for m in masks):
                raise
            values[masks] = 0.0
            failed.add(masks)
    return values, failed


def _nested_cells(values: Mapping[tuple[int, ...], float], w: CoalitionWeights, depth: int):
    out = {}
    for cell in itertools.product((1, 2), repeat=depth):
        acc = 0.0
        for masks, v in values.items():
            coef = 1.0
            for level, m in zip(cell, masks):
                coef *= w.coefficient(level - 1, m)
            acc += coef * v
        out[cell] = acc
    return out


def _nested_levels(char: Characteristic, kind: MetricKind, family: EslFamily, feature_mask: int):
    s = char.n_attributes
    w = coalition_weights(family, 2)
    levels = []
    undefined: set[tuple[int, ...]] = set()
    for depth in range(1, s + 1):
        values, failed = _intersection_values(char, kind, feature_mask, depth)
        levels.append(_nested_cells(values, w, depth))
        if depth == s:
            undefined = {tuple(2 if m == 2 else 1 for m in f) for f in failed if all(m in (1, 2) for m in f)}
    return tuple(levels), undefined


def multi_stage(char: Characteristic, kind: MetricKind | str, family: EslFamily | str,
                attributes: Sequence[str] | None = None, feature_mask: int | None = None,
                decompose_features: bool = False) -> MultiStageResult:
    """Recursive ESL allocation over intersections of the sensitive attributes.

    At the first level the value is split across the levels of the first
    attribute; each cell is then split across the levels of the next
    attribute by applying the rule to the game restricted to that cell,
    and so on.  Children always sum to their parent.

    Args:
        char: Characteristic whose ``groups`` matrix has one column per
            attribute, in nesting order.
        decompose_features: Also allocate every finest cell over the
            features (requires the coalitions the family needs).
    """
    kind = MetricKind.parse(kind)
    family = EslFamily.parse(family)
    s = char.n_attributes
    attributes = tuple(attributes) if attributes is not None else tuple(f"A{j + 1}" for j in range(s))
    if len(attributes) != s:
        raise DomainError("attribute names do not match the group matrix")
    mask = char.table.full if feature_mask is None else feature_mask
    levels, undefined = _nested_levels(char, kind, family, mask)
    total = char.value(kind, (3,) * s, mask)
    for depth in range(s):
        for prefix, parent in ([((), total)] if depth == 0 else levels[depth - 1].items()):
            kids = sum(v for k, v in levels[depth].items() if k[:depth] == prefix)
            if abs(kids - parent) > EFFICIENCY_TOL * max(1.0, abs(parent)):
                raise NumericalConsistencyError(f"children of {prefix} do not sum to their parent")

    contributions = {}
    if decompose_features:
        n = char.table.n_features
        char.table.require(evaluated_masks(family, n))
        per_mask: dict[int, dict] = {}

        def cell_value(m: int, cell: tuple[int, ...]) -> float:
            if m not in per_mask:
                per_mask[m] = _nested_levels(char, kind, family, m)[0][-1]
            return per_mask[m][cell]

        for cell in levels[-1]:
            game = Game(n, lambda m, cell=cell: cell_value(m, cell), char.table.universe)
            contributions[cell] = esl_value(game, family).values
    return MultiStageResult(attributes=attributes, family=family, kind=kind, total=total,
                            levels=levels, undefined=frozenset(undefined), contributions=contributions)
