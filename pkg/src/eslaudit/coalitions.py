"""Bitmask helpers for coalitions over an ordered player list.

Bit ``i`` of a mask marks player ``i``.  The empty coalition is ``0`` and
the grand coalition over ``n`` players is ``(1 << n) - 1``.
"""

from __future__ import annotations

from typing import Iterable, Iterator, Sequence

from .errors import DomainError

MAX_PLAYERS = 20


def full_mask(n: int) -> int:
    return (1 << n) - 1


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def members(mask: int) -> list[int]:
    """Indices of the players in ``mask``, ascending."""
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return out


def nonempty_masks(n: int) -> Iterator[int]:
    """All non-empty coalitions in increasing mask order."""
    return iter(range(1, full_mask(n) + 1))


def singleton_masks(n: int) -> list[int]:
    return [1 << i for i in range(n)]


def mask_from_names(names: Iterable[str], universe: Sequence[str]) -> int:
    index = {name: i for i, name in enumerate(universe)}
    mask = 0
    for name in names:
        if name not in index:
            raise DomainError(f"feature {name!r} is not in the universe {list(universe)}")
        mask |= 1 << index[name]
    return mask


def names_from_mask(mask: int, universe: Sequence[str]) -> tuple[str, ...]:
    if mask >> len(universe):
        raise DomainError(f"coalition mask {mask} exceeds a universe of {len(universe)} features")
    return tuple(universe[i] for i in members(mask))


def coalition_label(mask: int, universe: Sequence[str]) -> str:
    """Canonical text form: semicolon-joined sorted feature names."""
    return ";".join(sorted(names_from_mask(mask, universe)))


def check_player_count(n: int) -> None:
    if n < 1:
        raise DomainError("a game needs at least one player")
    if n > MAX_PLAYERS:
        raise DomainError(f"exact enumeration is capped at {MAX_PLAYERS} players, got {n}")
