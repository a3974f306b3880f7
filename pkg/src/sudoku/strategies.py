"""
Human-style deduction strategies over a candidate grid.

Every strategy is a pure function `(board, cands) -> Deduction | None` that looks at the whole grid
and returns the single lowest-keyed application it finds, so that a trace is reproducible. Keys
compare the pattern cells first and the digits second.
"""
from dataclasses import dataclass, field
from enum import StrEnum
from itertools import combinations
from typing import Callable, Iterable

from src.sudoku.board import COLS, PEERS, ROWS, SIZE, UNITS, Board, col_of, row_of

Candidates = dict[int, set[int]]


class StrategyTag(StrEnum):
    NAKED_SINGLE = "NakedSingle"
    HIDDEN_SINGLE = "HiddenSingle"
    NAKED_PAIR = "NakedPair"
    HIDDEN_PAIR = "HiddenPair"
    NAKED_TRIPLE = "NakedTriple"
    HIDDEN_TRIPLE = "HiddenTriple"
    NAKED_QUAD = "NakedQuad"
    HIDDEN_QUAD = "HiddenQuad"
    X_WING = "XWing"
    SWORDFISH = "Swordfish"
    JELLYFISH = "Jellyfish"
    BACKTRACKING = "Backtracking"


class Tier(StrEnum):
    BASIC = "basic"
    ADVANCED = "advanced"
    MASTER = "master"
    FALLBACK = "fallback"


TIER_OF: dict[StrategyTag, Tier] = {
    StrategyTag.NAKED_SINGLE: Tier.BASIC,
    StrategyTag.HIDDEN_SINGLE: Tier.BASIC,
    StrategyTag.NAKED_PAIR: Tier.ADVANCED,
    StrategyTag.HIDDEN_PAIR: Tier.ADVANCED,
    StrategyTag.NAKED_TRIPLE: Tier.ADVANCED,
    StrategyTag.HIDDEN_TRIPLE: Tier.ADVANCED,
    StrategyTag.NAKED_QUAD: Tier.ADVANCED,
    StrategyTag.HIDDEN_QUAD: Tier.ADVANCED,
    StrategyTag.X_WING: Tier.MASTER,
    StrategyTag.SWORDFISH: Tier.MASTER,
    StrategyTag.JELLYFISH: Tier.MASTER,
    StrategyTag.BACKTRACKING: Tier.FALLBACK,
}

_TIER_RANK = {Tier.BASIC: 0, Tier.ADVANCED: 1, Tier.MASTER: 2, Tier.FALLBACK: 3}


def strategy_tier(tag: StrategyTag) -> Tier:
    return TIER_OF[StrategyTag(tag)]


def hardest_tier(strategies_used: Iterable[StrategyTag]) -> Tier:
    """ Basic for an empty set (an already solved puzzle needs no strategy) """
    tiers = [strategy_tier(tag) for tag in strategies_used]
    return max(tiers, key=_TIER_RANK.__getitem__, default=Tier.BASIC)


@dataclass(frozen=True)
class Deduction:
    tag: StrategyTag
    key: tuple
    placements: dict[int, int] = field(default_factory=dict)
    eliminations: frozenset[tuple[int, int]] = frozenset()

    @property
    def is_placement(self) -> bool:
        return bool(self.placements)


def _lowest(found: list[Deduction]) -> Deduction | None:
    return min(found, key=lambda d: d.key) if found else None


# ---- Singles ----
def naked_single(board: Board, cands: Candidates) -> Deduction | None:
    for cell in sorted(cands):
        if len(cands[cell]) == 1:
            digit = next(iter(cands[cell]))
            return Deduction(StrategyTag.NAKED_SINGLE, (cell, digit), placements={cell: digit})
    return None


def hidden_single(board: Board, cands: Candidates) -> Deduction | None:
    found: list[Deduction] = []
    for unit in UNITS:
        for digit in range(1, SIZE + 1):
            spots = [cell for cell in unit if digit in cands.get(cell, ())]
            if len(spots) == 1:
                cell = spots[0]
                found.append(Deduction(StrategyTag.HIDDEN_SINGLE, (cell, digit), placements={cell: digit}))
    return _lowest(found)


# ---- Subsets ----
def _naked_subset(size: int, tag: StrategyTag) -> Callable[[Board, Candidates], Deduction | None]:
    def find(board: Board, cands: Candidates) -> Deduction | None:
        found: list[Deduction] = []
        for unit in UNITS:
            open_cells = [cell for cell in unit if cell in cands]
            pool = [cell for cell in open_cells if 2 <= len(cands[cell]) <= size]
            for group in combinations(pool, size):
                digits = set().union(*(cands[cell] for cell in group))
                if len(digits) != size:
                    continue
                eliminations = frozenset(
                    (cell, d) for cell in open_cells if cell not in group for d in cands[cell] & digits
                )
                if eliminations:
                    found.append(Deduction(tag, (group, tuple(sorted(digits))), eliminations=eliminations))
        return _lowest(found)

    find.__name__ = f"naked_subset_{size}"
    return find


def _hidden_subset(size: int, tag: StrategyTag) -> Callable[[Board, Candidates], Deduction | None]:
    def find(board: Board, cands: Candidates) -> Deduction | None:
        found: list[Deduction] = []
        for unit in UNITS:
            spots = {
                digit: frozenset(cell for cell in unit if digit in cands.get(cell, ()))
                for digit in range(1, SIZE + 1)
            }
            pool = [digit for digit, cells in spots.items() if 2 <= len(cells) <= size]
            for digits in combinations(pool, size):
                cells = frozenset().union(*(spots[d] for d in digits))
                if len(cells) != size:
                    continue
                eliminations = frozenset(
                    (cell, d) for cell in cells for d in cands[cell] if d not in digits
                )
                if eliminations:
                    found.append(Deduction(tag, (tuple(sorted(cells)), digits), eliminations=eliminations))
        return _lowest(found)

    find.__name__ = f"hidden_subset_{size}"
    return find


# ---- Fish ----
def _fish(size: int, tag: StrategyTag) -> Callable[[Board, Candidates], Deduction | None]:
    """ Base lines are rows then columns; the cover lines lose the digit outside the base """

    def find(board: Board, cands: Candidates) -> Deduction | None:
        found: list[Deduction] = []
        for digit in range(1, SIZE + 1):
            for base_lines, cover_lines, cover_of in ((ROWS, COLS, col_of), (COLS, ROWS, row_of)):
                positions = []
                for index, line in enumerate(base_lines):
                    covers = frozenset(cover_of(cell) for cell in line if digit in cands.get(cell, ()))
                    if 2 <= len(covers) <= size:
                        positions.append((index, covers))
                for group in combinations(positions, size):
                    cover = frozenset().union(*(covers for _, covers in group))
                    if len(cover) != size:
                        continue
                    bases = {index for index, _ in group}
                    pattern = tuple(sorted(
                        cell for index in bases for cell in base_lines[index]
                        if digit in cands.get(cell, ())
                    ))
                    eliminations = frozenset(
                        (cell, digit)
                        for c in cover for cell in cover_lines[c]
                        if digit in cands.get(cell, ()) and cell not in pattern
                    )
                    if eliminations:
                        found.append(Deduction(tag, (pattern, (digit,)), eliminations=eliminations))
        return _lowest(found)

    find.__name__ = f"fish_{size}"
    return find


naked_pair = _naked_subset(2, StrategyTag.NAKED_PAIR)
hidden_pair = _hidden_subset(2, StrategyTag.HIDDEN_PAIR)
naked_triple = _naked_subset(3, StrategyTag.NAKED_TRIPLE)
hidden_triple = _hidden_subset(3, StrategyTag.HIDDEN_TRIPLE)
naked_quad = _naked_subset(4, StrategyTag.NAKED_QUAD)
hidden_quad = _hidden_subset(4, StrategyTag.HIDDEN_QUAD)
x_wing = _fish(2, StrategyTag.X_WING)
swordfish = _fish(3, StrategyTag.SWORDFISH)
jellyfish = _fish(4, StrategyTag.JELLYFISH)

# cheapest first
STRATEGIES: tuple[Callable[[Board, Candidates], Deduction | None], ...] = (
    naked_single,
    hidden_single,
    naked_pair,
    hidden_pair,
    naked_triple,
    hidden_triple,
    naked_quad,
    hidden_quad,
    x_wing,
    swordfish,
    jellyfish,
)


def apply_deduction(board: Board, cands: Candidates, deduction: Deduction) -> Board:
    """ Mutates `cands` in place and returns the resulting board """
    for cell, digit in deduction.eliminations:
        cands[cell].discard(digit)
    if not deduction.placements:
        return board
    for cell, digit in deduction.placements.items():
        place(cands, cell, digit)
    return board.with_values(deduction.placements)


def place(cands: Candidates, cell: int, digit: int) -> None:
    cands.pop(cell, None)
    for peer in PEERS[cell]:
        if peer in cands:
            cands[peer].discard(digit)


def find_contradiction(cands: Candidates, board: Board) -> str | None:
    """ Describes the first dead end: a blank cell without candidates or a digit with no home """
    for cell in sorted(cands):
        if not cands[cell]:
            return f"cell {cell} has no candidates"
    for u, unit in enumerate(UNITS):
        placed = {board[cell] for cell in unit if board[cell]}
        for digit in range(1, SIZE + 1):
            if digit not in placed and not any(digit in cands.get(cell, ()) for cell in unit):
                return f"digit {digit} has no place in unit {u}"
    return None

