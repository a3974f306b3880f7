import logging
from dataclasses import dataclass
from typing import Any

from src.sudoku.board import (
    N_CELLS,
    SIZE,
    Board,
    SudokuPreconditionError,
    box_of,
    candidates as board_candidates,
    check_legality,
    col_of,
    row_of,
)
from src.sudoku.strategies import (
    STRATEGIES,
    Candidates,
    StrategyTag,
    apply_deduction,
    find_contradiction,
    place,
)

_ALL_DIGITS_MASK = sum(1 << d for d in range(1, SIZE + 1))


class UnsolvableError(RuntimeError):
    """ Raised when a puzzle reaches a dead end or has no solution """


class AmbiguityError(RuntimeError):
    """ Raised when a puzzle has more than one solution """


@dataclass(frozen=True)
class Annotation:
    num_steps: int
    strategies_used: frozenset[StrategyTag]
    trajectory: tuple[Board, ...] | None = None

    def to_row(self, index: int, with_trajectory: bool = False) -> dict[str, Any]:
        row: dict[str, Any] = {
            "index": index,
            "num_steps": self.num_steps,
            "strategies_used": sorted(str(tag) for tag in self.strategies_used),
        }
        if with_trajectory and self.trajectory is not None:
            row["trajectory"] = [board.to_string() for board in self.trajectory]
        return row

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> "Annotation":
        trajectory = row.get("trajectory")
        return cls(
            num_steps=int(row["num_steps"]),
            strategies_used=frozenset(StrategyTag(tag) for tag in row["strategies_used"]),
            trajectory=tuple(Board.from_string(b) for b in trajectory) if trajectory else None,
        )


# ---- Backtracking oracle ----
def _enumerate_solutions(cells: tuple[int, ...], limit: int) -> list[tuple[int, ...]]:
    """ Exhaustive search with bitmasks, minimum-remaining-values cell first, lowest index on ties """
    values = list(cells)
    rows, cols, boxes = [0] * SIZE, [0] * SIZE, [0] * SIZE
    for cell, digit in enumerate(values):
        if not digit:
            continue
        bit = 1 << digit
        r, c, b = row_of(cell), col_of(cell), box_of(cell)
        if (rows[r] | cols[c] | boxes[b]) & bit:
            return []
        rows[r] |= bit
        cols[c] |= bit
        boxes[b] |= bit

    solutions: list[tuple[int, ...]] = []

    def search() -> bool:
        best, best_mask, best_count = -1, 0, SIZE + 1
        for cell in range(N_CELLS):
            if values[cell]:
                continue
            mask = _ALL_DIGITS_MASK & ~(rows[cell // SIZE] | cols[cell % SIZE] | boxes[box_of(cell)])
            count = mask.bit_count()
            if count < best_count:
                best, best_mask, best_count = cell, mask, count
                if count == 0:
                    return False
        if best < 0:
            solutions.append(tuple(values))
            return len(solutions) >= limit
        r, c, b = row_of(best), col_of(best), box_of(best)
        for digit in range(1, SIZE + 1):
            bit = 1 << digit
            if not best_mask & bit:
                continue
            values[best] = digit
            rows[r] |= bit
            cols[c] |= bit
            boxes[b] |= bit
            done = search()
            rows[r] ^= bit
            cols[c] ^= bit
            boxes[b] ^= bit
            values[best] = 0
            if done:
                return True
        return False

    search()
    return solutions


def count_solutions(board: Board, limit: int = 2) -> int:
    return len(_enumerate_solutions(board.cells, limit))


def solve_backtracking(board: Board) -> Board | None:
    solutions = _enumerate_solutions(board.cells, 1)
    return Board(solutions[0]) if solutions else None


def _unique_solution(board: Board) -> tuple[int, ...]:
    solutions = _enumerate_solutions(board.cells, 2)
    if not solutions:
        raise UnsolvableError("Puzzle has no solution")
    if len(solutions) > 1:
        raise AmbiguityError("Puzzle has more than one solution")
    return solutions[0]


# ---- Trace solver ----
def solve_with_trace(puzzle: Board) -> tuple[Board, Annotation]:
    """
    Applies one deduction per step in fixed priority order and records every resulting board.
    When no deduction applies, the cell with the fewest candidates receives its digit from the
    unique solution and the step is tagged Backtracking.
    """
    if not check_legality(puzzle).legal:
        raise SudokuPreconditionError("Cannot solve an illegal board")

    cands: Candidates = {cell: set(digits) for cell, digits in board_candidates(puzzle).items()}
    board = puzzle
    trajectory = [puzzle]
    used: set[StrategyTag] = set()
    oracle: tuple[int, ...] | None = None

    while not board.is_complete:
        dead_end = find_contradiction(cands, board)
        if dead_end:
            raise UnsolvableError(f"Contradiction after {len(trajectory) - 1} steps: {dead_end}")

        deduction = None
        for strategy in STRATEGIES:
            deduction = strategy(board, cands)
            if deduction is not None:
                break

        if deduction is not None:
            logging.debug(f"{deduction.tag} at {deduction.key}")
            board = apply_deduction(board, cands, deduction)
            used.add(deduction.tag)
        else:
            if oracle is None:
                oracle = _unique_solution(board)
            cell = min(cands, key=lambda c: (len(cands[c]), c))
            digit = oracle[cell]
            if digit not in cands[cell]:
                raise UnsolvableError(f"Solution digit {digit} was eliminated from cell {cell}")
            logging.debug(f"Backtracking placement {digit} at cell {cell}")
            place(cands, cell, digit)
            board = board.with_values({cell: digit})
            used.add(StrategyTag.BACKTRACKING)
        trajectory.append(board)

    if not check_legality(board).legal:
        raise UnsolvableError("Solver finished on an illegal board")
    return board, Annotation(
        num_steps=len(trajectory) - 1,
        strategies_used=frozenset(used),
        trajectory=tuple(trajectory),
    )
