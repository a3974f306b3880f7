"""
Sudoku board representation, legality checking and puzzle record I/O.

A board is a flat sequence of 81 values, 0 for a blank cell and 1-9 for digits. Cell i sits at
row i // 9, column i % 9 and box 3 * (row // 3) + col // 3.
"""
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from src.sudoku.solver import Annotation

SIZE = 9
N_CELLS = SIZE * SIZE
DIGITS = frozenset(range(1, SIZE + 1))
BLANK_CHARS = frozenset("0.")


class BoardFormatError(ValueError):
    """ Raised on malformed board text or values """


class ConsistencyError(ValueError):
    """ Raised when a solution is illegal, incomplete or contradicts its clues """


class SudokuPreconditionError(ValueError):
    """ Raised when an operation receives a board it is not defined for """


def row_of(cell: int) -> int:
    return cell // SIZE


def col_of(cell: int) -> int:
    return cell % SIZE


def box_of(cell: int) -> int:
    return 3 * (row_of(cell) // 3) + col_of(cell) // 3


ROWS: tuple[tuple[int, ...], ...] = tuple(tuple(r * SIZE + c for c in range(SIZE)) for r in range(SIZE))
COLS: tuple[tuple[int, ...], ...] = tuple(tuple(r * SIZE + c for r in range(SIZE)) for c in range(SIZE))
BOXES: tuple[tuple[int, ...], ...] = tuple(
    tuple(cell for cell in range(N_CELLS) if box_of(cell) == b) for b in range(SIZE)
)
# 27 units: rows, then columns, then boxes
UNITS: tuple[tuple[int, ...], ...] = ROWS + COLS + BOXES
UNITS_OF: tuple[tuple[int, int, int], ...] = tuple(
    (row_of(cell), SIZE + col_of(cell), 2 * SIZE + box_of(cell)) for cell in range(N_CELLS)
)
PEERS: tuple[frozenset[int], ...] = tuple(
    frozenset(c for u in UNITS_OF[cell] for c in UNITS[u]) - {cell} for cell in range(N_CELLS)
)
_UNIT_INDEX = np.array(UNITS, dtype=np.int64)


@dataclass(frozen=True, slots=True)
class Board:
    cells: tuple[int, ...]

    def __post_init__(self):
        if len(self.cells) != N_CELLS:
            raise BoardFormatError(f"Board must have {N_CELLS} cells, got {len(self.cells)}")
        if any(not isinstance(v, int) or not (0 <= v <= SIZE) for v in self.cells):
            raise BoardFormatError("Board values must be integers in 0..9")

    @classmethod
    def from_string(cls, text: str) -> "Board":
        text = text.strip()
        if len(text) != N_CELLS:
            raise BoardFormatError(f"Board field must be {N_CELLS} characters, got {len(text)}")
        values = []
        for ch in text:
            if ch in BLANK_CHARS:
                values.append(0)
            elif ch in "123456789":
                values.append(int(ch))
            else:
                raise BoardFormatError(f"Illegal board character {ch!r}")
        return cls(tuple(values))

    @classmethod
    def empty(cls) -> "Board":
        return cls((0,) * N_CELLS)

    def to_string(self) -> str:
        return "".join(str(v) for v in self.cells)

    def __getitem__(self, cell: int) -> int:
        return self.cells[cell]

    def with_values(self, placements: dict[int, int]) -> "Board":
        values = list(self.cells)
        for cell, digit in placements.items():
            values[cell] = digit
        return Board(tuple(values))

    @property
    def filled_count(self) -> int:
        return sum(1 for v in self.cells if v)

    @property
    def blanks(self) -> list[int]:
        return [i for i, v in enumerate(self.cells) if v == 0]

    @property
    def is_complete(self) -> bool:
        return all(self.cells)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.cells, dtype=np.int64)


@dataclass(frozen=True, slots=True)
class LegalityReport:
    legal: bool
    violations: int


def unit_digit_counts(board: Board) -> np.ndarray:
    """ (27, 10) occurrence counts per unit and value, column 0 counts blanks """
    values = board.as_array()[_UNIT_INDEX]
    counts = np.zeros((len(UNITS), SIZE + 1), dtype=np.int64)
    np.add.at(counts, (np.arange(len(UNITS))[:, None], values), 1)
    return counts


def check_legality(board: Board) -> LegalityReport:
    # k copies of a digit in a unit count as k - 1 violations
    counts = unit_digit_counts(board)[:, 1:]
    violations = int(np.clip(counts - 1, 0, None).sum())
    return LegalityReport(legal=violations == 0, violations=violations)


def candidates(board: Board) -> dict[int, frozenset[int]]:
    """ Digits not yet present in the row, column or box of every blank cell """
    if not check_legality(board).legal:
        raise SudokuPreconditionError("Candidates are only defined for legal boards")
    result: dict[int, frozenset[int]] = {}
    for cell in board.blanks:
        seen = {board[p] for p in PEERS[cell]}
        result[cell] = DIGITS - seen
    return result


@dataclass
class PuzzleRecord:
    puzzle: Board
    solution: Board
    annotation: "Annotation | None" = None
    clue_positions: frozenset[int] = field(init=False)

    def __post_init__(self):
        self.clue_positions = frozenset(i for i, v in enumerate(self.puzzle.cells) if v)

    @property
    def mutable_positions(self) -> tuple[int, ...]:
        return tuple(i for i in range(N_CELLS) if i not in self.clue_positions)


def validate_solution(puzzle: Board, solution: Board) -> None:
    if not solution.is_complete:
        raise ConsistencyError("Solution has blank cells")
    report = check_legality(solution)
    if not report.legal:
        raise ConsistencyError(f"Solution is illegal ({report.violations} violations)")
    for cell, value in enumerate(puzzle.cells):
        if value and solution[cell] != value:
            raise ConsistencyError(f"Solution contradicts clue at cell {cell}")


def parse_record(line: str) -> PuzzleRecord:
    fields = line.strip().split(",")
    if len(fields) != 2:
        raise BoardFormatError(f"Expected two comma-separated fields, got {len(fields)}")
    puzzle = Board.from_string(fields[0])
    solution = Board.from_string(fields[1])
    validate_solution(puzzle, solution)
    return PuzzleRecord(puzzle=puzzle, solution=solution)


def serialize_record(record: PuzzleRecord) -> str:
    return f"{record.puzzle.to_string()},{record.solution.to_string()}"
