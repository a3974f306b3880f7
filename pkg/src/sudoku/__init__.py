""" Board arithmetic, the strategy solver and dataset plumbing """

from .board import (
    Board,
    BoardFormatError,
    ConsistencyError,
    LegalityReport,
    PuzzleRecord,
    SudokuPreconditionError,
    candidates,
    check_legality,
    parse_record,
    serialize_record,
)
from .dataset import (
    MissingAnnotationError,
    annotate_file,
    basic_only_filter,
    cohort_filter,
    load_records,
    read_annotations,
    read_puzzle_file,
    write_annotations,
)
from .solver import AmbiguityError, Annotation, UnsolvableError, count_solutions, solve_backtracking, solve_with_trace
from .strategies import StrategyTag, Tier, hardest_tier, strategy_tier

__all__ = [
    "Board", "BoardFormatError", "ConsistencyError", "LegalityReport", "PuzzleRecord", "SudokuPreconditionError",
    "candidates", "check_legality", "parse_record", "serialize_record",
    "MissingAnnotationError", "annotate_file", "basic_only_filter", "cohort_filter", "load_records",
    "read_annotations", "read_puzzle_file", "write_annotations",
    "AmbiguityError", "Annotation", "UnsolvableError", "count_solutions", "solve_backtracking", "solve_with_trace",
    "StrategyTag", "Tier", "hardest_tier", "strategy_tier",
]
