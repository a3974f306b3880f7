"""
Puzzle files, annotation sidecars and cohort selection.

Puzzle file: one `<puzzle81>,<solution81>` record per line, '#' lines ignored.
Sidecar: one JSON object per line keyed by the 0-based line index of the puzzle file.
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

from tqdm import tqdm

from src.io_utils import atomic_write_text
from src.metrics import PrometheusLocalRegistry
from src.sudoku.board import BoardFormatError, ConsistencyError, PuzzleRecord, parse_record, serialize_record
from src.sudoku.solver import AmbiguityError, Annotation, UnsolvableError, solve_with_trace
from src.sudoku.strategies import StrategyTag, Tier, strategy_tier

ANNOTATE_FLUSH_EVERY = 1000


class MissingAnnotationError(ValueError):
    """ Raised when a cohort is requested over records without solver annotations """


class SidecarFormatError(ValueError):
    """ Raised on an unreadable annotation sidecar line """


@dataclass(frozen=True)
class PuzzleLine:
    index: int
    record: PuzzleRecord | None
    error: str | None = None


@dataclass(frozen=True)
class AnnotateSummary:
    total: int
    annotated: int
    reused: int
    skipped: int


def sidecar_path_for(puzzle_path: Path) -> Path:
    return puzzle_path.with_name(f"{puzzle_path.stem}.annotations.jsonl")


# ---- Puzzle files ----
def iter_puzzle_lines(path: Path) -> Iterator[PuzzleLine]:
    with path.open("r", encoding="utf-8") as f:
        for index, raw in enumerate(f):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                yield PuzzleLine(index, parse_record(line))
            except (BoardFormatError, ConsistencyError) as e:
                yield PuzzleLine(index, None, str(e))


def read_puzzle_file(path: Path) -> list[PuzzleLine]:
    return list(iter_puzzle_lines(path))


def load_records(path: Path, annotations: Path | None = None, limit: int | None = None) -> list[PuzzleRecord]:
    """ Well-formed records in file order, malformed lines are logged and dropped """
    records: list[PuzzleRecord] = []
    indices: list[int] = []
    for item in iter_puzzle_lines(path):
        if item.record is None:
            logging.warning(f"{path}:{item.index + 1}: skipped malformed record ({item.error})")
            continue
        records.append(item.record)
        indices.append(item.index)
        if limit is not None and len(records) >= limit:
            break
    if annotations is not None:
        attach_annotations(records, read_annotations(annotations), indices)
    logging.info(f"Loaded {len(records)} records from {path}")
    return records


def write_puzzle_file(path: Path, records: Iterable[PuzzleRecord]) -> Path:
    body = "".join(f"{serialize_record(record)}\n" for record in records)
    return atomic_write_text(path, body)


# ---- Annotation sidecars ----
def read_annotations(path: Path) -> dict[int, Annotation]:
    rows: dict[int, Annotation] = {}
    with path.open("r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                row = json.loads(raw)
                rows[int(row["index"])] = Annotation.from_row(row)
            except (ValueError, KeyError, TypeError) as e:
                raise SidecarFormatError(f"{path}:{line_no}: {e}") from e
    return rows


def write_annotations(path: Path, rows: dict[int, Annotation], with_trajectory: bool = False) -> Path:
    body = "".join(
        json.dumps(rows[index].to_row(index, with_trajectory)) + "\n" for index in sorted(rows)
    )
    return atomic_write_text(path, body)


def attach_annotations(records: list[PuzzleRecord], rows: dict[int, Annotation],
                       indices: list[int] | None = None) -> list[PuzzleRecord]:
    """ Joins by puzzle-file line index, records without a row keep annotation None """
    indices = indices if indices is not None else list(range(len(records)))
    for record, index in zip(records, indices, strict=True):
        record.annotation = rows.get(index)
    return records


def _annotate_one(job: tuple[int, str, bool]) -> tuple[int, dict[str, Any] | None, str | None]:
    index, line, with_trajectory = job
    try:
        record = parse_record(line)
        solution, annotation = solve_with_trace(record.puzzle)
    except (BoardFormatError, ConsistencyError, UnsolvableError, AmbiguityError) as e:
        return index, None, f"{type(e).__name__}: {e}"
    if solution != record.solution:
        return index, None, "solver result disagrees with the stored solution"
    return index, annotation.to_row(index, with_trajectory), None


def _write_sidecar_rows(out_path: Path, rows: dict[int, dict[str, Any]]) -> None:
    body = "".join(json.dumps(rows[index]) + "\n" for index in sorted(rows))
    atomic_write_text(out_path, body)


def annotate_file(in_path: Path, out_path: Path, workers: int = 1, with_trajectory: bool = False,
                  flush_every: int = ANNOTATE_FLUSH_EVERY) -> AnnotateSummary:
    """
    Solves every record with the trace solver and writes the sidecar.
    Indices already present in an existing sidecar are kept and not solved again.
    The sidecar is rewritten every `flush_every` collected records, so an interrupted run resumes.
    """
    if flush_every <= 0:
        raise ValueError("flush_every must be positive")
    existing: dict[int, dict[str, Any]] = {}
    if out_path.is_file():
        for raw in out_path.read_text(encoding="utf-8").splitlines():
            try:
                row = json.loads(raw)
                existing[int(row["index"])] = row
            except (ValueError, KeyError, TypeError):
                logging.warning(f"Dropping unreadable sidecar line in {out_path}")
        logging.info(f"Resuming annotation: {len(existing)} records already annotated")

    jobs: list[tuple[int, str, bool]] = []
    total = 0
    with in_path.open("r", encoding="utf-8") as f:
        for index, raw in enumerate(f):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            total += 1
            if index not in existing:
                jobs.append((index, line, with_trajectory))

    rows = dict(existing)
    progress = tqdm(total=len(jobs), desc="annotate", unit="puzzle", disable=None)

    def flush() -> None:
        _write_sidecar_rows(out_path, rows)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            # map yields in job order, so every flush holds a prefix of the remaining work
            results = pool.map(_annotate_one, jobs, chunksize=max(1, min(flush_every, len(jobs) // (workers * 8))))
            skipped = _collect(results, rows, progress, flush, flush_every)
    else:
        skipped = _collect(map(_annotate_one, jobs), rows, progress, flush, flush_every)
    progress.close()

    flush()
    summary = AnnotateSummary(total=total, annotated=len(jobs) - skipped, reused=len(existing), skipped=skipped)
    logging.info(f"Annotation finished: {summary}")
    return summary


def _collect(results: Iterable[tuple[int, dict[str, Any] | None, str | None]],
             rows: dict[int, dict[str, Any]], progress: tqdm, flush: Callable[[], None], flush_every: int) -> int:
    skipped = 0
    for collected, (index, row, error) in enumerate(results, start=1):
        progress.update(1)
        if row is None:
            skipped += 1
            logging.warning(f"Line {index + 1}: skipped ({error})")
            PrometheusLocalRegistry.inc("records_skipped")
        else:
            rows[index] = row
            PrometheusLocalRegistry.inc("records_annotated")
            for tag in row["strategies_used"]:
                PrometheusLocalRegistry.inc("strategy_used", {"strategy": tag})
        if collected % flush_every == 0:
            flush()
            logging.debug(f"Sidecar flushed after {collected} records")
    return skipped


# ---- Cohorts ----
_DEDUCTION_TIERS = {Tier.ADVANCED, Tier.MASTER}


def is_deduction_only(annotation: Annotation) -> bool:
    tiers = {strategy_tier(tag) for tag in annotation.strategies_used}
    return bool(tiers & _DEDUCTION_TIERS) and StrategyTag.BACKTRACKING not in annotation.strategies_used


def is_basic_only(annotation: Annotation) -> bool:
    return all(strategy_tier(tag) == Tier.BASIC for tag in annotation.strategies_used)


def _select(records: Iterable[PuzzleRecord], n: int | None, keep) -> list[PuzzleRecord]:
    kept: list[PuzzleRecord] = []
    for position, record in enumerate(records):
        if record.annotation is None:
            raise MissingAnnotationError(f"Record at position {position} has no annotation")
        if keep(record.annotation):
            kept.append(record)
            if n is not None and len(kept) >= n:
                break
    return kept


def cohort_filter(records: Iterable[PuzzleRecord], n: int | None = 2000) -> list[PuzzleRecord]:
    """ First n records solvable with Advanced or Master strategies and no backtracking """
    return _select(records, n, is_deduction_only)


def basic_only_filter(records: Iterable[PuzzleRecord], n: int | None = None) -> list[PuzzleRecord]:
    return _select(records, n, is_basic_only)


def write_cohort(path: Path, records: list[PuzzleRecord]) -> tuple[Path, Path]:
    """ Writes the puzzles and a sidecar re-indexed to the new file """
    write_puzzle_file(path, records)
    rows = {index: record.annotation for index, record in enumerate(records) if record.annotation is not None}
    sidecar = write_annotations(sidecar_path_for(path), rows)
    return path, sidecar
