"""
Accuracy, NFE and legality of generated boards.

evaluate_set decodes a record list at one threshold and aggregates the per-puzzle outcomes into an
EvalReport; sweep repeats that over a threshold set and returns the rows as a FrontierTable.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass, field

from tqdm import tqdm

from src.config import DEFAULT_TAUS, Objective, Slice
from src.diffusion.generate import GenerationResult, StepRecord, generate_batch
from src.diffusion.masking import RangeError
from src.diffusion.policy import Normalizer
from src.metrics import PrometheusLocalRegistry
from src.model.transformer import RelayTransformer
from src.sudoku.board import SIZE, UNITS, UNITS_OF, Board, PuzzleRecord, check_legality
from src.sudoku.dataset import MissingAnnotationError
from src.sudoku.strategies import Tier, hardest_tier


class EmptyEvaluationSetError(ValueError):
    """ Raised when an evaluation is requested on no records """


class ReplayError(ValueError):
    """ Raised when a generation trace cannot be replayed onto its clue board """


class DuplicateRowError(ValueError):
    """ Raised when a frontier table would hold the same (objective, tied, slice, tau) twice """


@dataclass(frozen=True)
class RunLabels:
    """ Identifies the run a report belongs to """
    objective: str = Objective.RELAY.value
    tied: bool = False
    slice: str = Slice.UNFILTERED.value
    seed: int = 0


@dataclass(frozen=True)
class EvalReport:
    objective: str
    tied: bool
    slice: str
    tau: float
    n: int
    exact_match: float
    mean_nfe: float
    legal_final_rate: float
    mean_rollout_violations: float
    seed: int
    # JSON-only column, not part of a row's identity
    mean_cells_per_step: float = field(default=0.0, compare=False)

    @property
    def key(self) -> tuple[str, bool, str, float]:
        return self.objective, self.tied, self.slice, self.tau


@dataclass
class FrontierTable:
    rows: list[EvalReport] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.key in seen:
                raise DuplicateRowError(f"Duplicate frontier row {row.key}")
            seen.add(row.key)
        self.rows = sorted(self.rows, key=lambda r: (r.objective, r.tied, r.slice, r.tau))

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, tau: float, slice: str | None = None) -> EvalReport:
        for r in self.rows:
            if abs(r.tau - tau) < 1e-9 and (slice is None or r.slice == slice):
                return r
        raise KeyError(f"No row at tau={tau}")

    def merged(self, other: "FrontierTable") -> "FrontierTable":
        return FrontierTable(self.rows + other.rows)


def rollout_violations(trace: list[StepRecord], clues: Board) -> int:
    """
    Replays the commits in order onto the clue board. A committed digit that already occurs in
    one of its units adds 1 per such unit.
    """
    values = list(clues.cells)
    written: set[int] = set()
    total = 0
    for step_index, step in enumerate(trace):
        for cell, digit in step.committed:
            if not (0 <= cell < len(values)) or not (0 <= digit <= SIZE):
                raise ReplayError(f"Step {step_index}: invalid commit ({cell}, {digit})")
            if values[cell] != 0 or cell in written:
                raise ReplayError(f"Step {step_index}: cell {cell} is already filled")
            if digit:
                for unit in UNITS_OF[cell]:
                    if any(values[peer] == digit for peer in UNITS[unit]):
                        total += 1
            # a committed blank stays empty on the replay board
            values[cell] = digit
            written.add(cell)
    return total


def summarize(results: list[GenerationResult], records: list[PuzzleRecord], tau: float,
              labels: RunLabels) -> EvalReport:
    if not records:
        raise EmptyEvaluationSetError("No records to evaluate")
    exact = legal = violations = nfe = committed = 0
    for result, record in zip(results, records, strict=True):
        exact += result.final_board == record.solution
        legal += check_legality(result.final_board).legal
        violations += rollout_violations(result.trace, record.puzzle)
        nfe += result.nfe
        committed += len(result.committed)
    n = len(records)
    return EvalReport(
        objective=labels.objective,
        tied=labels.tied,
        slice=labels.slice,
        tau=tau,
        n=n,
        exact_match=exact / n,
        mean_nfe=nfe / n,
        legal_final_rate=legal / n,
        mean_rollout_violations=violations / n,
        seed=labels.seed,
        mean_cells_per_step=committed / nfe if nfe else 0.0,
    )


def generate_all(model: RelayTransformer, records: list[PuzzleRecord], tau: float, batch_size: int = 256,
                 normalizer: Normalizer = "full", use_relay: bool | None = None) -> list[GenerationResult]:
    results: list[GenerationResult] = []
    batches = range(0, len(records), batch_size)
    for start in tqdm(batches, desc=f"tau={tau:.2f}", disable=None, leave=False):
        results.extend(generate_batch(model, records[start:start + batch_size], tau, normalizer, use_relay))
    for result in results:
        PrometheusLocalRegistry.observe("generation_nfe", result.nfe, {"tau": f"{tau:.2f}"})
    return results


def evaluate_set(model: RelayTransformer, records: list[PuzzleRecord], tau: float,
                 labels: RunLabels | None = None, batch_size: int = 256,
                 normalizer: Normalizer = "full", use_relay: bool | None = None) -> EvalReport:
    """ Records are taken as given, in order; slicing is the caller's job """
    if not records:
        raise EmptyEvaluationSetError("No records to evaluate")
    labels = labels or RunLabels()
    results = generate_all(model, records, tau, batch_size, normalizer, use_relay)
    report = summarize(results, records, tau, labels)
    logging.info(f"Evaluated {report.n} records at tau={tau:.2f} ({labels.slice}): "
                 f"exact match {report.exact_match:.4f}, mean nfe {report.mean_nfe:.2f}")
    return report


def sweep(model: RelayTransformer, records: list[PuzzleRecord], taus: list[float] | tuple[float, ...] = DEFAULT_TAUS,
          labels: RunLabels | None = None, batch_size: int = 256,
          normalizer: Normalizer = "full", use_relay: bool | None = None) -> FrontierTable:
    if not taus or any(tau <= 0 for tau in taus):
        raise RangeError("Sweep thresholds must be a nonempty set of positive values")
    labels = labels or RunLabels()
    return FrontierTable([
        evaluate_set(model, records, tau, labels, batch_size, normalizer, use_relay) for tau in sorted(set(taus))
    ])


def tier_breakdown(results: list[GenerationResult], records: list[PuzzleRecord], tau: float,
                   labels: RunLabels | None = None) -> dict[Tier, EvalReport]:
    """ One report per hardest strategy tier of the records' annotations """
    labels = labels or RunLabels()
    groups: dict[Tier, list[int]] = defaultdict(list)
    for position, record in enumerate(records):
        if record.annotation is None:
            raise MissingAnnotationError(f"Record at position {position} has no annotation")
        groups[hardest_tier(record.annotation.strategies_used)].append(position)
    return {
        tier: summarize([results[i] for i in positions], [records[i] for i in positions], tau, labels)
        for tier, positions in sorted(groups.items())
    }
