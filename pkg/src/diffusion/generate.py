import logging
from dataclasses import dataclass, field

import torch

from src.diffusion.masking import RangeError, commit, fully_masked
from src.diffusion.policy import Normalizer, StepDecision, select_positions_batch, token_confidences
from src.model.transformer import RelayTransformer
from src.model.vocab import encode_boards
from src.sudoku.board import Board, PuzzleRecord


@dataclass(frozen=True)
class StepRecord:
    decision: StepDecision
    committed: tuple[tuple[int, int], ...]

    @property
    def selected(self) -> frozenset[int]:
        return self.decision.selected

    @property
    def fallback_used(self) -> bool:
        return self.decision.fallback_used


@dataclass
class GenerationResult:
    final_board: Board
    nfe: int
    trace: list[StepRecord] = field(default_factory=list)

    @property
    def committed(self) -> list[tuple[int, int]]:
        return [pair for step in self.trace for pair in step.committed]

    @property
    def cells_per_step(self) -> float:
        return len(self.committed) / self.nfe if self.nfe else 0.0


def _puzzle_of(item: PuzzleRecord | Board) -> Board:
    return item.puzzle if isinstance(item, PuzzleRecord) else item


@torch.no_grad()
def generate_batch(model: RelayTransformer, items: list[PuzzleRecord] | list[Board], tau: float,
                   normalizer: Normalizer = "full", use_relay: bool | None = None) -> list[GenerationResult]:
    """
    Decodes every puzzle from its clues with argmax commits and the threshold policy.
    Rows stop independently; the relay state starts at zero and follows each forward.
    `use_relay` defaults to the model config; models trained without the relay pass False.
    """
    if tau <= 0:
        raise RangeError("tau must be positive")
    if not items:
        return []
    model.eval()
    device = next(model.parameters()).device
    puzzles = [_puzzle_of(item) for item in items]
    board = encode_boards(puzzles).to(device)
    seq = fully_masked(board, board != 0)
    relay = None
    if use_relay is None:
        use_relay = model.cfg.relay_enabled
    if use_relay and not model.cfg.relay_enabled:
        raise ValueError("Relay decoding needs a model with relay_enabled = true")
    if use_relay:
        relay = torch.zeros(*board.shape, model.cfg.d_model, device=device, dtype=model.embedding.weight.dtype)

    nfe = [0] * len(puzzles)
    traces: list[list[StepRecord]] = [[] for _ in puzzles]
    while seq.masked.any():
        active = torch.nonzero(~seq.finished).squeeze(1)
        part = seq.rows(active)
        hidden, logits = model(part.tokens, relay=relay[active] if relay is not None else None)
        confidence, value = token_confidences(logits, normalizer)
        selected, fallback = select_positions_batch(confidence, part.masked, tau)
        seq = seq.with_rows(active, commit(part, selected, value))
        if relay is not None:
            relay = relay.index_copy(0, active, hidden)

        conf_cpu, masked_cpu = confidence.cpu(), part.masked.cpu()
        selected_cpu, value_cpu, fallback_cpu = selected.cpu(), value.cpu(), fallback.cpu()
        for row, index in enumerate(active.tolist()):
            positions = torch.nonzero(masked_cpu[row]).squeeze(1).tolist()
            chosen = torch.nonzero(selected_cpu[row]).squeeze(1).tolist()
            decision = StepDecision(
                confidences={p: float(conf_cpu[row, p]) for p in positions},
                selected=frozenset(chosen),
                fallback_used=bool(fallback_cpu[row]),
            )
            committed = tuple((p, int(value_cpu[row, p])) for p in chosen)
            traces[index].append(StepRecord(decision, committed))
            nfe[index] += 1

    results = []
    for row, trace in enumerate(traces):
        values = seq.tokens[row].cpu().tolist()
        results.append(GenerationResult(Board(tuple(values)), nfe[row], trace))
    logging.debug(f"Generated {len(results)} boards at tau={tau}, mean nfe {sum(nfe) / len(nfe):.2f}")
    return results


def generate(model: RelayTransformer, record: PuzzleRecord | Board, tau: float,
             normalizer: Normalizer = "full", use_relay: bool | None = None) -> GenerationResult:
    return generate_batch(model, [record], tau, normalizer, use_relay)[0]

