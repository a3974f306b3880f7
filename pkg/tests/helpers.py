import random

import torch
from torch import nn

from src.config import ModelConfig
from src.model.vocab import MASK_ID
from src.sudoku.board import SIZE, UNITS, Board, PuzzleRecord
from src.sudoku.solver import count_solutions, solve_backtracking


class OracleModel(nn.Module):
    """ Stands in for a trained network: puts `confidence` on the solution digit of every cell """

    def __init__(self, confidence: float = 0.9985, relay: bool = False):
        super().__init__()
        self.cfg = ModelConfig(n_layers=1, d_model=32, d_ff=32, n_heads=2, head_dim=16, rotary_width=16,
                               relay_enabled=relay, dropout=0.0)
        self.embedding = nn.Embedding(17, 32)
        self.confidence = confidence
        self.calls = 0

    def forward(self, tokens, relay=None, generator=None):
        self.calls += 1
        # remaining mass spread evenly over the other 16 ids
        other = torch.log(torch.tensor((1 - self.confidence) / (16 * self.confidence), dtype=torch.float64))
        logits = torch.full((*tokens.shape, 17), float(other), dtype=torch.float64)
        for row in range(tokens.shape[0]):
            values = [0 if v == MASK_ID else v for v in tokens[row].tolist()]
            solution = solve_backtracking(Board(tuple(values)))
            for cell, digit in enumerate(solution.cells):
                logits[row, cell, digit] = 0.0
        hidden = torch.zeros(*tokens.shape, 32)
        return hidden, logits


KNOWN_PUZZLE = "800000000003600000070090200050007000000045700000100030001000068008500010090000400"
KNOWN_SOLUTION = "812753649943682175675491283154237896369845721287169534521974368438526917796318452"


def pattern_solution(seed: int = 0) -> Board:
    """ Valid solved grid from the banded pattern, shuffled by digits, rows within bands and columns within stacks """
    rng = random.Random(seed)
    digits = list(range(1, SIZE + 1))
    rng.shuffle(digits)
    rows = [band * 3 + r for band in rng.sample(range(3), 3) for r in rng.sample(range(3), 3)]
    cols = [stack * 3 + c for stack in rng.sample(range(3), 3) for c in rng.sample(range(3), 3)]
    cells = []
    for r in rows:
        for c in cols:
            cells.append(digits[(3 * (r % 3) + r // 3 + c) % SIZE])
    return Board(tuple(cells))


def make_unique_puzzle(seed: int = 0, min_clues: int = 30) -> tuple[Board, Board]:
    """ Removes cells in a seeded order while the solution stays unique """
    rng = random.Random(seed)
    solution = pattern_solution(seed)
    values = list(solution.cells)
    order = list(range(len(values)))
    rng.shuffle(order)
    for cell in order:
        if sum(1 for v in values if v) <= min_clues:
            break
        kept = values[cell]
        values[cell] = 0
        if count_solutions(Board(tuple(values)), limit=2) != 1:
            values[cell] = kept
    return Board(tuple(values)), solution


def make_record(seed: int = 0, min_clues: int = 30) -> PuzzleRecord:
    puzzle, solution = make_unique_puzzle(seed, min_clues)
    return PuzzleRecord(puzzle=puzzle, solution=solution)


def brute_force_violations(board: Board) -> int:
    total = 0
    for unit in UNITS:
        for digit in range(1, SIZE + 1):
            occurrences = 0
            for cell in unit:
                if board[cell] == digit:
                    occurrences += 1
            if occurrences > 1:
                total += occurrences - 1
    return total


def random_board(rng: random.Random, fill: float = 0.5) -> Board:
    return Board(tuple(rng.randint(1, SIZE) if rng.random() < fill else 0 for _ in range(SIZE * SIZE)))


def corrupt(board: Board, rng: random.Random, n: int) -> Board:
    values = list(board.cells)
    for cell in rng.sample(range(len(values)), n):
        values[cell] = rng.randint(0, SIZE)
    return Board(tuple(values))
