""" Token ids: 0 blank, 1-9 digits, 10 MASK, 11 PAD, 12-16 reserved """
import torch

from src.sudoku.board import N_CELLS, Board

BLANK_ID = 0
DIGIT_IDS = tuple(range(1, 10))
MASK_ID = 10
PAD_ID = 11
# ids a decoded board may hold
ALLOWED_OUTPUT_IDS = (BLANK_ID, *DIGIT_IDS)
N_ALLOWED = len(ALLOWED_OUTPUT_IDS)


def encode_board(board: Board) -> torch.Tensor:
    return torch.tensor(board.cells, dtype=torch.long)


def encode_boards(boards: list[Board]) -> torch.Tensor:
    return torch.tensor([board.cells for board in boards], dtype=torch.long).reshape(len(boards), N_CELLS)


def masked_input(puzzle: Board) -> torch.Tensor:
    """ Clues kept, every other cell MASK """
    tokens = encode_board(puzzle)
    return torch.where(tokens == BLANK_ID, torch.full_like(tokens, MASK_ID), tokens)


def decode_tokens(tokens: torch.Tensor) -> Board:
    """ MASK and special ids decode to blank cells """
    values = tokens.detach().cpu().tolist()
    return Board(tuple(v if v in DIGIT_IDS else BLANK_ID for v in values))
