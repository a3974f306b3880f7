"""
Training data streams and the pool of concurrent episodes.

Records are drawn from a per-epoch permutation that depends only on (seed, epoch), so the data
cursor is two integers and resumes exactly. Each row of an EpisodePool is one episode: a solution
x0, its partially unmasked sequence and the relay value carried from the previous window. Finished
rows are re-seeded individually at the start of the next optimizer step, so a batch mixes episodes
at different rollout depths.
"""
import logging
from typing import Any

import torch

from src.diffusion.masking import MaskedSequence, fully_masked
from src.model.vocab import encode_boards
from src.sudoku.board import PuzzleRecord


class EmptyDatasetError(ValueError):
    """ Raised when a stream is built from no records """


class RecordStream:
    def __init__(self, solutions: torch.Tensor, clue_masks: torch.Tensor, seed: int = 0,
                 device: str | torch.device = "cpu"):
        if solutions.shape[0] == 0:
            raise EmptyDatasetError("Training needs at least one record")
        self.device = torch.device(device)
        self.seed = seed
        self.solutions = solutions.to(self.device)
        self.clue_masks = clue_masks.to(self.device)
        self.epoch = 0
        self.cursor = 0
        self._order = self._permutation(self.epoch)

    @classmethod
    def from_records(cls, records: list[PuzzleRecord], seed: int = 0,
                     device: str | torch.device = "cpu") -> "RecordStream":
        if not records:
            raise EmptyDatasetError("Training needs at least one record")
        solutions = encode_boards([r.solution for r in records])
        clue_masks = encode_boards([r.puzzle for r in records]) != 0
        return cls(solutions, clue_masks, seed=seed, device=device)

    def __len__(self) -> int:
        return self.solutions.shape[0]

    @property
    def seq_len(self) -> int:
        return self.solutions.shape[1]

    def _permutation(self, epoch: int) -> torch.Tensor:
        generator = torch.Generator().manual_seed(self.seed * 1_000_003 + epoch)
        return torch.randperm(len(self), generator=generator)

    def draw(self, n: int) -> tuple[torch.Tensor, torch.Tensor]:
        """ (x0, clues) of the next n records in epoch order """
        picked = []
        for _ in range(n):
            if self.cursor == len(self):
                self.epoch += 1
                self.cursor = 0
                self._order = self._permutation(self.epoch)
                logging.debug(f"Record stream entered epoch {self.epoch}")
            picked.append(int(self._order[self.cursor]))
            self.cursor += 1
        indices = torch.tensor(picked, dtype=torch.long, device=self.device)
        return self.solutions[indices], self.clue_masks[indices]

    def state_dict(self) -> dict[str, int]:
        return {"epoch": self.epoch, "cursor": self.cursor}

    def load_state_dict(self, state: dict[str, int]) -> None:
        self.epoch = state["epoch"]
        self.cursor = state["cursor"]
        self._order = self._permutation(self.epoch)


class EpisodePool:
    def __init__(self, stream: RecordStream, batch_size: int, d_model: int, relay: bool,
                 dtype: torch.dtype = torch.float32):
        self.stream = stream
        self.batch_size = batch_size
        self.d_model = d_model
        self.dtype = dtype
        self.x0, clues = stream.draw(batch_size)
        self.seq = fully_masked(self.x0, clues)
        self.h = self._zeros(batch_size) if relay else None
        self.episodes_started = batch_size

    @property
    def device(self) -> torch.device:
        return self.stream.device

    def _zeros(self, rows: int) -> torch.Tensor:
        return torch.zeros(rows, self.stream.seq_len, self.d_model, device=self.device, dtype=self.dtype)

    def reseed_finished(self) -> int:
        """ Starts a fresh episode in every finished row: new x0, all-MASK sequence, zero relay """
        rows = torch.nonzero(self.seq.finished).squeeze(1)
        if rows.numel() == 0:
            return 0
        x0, clues = self.stream.draw(rows.numel())
        self.x0 = self.x0.index_copy(0, rows, x0)
        self.seq = self.seq.with_rows(rows, fully_masked(x0, clues))
        if self.h is not None:
            self.h = self.h.index_copy(0, rows, self._zeros(rows.numel()))
        self.episodes_started += rows.numel()
        return rows.numel()

    def carry(self, seq: MaskedSequence, h: torch.Tensor | None) -> None:
        """ Keeps the window's end state; the relay value crosses the boundary without its graph """
        self.seq = seq
        if self.h is not None and h is not None:
            self.h = h.detach()

    def episode(self, row: int) -> dict[str, Any]:
        return {
            "row": row,
            "x0": self.x0[row].tolist(),
            "tokens": self.seq.tokens[row].tolist(),
            "masked": self.seq.masked[row].tolist(),
            "clues": self.seq.clues[row].tolist(),
            "relay_norm": float(self.h[row].norm()) if self.h is not None else None,
        }

    def state_dict(self) -> dict[str, Any]:
        return {
            "x0": self.x0.cpu(),
            "tokens": self.seq.tokens.cpu(),
            "masked": self.seq.masked.cpu(),
            "clues": self.seq.clues.cpu(),
            "h": self.h.cpu() if self.h is not None else None,
            "episodes_started": self.episodes_started,
            "stream": self.stream.state_dict(),
        }

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self.x0 = state["x0"].to(self.device)
        self.seq = MaskedSequence(state["tokens"].to(self.device), state["masked"].to(self.device),
                                  state["clues"].to(self.device))
        self.h = state["h"].to(self.device, self.dtype) if state["h"] is not None else None
        self.episodes_started = state["episodes_started"]
        self.stream.load_state_dict(state["stream"])
