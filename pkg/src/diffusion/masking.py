from dataclasses import dataclass

import torch

from src.model.vocab import MASK_ID


class RangeError(ValueError):
    """ Raised when a diffusion time or threshold lies outside its domain """


class CommitError(ValueError):
    """ Raised when a commit would touch a clue or an already committed position """


@dataclass(frozen=True)
class MaskedSequence:
    """
    Batch of partially masked boards, all tensors (batch, seq):
    tokens (int64), masked (bool, holds MASK), clues (bool, fixed positions).
    """
    tokens: torch.Tensor
    masked: torch.Tensor
    clues: torch.Tensor

    def __post_init__(self):
        if (self.masked & self.clues).any():
            raise CommitError("Clue positions cannot be masked")
        if not torch.equal(self.tokens == MASK_ID, self.masked):
            raise CommitError("tokens hold MASK exactly at masked positions")

    @property
    def remaining(self) -> torch.Tensor:
        return self.masked.sum(dim=1)

    @property
    def finished(self) -> torch.Tensor:
        return ~self.masked.any(dim=1)

    def rows(self, index: torch.Tensor) -> "MaskedSequence":
        return MaskedSequence(self.tokens[index], self.masked[index], self.clues[index])

    def with_rows(self, index: torch.Tensor, part: "MaskedSequence") -> "MaskedSequence":
        """ Copy with the rows at `index` replaced """
        return MaskedSequence(
            self.tokens.index_copy(0, index, part.tokens),
            self.masked.index_copy(0, index, part.masked),
            self.clues.index_copy(0, index, part.clues),
        )


def _as_batch_times(t: float | torch.Tensor, batch: int, device) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.float64, device=device)
    if t.dim() == 0:
        t = t.expand(batch)
    if ((t < 0) | (t > 1)).any() or torch.isnan(t).any():
        raise RangeError("Diffusion time must lie in [0, 1]")
    return t


def mask_uniform(x0: torch.Tensor, t: float | torch.Tensor, clues: torch.Tensor,
                 generator: torch.Generator | None = None) -> MaskedSequence:
    """ Masks each non-clue position independently with probability t (per sequence) """
    t = _as_batch_times(t, x0.shape[0], x0.device)
    draws = torch.rand(x0.shape, generator=generator, device=x0.device, dtype=torch.float64)
    masked = (draws < t[:, None]) & ~clues
    tokens = torch.where(masked, torch.full_like(x0, MASK_ID), x0)
    return MaskedSequence(tokens, masked, clues.clone())


def fully_masked(x0: torch.Tensor, clues: torch.Tensor) -> MaskedSequence:
    """ Episode start: clues kept, everything else MASK """
    masked = ~clues
    tokens = torch.where(masked, torch.full_like(x0, MASK_ID), x0)
    return MaskedSequence(tokens, masked, clues.clone())


def commit(seq: MaskedSequence, selected: torch.Tensor, values: torch.Tensor) -> MaskedSequence:
    """ Writes `values` at `selected`; ground truth while training, predictions while generating """
    if (selected & seq.clues).any():
        raise CommitError("Selection overlaps clue positions")
    if (selected & ~seq.masked).any():
        raise CommitError("Selection contains positions that are not masked")
    if (selected & (values == MASK_ID)).any():
        raise CommitError("Cannot commit the MASK token")
    tokens = torch.where(selected, values, seq.tokens)
    return MaskedSequence(tokens, seq.masked & ~selected, seq.clues)
