"""
Per-sequence cross-entropy over masked positions, normalized by the masked count.

mdm_loss carries the 1/t weight of the masked-diffusion objective, rollout_step_loss does not.
Both return a (batch,) tensor with 0 for rows whose mask is empty; callers average over the batch.
"""
import torch
import torch.nn.functional as F

from src.diffusion.masking import RangeError


def masked_cross_entropy(logits: torch.Tensor, x0: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    vocab = logits.shape[-1]
    token_loss = F.cross_entropy(logits.reshape(-1, vocab), x0.reshape(-1), reduction="none").view_as(x0)
    token_loss = torch.where(masked, token_loss, torch.zeros_like(token_loss))
    counts = masked.sum(dim=1).clamp(min=1).to(token_loss.dtype)
    return token_loss.sum(dim=1) / counts


def rollout_step_loss(logits: torch.Tensor, x0: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    return masked_cross_entropy(logits, x0, masked)


def mdm_loss(logits: torch.Tensor, x0: torch.Tensor, masked: torch.Tensor,
             t: float | torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=logits.dtype, device=logits.device)
    if t.dim() == 0:
        t = t.expand(x0.shape[0])
    if ((t <= 0) & masked.any(dim=1)).any():
        raise RangeError("mdm_loss needs t > 0 wherever the mask is nonempty")
    per_sequence = masked_cross_entropy(logits, x0, masked)
    # empty rows contribute 0 whatever their t
    return torch.where(masked.any(dim=1), per_sequence / t.clamp(min=torch.finfo(t.dtype).tiny), per_sequence)
