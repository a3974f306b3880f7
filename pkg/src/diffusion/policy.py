"""
Confidence-threshold unmasking policy.

Masked positions are sorted by uncertainty 1 - c (lower index first on ties) and the longest prefix
whose running uncertainty sum stays strictly below tau is committed. An empty prefix falls back to
the single most confident position, so every step makes progress.
"""
from dataclasses import dataclass
from typing import Literal

import torch

from src.model.vocab import N_ALLOWED

Normalizer = Literal["full", "allowed"]


class NoMaskedPositionsError(ValueError):
    """ Raised when a policy step is requested for a fully unmasked sequence """


@dataclass(frozen=True)
class StepDecision:
    confidences: dict[int, float]
    selected: frozenset[int]
    fallback_used: bool


def select_positions(confidences: dict[int, float], tau: float) -> StepDecision:
    if not confidences:
        raise NoMaskedPositionsError("No masked positions to select from")
    order = sorted(confidences, key=lambda i: (1.0 - confidences[i], i))
    selected = []
    running = 0.0
    for index in order:
        running += 1.0 - confidences[index]
        if not running < tau:
            break
        selected.append(index)
    fallback = not selected
    if fallback:
        selected = [order[0]]
    return StepDecision(dict(confidences), frozenset(selected), fallback)


def select_positions_batch(confidences: torch.Tensor, masked: torch.Tensor,
                           tau: float | torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """
    confidences, masked: (batch, seq); tau: scalar or (batch,).
    Returns selected (batch, seq) bool and fallback_used (batch,) bool; rows without masked
    positions select nothing.
    """
    batch, seq = confidences.shape
    tau = torch.as_tensor(tau, dtype=torch.float64, device=confidences.device)
    if tau.dim() == 0:
        tau = tau.expand(batch)
    uncertainty = torch.where(masked, 1.0 - confidences.to(torch.float64), torch.inf)
    sorted_uncertainty, order = torch.sort(uncertainty, dim=1, stable=True)
    keep_sorted = torch.cumsum(sorted_uncertainty, dim=1) < tau[:, None]
    has_masked = masked.any(dim=1)
    fallback = has_masked & ~keep_sorted[:, 0]
    keep_sorted[:, 0] |= fallback
    selected = torch.zeros(batch, seq, dtype=torch.int8, device=confidences.device)
    selected = selected.scatter(1, order, keep_sorted.to(torch.int8)).bool() & masked
    return selected, fallback


def token_confidences(logits: torch.Tensor, normalizer: Normalizer = "full") -> tuple[torch.Tensor, torch.Tensor]:
    """
    Confidence and value per position. The value is the argmax over blank and digits only;
    `full` normalizes over the whole vocabulary, `allowed` over blank and digits.
    """
    logits = logits.to(torch.float64)
    if normalizer == "full":
        probs = torch.softmax(logits, dim=-1)[..., :N_ALLOWED]
    elif normalizer == "allowed":
        probs = torch.softmax(logits[..., :N_ALLOWED], dim=-1)
    else:
        raise ValueError(f"Unknown normalizer {normalizer!r}")
    confidence, value = probs.max(dim=-1)
    return confidence, value
