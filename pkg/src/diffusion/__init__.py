""" Masking, losses, the threshold policy and the decoding loop """

from .generate import GenerationResult, StepRecord, generate, generate_batch
from .losses import mdm_loss, rollout_step_loss
from .masking import CommitError, MaskedSequence, RangeError, commit, fully_masked, mask_uniform
from .policy import NoMaskedPositionsError, StepDecision, select_positions, select_positions_batch, token_confidences

__all__ = [
    "GenerationResult", "StepRecord", "generate", "generate_batch",
    "mdm_loss", "rollout_step_loss",
    "CommitError", "MaskedSequence", "RangeError", "commit", "fully_masked", "mask_uniform",
    "NoMaskedPositionsError", "StepDecision", "select_positions", "select_positions_batch", "token_confidences",
]
