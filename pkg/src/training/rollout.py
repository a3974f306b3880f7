"""
Teacher-forced rollout windows and the single-pass MLM step.

A window runs up to K policy steps on every unfinished episode of the pool. Each step forwards the
current tokens (plus the relay input chosen by the objective), adds the masked cross-entropy of that
step, picks positions with the threshold policy on detached confidences and commits the ground-truth
values there. The window loss is the sum over steps, averaged over the batch.

Relay input per objective:
    rollout   no relay term
    relay_sg  previous hidden state, gradient severed
    relay     previous hidden state, gradient kept (BPTT inside the window)
"""
from dataclasses import dataclass, field
from typing import Any

import torch

from src.config import Objective, TrainConfig
from src.diffusion.losses import mdm_loss, rollout_step_loss
from src.diffusion.masking import MaskedSequence, commit, mask_uniform
from src.diffusion.policy import select_positions_batch, token_confidences
from src.model.transformer import RelayTransformer
from src.training.episodes import EpisodePool

TAU_MIN = 0.01
TAU_MAX = 0.99


@dataclass
class RolloutGenerators:
    """ Separate random streams so that changing one consumer never shifts another """
    threshold: torch.Generator
    dropout: torch.Generator
    masking: torch.Generator

    @classmethod
    def from_seed(cls, seed: int, device: str | torch.device = "cpu") -> "RolloutGenerators":
        return cls(
            threshold=torch.Generator(device=device).manual_seed(seed),
            dropout=torch.Generator(device=device).manual_seed(seed + 1),
            masking=torch.Generator(device=device).manual_seed(seed + 2),
        )

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name).get_state() for name in ("threshold", "dropout", "masking")}

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        for name, value in state.items():
            getattr(self, name).set_state(value)


@dataclass
class WindowStep:
    """ One inner step; per-episode tensors cover the whole batch, inactive rows are all False """
    active: torch.Tensor
    masked: torch.Tensor
    selected: torch.Tensor
    tau: torch.Tensor
    loss: torch.Tensor
    # relay value fed into the step (whole batch, detached), None without a relay
    relay: torch.Tensor | None = None

    def committed(self, x0: torch.Tensor, row: int) -> list[tuple[int, int]]:
        cells = torch.nonzero(self.selected[row]).squeeze(1).tolist()
        return [(cell, int(x0[row, cell])) for cell in cells]


@dataclass
class WindowResult:
    loss: torch.Tensor
    per_episode: torch.Tensor
    steps: list[WindowStep] = field(default_factory=list)
    seq: MaskedSequence | None = None
    h: torch.Tensor | None = None
    finished: int = 0

    @property
    def selections(self) -> list[torch.Tensor]:
        """ The discrete decisions of the window, for replaying it as a fixed function of the weights """
        return [step.selected for step in self.steps]


def sample_thresholds(cfg: TrainConfig, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    device = generator.device if generator is not None else None
    draws = cfg.threshold_mean + cfg.threshold_std * torch.randn(n, generator=generator, dtype=torch.float64,
                                                                  device=device)
    return draws.clamp(TAU_MIN, TAU_MAX)


def sample_threshold(cfg: TrainConfig, generator: torch.Generator | None = None) -> float:
    return float(sample_thresholds(cfg, 1, generator)[0])


def _relay_input(objective: Objective, h: torch.Tensor | None, rows: torch.Tensor) -> torch.Tensor | None:
    if h is None or not objective.uses_relay:
        return None
    if objective is Objective.RELAY_SG:
        return h[rows].detach()
    return h[rows]


def rollout_window(model: RelayTransformer, pool: EpisodePool, objective: Objective, K: int, cfg: TrainConfig,
                   generators: RolloutGenerators, selections: list[torch.Tensor] | None = None,
                   carry: bool = True, relay_inputs: list[torch.Tensor] | None = None) -> WindowResult:
    """
    Unrolls up to K steps on the pool. With `selections` the policy is skipped and the given
    positions are committed instead, which makes the loss a deterministic function of the weights.
    `relay_inputs` replaces the relay input of every step with a recorded constant (stop-gradient
    replay). With `carry` the end state is written back to the pool.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if objective is Objective.MLM:
        raise ValueError("The MLM objective has no rollout window, use mlm_step")
    if objective.uses_relay and pool.h is None:
        raise ValueError(f"Objective {objective} needs a pool that carries relay state")

    x0 = pool.x0
    seq = pool.seq
    h = pool.h
    batch = x0.shape[0]
    total = torch.zeros(batch, dtype=torch.float64, device=x0.device)
    started = seq.finished.clone()
    window_tau = sample_thresholds(cfg, batch, generators.threshold) if cfg.threshold_per_window else None
    steps: list[WindowStep] = []

    for k in range(K):
        active = ~seq.finished
        if not active.any():
            break
        rows = torch.nonzero(active).squeeze(1)
        part = seq.rows(rows)
        if relay_inputs is not None and objective is Objective.RELAY_SG:
            relay_in = relay_inputs[k][rows]
        else:
            relay_in = _relay_input(objective, h, rows)
        fed = h.detach() if objective.uses_relay else None
        hidden, logits = model(part.tokens, relay=relay_in, generator=generators.dropout)
        step_loss = rollout_step_loss(logits, x0[rows], part.masked)
        total = total.index_add(0, rows, step_loss.to(total.dtype))

        tau = window_tau if window_tau is not None else sample_thresholds(cfg, batch, generators.threshold)
        if selections is None:
            confidence, _ = token_confidences(logits.detach())
            chosen, _ = select_positions_batch(confidence, part.masked, tau[rows])
        else:
            chosen = selections[k][rows]
        seq = seq.with_rows(rows, commit(part, chosen, x0[rows]))
        if objective.uses_relay:
            h = h.index_copy(0, rows, hidden.to(h.dtype))

        selected = torch.zeros_like(seq.masked)
        selected[rows] = chosen
        masked = torch.zeros_like(seq.masked)
        masked[rows] = part.masked
        per_step = torch.zeros(batch, dtype=torch.float64, device=x0.device)
        per_step[rows] = step_loss.detach().to(torch.float64)
        steps.append(WindowStep(active=active, masked=masked, selected=selected, tau=tau, loss=per_step, relay=fed))

    finished = int((seq.finished & ~started).sum())
    result = WindowResult(loss=total.mean(), per_episode=total.detach(), steps=steps, seq=seq, h=h,
                          finished=finished)
    if carry:
        pool.carry(seq, h)
    return result


@dataclass
class MlmBatch:
    x0: torch.Tensor
    seq: MaskedSequence
    t: torch.Tensor


def mlm_step(model: RelayTransformer, x0: torch.Tensor, clues: torch.Tensor, cfg: TrainConfig,
             generators: RolloutGenerators, frozen: MlmBatch | None = None) -> tuple[torch.Tensor, MlmBatch]:
    """
    One forward on a uniformly masked batch, t ~ U(floor, 1) per sequence, no relay term.
    `frozen` replays a previous draw of t and mask.
    """
    if frozen is None:
        u = torch.rand(x0.shape[0], generator=generators.masking, dtype=torch.float64, device=x0.device)
        t = cfg.mlm_time_floor + (1.0 - cfg.mlm_time_floor) * u
        batch = MlmBatch(x0, mask_uniform(x0, t, clues, generators.masking), t)
    else:
        batch = frozen
    _, logits = model(batch.seq.tokens, generator=generators.dropout)
    loss = mdm_loss(logits, batch.x0, batch.seq.masked, batch.t.to(logits.dtype))
    return loss.mean(), batch


def describe_window(result: WindowResult, x0: torch.Tensor, row: int) -> list[dict[str, Any]]:
    """ Per-step trace of one episode: masked count, selection, step loss and committed pairs """
    trace = []
    for step in result.steps:
        if not bool(step.active[row]):
            continue
        trace.append({
            "masked": int(step.masked[row].sum()),
            "selected": torch.nonzero(step.selected[row]).squeeze(1).tolist(),
            "tau": float(step.tau[row]),
            "loss": float(step.loss[row]),
            "committed": step.committed(x0, row),
        })
    return trace
