"""
Finite-difference verification of the rollout gradients.

The rollout is drawn once and its position decisions are frozen, so the window loss becomes a
deterministic function of the weights. For relay_sg the relay inputs of the drawn window are frozen
too: the stop-gradient loss treats them as constants, so the perturbed evaluations must as well.
The analytic gradient is compared to central differences on a parameter subsample that touches
every parameter tensor. For K = 2 the relay gradient is also split into its two parts: the
stop-gradient window gradient plus the vector-Jacobian product of the first hidden state with the
adjoint dL_1/dh_1.

The loss is piecewise smooth: a perturbation that moves any MLP pre-activation across the ReLU kink
makes the difference quotient meaningless. Such coordinates (and adjoint directions) are replaced by
fresh draws.
"""
import copy
import logging
import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from src.config import ModelConfig, Objective, TrainConfig
from src.model.transformer import RelayTransformer, build_model
from src.training.episodes import EpisodePool, RecordStream
from src.training.rollout import MlmBatch, RolloutGenerators, mlm_step, rollout_window

GRADCHECK_TOLERANCE = 1e-4
FD_STEP = 1e-4
DENOMINATOR_FLOOR = 1e-8
REINIT_STD = 0.2
MAX_REDRAWS = 20


class GradCheckError(RuntimeError):
    """ Raised when the frozen loss is not a deterministic function of the weights """


@dataclass(frozen=True)
class GradCheckReport:
    objective: Objective
    K: int
    coordinates: int
    max_relative_error: float
    worst_parameter: str
    bptt_error: float | None = None
    adjoint_error: float | None = None
    kink_skips: int = 0

    @property
    def passed(self) -> bool:
        errors = [self.max_relative_error, self.bptt_error or 0.0, self.adjoint_error or 0.0]
        return all(e < GRADCHECK_TOLERANCE for e in errors)


def tiny_config(tied: bool = False) -> ModelConfig:
    return ModelConfig(n_layers=2, d_model=32, d_ff=64, n_heads=2, head_dim=16, rotary_width=16, dropout=0.0,
                       tie_embeddings=tied, relay_enabled=True, relay_gamma_init="ones", seq_len=16)


def relative_error(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a, b = a.to(torch.float64), b.to(torch.float64)
    return (a - b).abs() / torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, DENOMINATOR_FLOOR))


class ReluPattern:
    """ Records which side of the ReLU kink every MLP pre-activation falls on during one evaluation """

    def __init__(self, model: RelayTransformer):
        self.model = model
        self.signs: list[torch.Tensor] = []
        self._handles: list = []

    def _record(self, module: nn.Module, inputs, output: torch.Tensor) -> None:
        self.signs.append(output.detach() > 0)

    def __enter__(self) -> "ReluPattern":
        self.signs = []
        self._handles = [block.w1.register_forward_hook(self._record) for block in self.model.blocks]
        return self

    def __exit__(self, *exc) -> None:
        for handle in self._handles:
            handle.remove()
        self._handles = []

    def matches(self, other: "ReluPattern") -> bool:
        return len(self.signs) == len(other.signs) and all(torch.equal(a, b) for a, b in zip(self.signs, other.signs))


def _traced(model: RelayTransformer, fn: Callable[[], torch.Tensor]) -> tuple[torch.Tensor, ReluPattern]:
    with ReluPattern(model) as pattern:
        value = fn()
    return value, pattern


def central_difference(model: RelayTransformer, fn: Callable[[float], torch.Tensor], step: float,
                       reference: ReluPattern) -> float | None:
    """
    Fourth-order central difference of fn at 0; None when one of the four evaluation points lands
    on another ReLU piece than the reference evaluation.
    """
    values = {}
    for offset in (-2, -1, 1, 2):
        value, pattern = _traced(model, lambda: fn(offset * step))
        if not pattern.matches(reference):
            return None
        values[offset] = value.item()
    return (8 * (values[1] - values[-1]) - (values[2] - values[-2])) / (12 * step)


def _reinit(model: RelayTransformer, generator: torch.Generator) -> None:
    # larger weights than the training init keep gradients well above roundoff
    with torch.no_grad():
        for module in model.modules():
            for name, p in module.named_parameters(recurse=False):
                noise = torch.randn(p.shape, generator=generator, dtype=p.dtype) * REINIT_STD
                scale = isinstance(module, nn.LayerNorm) and name == "weight"
                p.copy_(1.0 + noise if scale else noise)


def _synthetic_pool(cfg: ModelConfig, batch: int, seed: int) -> EpisodePool:
    generator = torch.Generator().manual_seed(seed)
    solutions = torch.randint(1, 10, (batch * 2, cfg.seq_len), generator=generator)
    clues = torch.rand(batch * 2, cfg.seq_len, generator=generator) < 0.35
    stream = RecordStream(solutions, clues, seed=seed)
    return EpisodePool(stream, batch, cfg.d_model, relay=True, dtype=torch.float64)


def _gradients(model: RelayTransformer, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads)}


def _quotas(model: RelayTransformer, n: int) -> dict[str, int]:
    """ At least two entries per tensor, the rest proportional to tensor size """
    sizes = {name: p.numel() for name, p in model.named_parameters()}
    total = sum(sizes.values())
    return {name: min(size, max(2, math.ceil(n * size / total))) for name, size in sizes.items()}


class FrozenWindow:
    """ The window loss with every discrete decision fixed, as a function of the current weights """

    def __init__(self, model: RelayTransformer, pool: EpisodePool, objective: Objective, K: int,
                 train_cfg: TrainConfig, seed: int):
        self.model = model
        self.pool = pool
        self.objective = objective
        self.K = K
        self.train_cfg = train_cfg
        self.seed = seed
        generators = RolloutGenerators.from_seed(seed)
        self.mlm: MlmBatch | None = None
        self.selections: list[torch.Tensor] | None = None
        self.relay_inputs: list[torch.Tensor] | None = None
        with torch.no_grad():
            if objective is Objective.MLM:
                x0, clues = pool.stream.draw(pool.batch_size)
                _, self.mlm = mlm_step(model, x0, clues, train_cfg, generators)
            else:
                drawn = rollout_window(model, pool, objective, K, train_cfg, generators, carry=False)
                self.selections = drawn.selections
                if objective.uses_relay:
                    self.relay_inputs = [step.relay for step in drawn.steps]

    def loss(self, objective: Objective | None = None, K: int | None = None) -> torch.Tensor:
        objective = objective or self.objective
        generators = RolloutGenerators.from_seed(self.seed)
        if objective is Objective.MLM:
            loss, _ = mlm_step(self.model, self.mlm.x0, self.mlm.seq.clues, self.train_cfg, generators,
                               frozen=self.mlm)
            return loss
        relay_inputs = self.relay_inputs if objective is Objective.RELAY_SG else None
        return rollout_window(self.model, self.pool, objective, K or self.K, self.train_cfg, generators,
                              selections=self.selections, carry=False, relay_inputs=relay_inputs).loss


def finite_difference_check(model: RelayTransformer, window: FrozenWindow, n_coordinates: int,
                            generator: torch.Generator, step: float = FD_STEP) -> tuple[float, str, int, int]:
    """ Returns (max relative error, worst entry, checked coordinates, coordinates redrawn at a kink) """
    base, reference = _traced(model, window.loss)
    if window.loss().item() != base.item():
        raise GradCheckError("Frozen window loss changed between two identical evaluations")
    analytic = _gradients(model, base)
    params = dict(model.named_parameters())
    worst, worst_name = 0.0, ""
    checked = skipped = 0
    with torch.no_grad():
        for name, quota in _quotas(model, n_coordinates).items():
            flat = params[name].view(-1)
            accepted = 0
            for index in torch.randperm(flat.numel(), generator=generator).tolist():
                if accepted == quota:
                    break
                original = flat[index].item()

                def shifted(delta: float) -> torch.Tensor:
                    flat[index] = original + delta
                    return window.loss()

                numeric = central_difference(model, shifted, step, reference)
                flat[index] = original
                if numeric is None:
                    skipped += 1
                    continue
                accepted += 1
                error = float(relative_error(analytic[name].view(-1)[index], torch.tensor(numeric)))
                if error > worst:
                    worst, worst_name = error, f"{name}[{index}]"
            checked += accepted
    return worst, worst_name, checked, skipped


def bptt_decomposition(model: RelayTransformer, window: FrozenWindow,
                       generator: torch.Generator, directions: int = 4, step: float = FD_STEP) -> tuple[float, float]:
    """
    Checks grad(relay) - grad(relay_sg) == vjp(h_1, dL_1/dh_1) for a two-step window.
    Returns (max relative error of the decomposition, max relative error along the adjoint directions).
    """
    full = _gradients(model, window.loss(Objective.RELAY, 2))
    severed = _gradients(model, window.loss(Objective.RELAY_SG, 2))

    generators = RolloutGenerators.from_seed(window.seed)
    first = rollout_window(model, window.pool, Objective.RELAY, 1, window.train_cfg, generators,
                           selections=window.selections[:1], carry=False)
    h1 = first.h
    second_pool = copy.copy(window.pool)
    second_pool.seq = first.seq
    h_leaf = h1.detach().requires_grad_(True)
    second_pool.h = h_leaf

    def second_loss(h: torch.Tensor) -> torch.Tensor:
        second_pool.h = h
        return rollout_window(model, second_pool, Objective.RELAY, 1, window.train_cfg,
                              RolloutGenerators.from_seed(window.seed), selections=window.selections[1:],
                              carry=False).loss

    second, reference = _traced(model, lambda: second_loss(h_leaf))
    (adjoint,) = torch.autograd.grad(second, h_leaf)
    names, params = zip(*model.named_parameters())
    vjp = torch.autograd.grad(h1, params, grad_outputs=adjoint, allow_unused=True)

    decomposition = 0.0
    for name, p, term in zip(names, params, vjp):
        term = term if term is not None else torch.zeros_like(p)
        decomposition = max(decomposition, float(relative_error(full[name] - severed[name], term).max()))

    adjoint_error = 0.0
    accepted = 0
    with torch.no_grad():
        for _ in range(directions * MAX_REDRAWS):
            if accepted == directions:
                break
            direction = torch.randn(h1.shape, generator=generator, dtype=h1.dtype)
            numeric = central_difference(model, lambda delta: second_loss(h_leaf + delta * direction), step,
                                         reference)
            if numeric is None:
                continue
            accepted += 1
            expected = (adjoint * direction).sum()
            adjoint_error = max(adjoint_error, float(relative_error(expected, torch.tensor(numeric))))
    if accepted < directions:
        raise GradCheckError(f"Only {accepted} of {directions} adjoint directions stayed on one ReLU piece")
    return decomposition, adjoint_error


def grad_check(objective: Objective, K: int, seed: int = 0, n_coordinates: int = 256, batch: int = 3,
               tied: bool = False) -> GradCheckReport:
    cfg = tiny_config(tied)
    model = build_model(cfg, seed).double()
    generator = torch.Generator().manual_seed(seed)
    _reinit(model, generator)
    model.eval()
    train_cfg = TrainConfig(objective=objective, K=K, batch_size=batch, seed=seed)
    K = train_cfg.K

    pool = _synthetic_pool(cfg, batch, seed)
    if objective is not Objective.MLM:
        # one unfrozen window first so the checked window starts from a nonzero relay state
        with torch.no_grad():
            rollout_window(model, pool, Objective.RELAY, 1, train_cfg, RolloutGenerators.from_seed(seed + 7))

    window = FrozenWindow(model, pool, objective, K, train_cfg, seed)
    worst, worst_name, n, skipped = finite_difference_check(model, window, n_coordinates, generator)
    bptt_error = adjoint_error = None
    if objective in (Objective.RELAY, Objective.RELAY_SG) and K == 2:
        bptt_error, adjoint_error = bptt_decomposition(model, window, generator)

    report = GradCheckReport(objective, K, n, worst, worst_name, bptt_error, adjoint_error, skipped)
    logging.info(f"gradcheck objective={objective} K={K}: max relative error {worst:.3e} at {worst_name} "
                 f"over {n} coordinates ({skipped} redrawn at a ReLU kink)")
    if bptt_error is not None:
        logging.info(f"gradcheck BPTT decomposition error {bptt_error:.3e}, adjoint error {adjoint_error:.3e}")
    return report
