"""
Optimizer loop, validation cadence, checkpoints and resumption.

One Trainer owns the model, the AdamW optimizer with its warmup schedule, the random streams and
the episode pool. Everything it needs to continue a run is in `state_dict()`; together with the
model checkpoint that is enough to resume bit-exactly.
"""
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from src.config import ConfigError, Objective, Settings, TrainConfig
from src.evaluation.evaluate import FrontierTable, RunLabels, sweep
from src.evaluation.report import emit_report
from src.io_utils import atomic_write_bytes, atomic_write_text
from src.metrics import PrometheusLocalRegistry
from src.model.checkpoint import load_checkpoint, save_checkpoint
from src.model.transformer import NumericError, RelayTransformer, build_model
from src.sudoku.board import PuzzleRecord
from src.sudoku.dataset import load_records
from src.training.episodes import EpisodePool, RecordStream
from src.training.rollout import RolloutGenerators, mlm_step, rollout_window

CHECKPOINT_NAME = "checkpoint.rmdm"
TRAINER_STATE_NAME = "trainer_state.pt"
METRICS_LOG_NAME = "metrics.csv"
VALIDATION_NAME = "validation.csv"
VAL_TAU = 0.15
METRICS_COLUMNS = [
    "step", "objective", "loss", "lr", "grad_norm", "episodes_finished",
    f"val_exact_match@{VAL_TAU}", f"val_mean_nfe@{VAL_TAU}",
]


class TrainingDivergedError(RuntimeError):
    """ Raised when the loss or the gradient stops being finite """

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass(frozen=True)
class StepMetrics:
    step: int
    objective: str
    loss: float
    lr: float
    grad_norm: float
    episodes_finished: int


@dataclass(frozen=True)
class TrainingSummary:
    step: int
    checkpoint: Path
    metrics_log: Path | None
    validation: FrontierTable | None


def build_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    """ Weight decay on matrices only; biases, norms and the (un)embeddings are not decayed """
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.dim() >= 2 and not name.startswith(("embedding", "unembedding")):
            decay.append(p)
        else:
            no_decay.append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)


def warmup_schedule(optimizer: torch.optim.Optimizer, warmup_steps: int) -> torch.optim.lr_scheduler.LambdaLR:
    """ Linear warmup to the peak rate, constant afterwards """
    def factor(step: int) -> float:
        if warmup_steps == 0:
            return 1.0
        return min(1.0, (step + 1) / warmup_steps)
    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def clip_gradients(model: nn.Module, max_norm: float) -> float:
    """ Scales gradients to a global norm of at most max_norm, returns the norm before clipping """
    return float(torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm))


class Trainer:
    def __init__(self, model: RelayTransformer, cfg: TrainConfig, records: list[PuzzleRecord],
                 dump_dir: Path | None = None):
        if cfg.objective.uses_relay and not model.cfg.relay_enabled:
            raise ConfigError(f"Objective {cfg.objective} needs relay_enabled = true")
        self.model = model
        self.cfg = cfg
        self.objective = cfg.objective
        self.dump_dir = dump_dir
        self.optimizer = build_optimizer(model, cfg)
        self.scheduler = warmup_schedule(self.optimizer, cfg.warmup_steps)
        self.generators = RolloutGenerators.from_seed(cfg.seed, cfg.device)
        self.stream = RecordStream.from_records(records, seed=cfg.seed, device=cfg.device)
        self.pool: EpisodePool | None = None
        if self.objective is not Objective.MLM:
            self.pool = EpisodePool(self.stream, cfg.batch_size, model.cfg.d_model, relay=self.objective.uses_relay,
                                    dtype=model.embedding.weight.dtype)
        self.step = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def _diverged(self, reason: str, per_episode: torch.Tensor | None) -> TrainingDivergedError:
        rows: list[int] = []
        if per_episode is not None:
            rows = torch.nonzero(~torch.isfinite(per_episode)).squeeze(1).tolist()
        dump = {
            "step": self.step,
            "objective": self.objective.value,
            "reason": reason,
            "episodes": [self.pool.episode(row) for row in (rows or [0])] if self.pool is not None else [],
        }
        path = None
        if self.dump_dir is not None:
            path = atomic_write_text(self.dump_dir / f"diverged_step{self.step}.json",
                                     json.dumps(dump, indent=2, sort_keys=True))
        logging.error(f"Training diverged at step {self.step}: {reason}" + (f", episode dump {path}" if path else ""))
        return TrainingDivergedError(f"Training diverged at step {self.step}: {reason}", path)

    def train_step(self) -> StepMetrics:
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        result = None
        per_episode = None
        try:
            if self.objective is Objective.MLM:
                x0, clues = self.stream.draw(self.cfg.batch_size)
                loss, _ = mlm_step(self.model, x0, clues, self.cfg, self.generators)
                finished = 0
            else:
                self.pool.reseed_finished()
                result = rollout_window(self.model, self.pool, self.objective, self.cfg.K, self.cfg,
                                        self.generators, carry=False)
                loss, per_episode, finished = result.loss, result.per_episode, result.finished
        except NumericError as e:
            raise self._diverged(str(e), None) from e

        if not torch.isfinite(loss):
            raise self._diverged(f"loss is {loss.item()}", per_episode)
        loss.backward()
        grad_norm = clip_gradients(self.model, self.cfg.grad_clip)
        if not math.isfinite(grad_norm):
            raise self._diverged(f"gradient norm is {grad_norm}", per_episode)
        lr = self.lr
        self.optimizer.step()
        self.scheduler.step()
        if result is not None:
            # truncation: the carried relay keeps its value, not its graph
            self.pool.carry(result.seq, result.h)
        self.step += 1

        PrometheusLocalRegistry.inc("optimizer_steps", {"objective": self.objective.value})
        if finished:
            PrometheusLocalRegistry.inc("episodes_finished", {"objective": self.objective.value}, finished)
        return StepMetrics(self.step, self.objective.value, float(loss.item()), lr, grad_norm, finished)

    def state_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "generators": self.generators.state_dict(),
            "stream": self.stream.state_dict(),
            "pool": self.pool.state_dict() if self.pool is not None else None,
        }

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self.step = state["step"]
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.generators.load_state_dict(state["generators"])
        self.stream.load_state_dict(state["stream"])
        if self.pool is not None:
            self.pool.load_state_dict(state["pool"])

    def save_state(self, path: Path) -> Path:
        buffer = io.BytesIO()
        torch.save(self.state_dict(), buffer)
        return atomic_write_bytes(path, buffer.getvalue())

    def load_state(self, path: Path) -> None:
        self.load_state_dict(torch.load(path, map_location="cpu", weights_only=False))


# ---- Metrics log ----
class MetricsLog:
    """ CSV of logged steps, rewritten atomically on every append """

    def __init__(self, path: Path):
        self.path = path
        self.rows: list[dict[str, Any]] = []

    def append(self, metrics: StepMetrics, validation: tuple[float, float] | None) -> None:
        row = asdict(metrics)
        exact, nfe = validation if validation is not None else (float("nan"), float("nan"))
        row[METRICS_COLUMNS[-2]] = exact
        row[METRICS_COLUMNS[-1]] = nfe
        self.rows.append(row)
        self.flush()

    def flush(self) -> None:
        frame = pd.DataFrame(self.rows, columns=METRICS_COLUMNS)
        atomic_write_text(self.path, frame.to_csv(index=False, float_format="%.6f", lineterminator="\n"))

    def truncate(self, step: int) -> None:
        """ Keeps the rows up to `step`, read back from an earlier run """
        if not self.path.is_file():
            return
        frame = pd.read_csv(self.path)
        self.rows = frame[frame["step"] <= step].to_dict(orient="records")
        self.flush()


def _split_validation(records: list[PuzzleRecord], cfg: TrainConfig) -> tuple[list[PuzzleRecord], list[PuzzleRecord]]:
    if cfg.val_data is not None:
        return records, load_records(cfg.val_data, limit=cfg.val_size)
    if len(records) <= cfg.val_size:
        raise ConfigError(f"val_size = {cfg.val_size} leaves no training records out of {len(records)}")
    return records[cfg.val_size:], records[:cfg.val_size]


def validate(model: RelayTransformer, records: list[PuzzleRecord], settings: Settings) -> FrontierTable:
    labels = RunLabels(objective=settings.train.objective.value, tied=settings.model.tie_embeddings,
                       seed=settings.train.seed)
    return sweep(model, records, settings.train.val_taus, labels, batch_size=settings.evaluation.batch_size,
                 use_relay=settings.train.objective.uses_relay)


def _validation_row(table: FrontierTable) -> tuple[float, float] | None:
    try:
        row = table.row(VAL_TAU)
    except KeyError:
        return None
    return row.exact_match, row.mean_nfe


def _checkpoint(trainer: Trainer, out_dir: Path, settings: Settings,
                last_val: tuple[float, float] | None = None) -> Path:
    meta = {"objective": trainer.objective.value, "step": trainer.step, "seed": settings.train.seed,
            "validation": list(last_val) if last_val is not None else None}
    path = save_checkpoint(trainer.model, out_dir / CHECKPOINT_NAME, meta)
    trainer.save_state(out_dir / TRAINER_STATE_NAME)
    logging.info(f"Saved checkpoint at step {trainer.step} to {path}")
    return path


def run_training(settings: Settings, data_path: Path, out_dir: Path, annotations: Path | None = None,
                 resume: bool = False) -> TrainingSummary:
    cfg = settings.train
    records = load_records(data_path, annotations)
    train_records, val_records = _split_validation(records, cfg)
    logging.info(f"Training {cfg.objective} (K={cfg.K}) on {len(train_records)} records, "
                 f"validating on {len(val_records)}")

    checkpoint_path = out_dir / CHECKPOINT_NAME
    if resume:
        model, meta = load_checkpoint(checkpoint_path, expected_config=settings.model)
    else:
        model = build_model(settings.model, seed=cfg.seed)
    model = model.to(cfg.device)
    trainer = Trainer(model, cfg, train_records, dump_dir=out_dir)
    log = MetricsLog(out_dir / METRICS_LOG_NAME)

    if resume:
        trainer.load_state(out_dir / TRAINER_STATE_NAME)
        if trainer.step != meta.get("step"):
            raise ConfigError(f"Trainer state at step {trainer.step} does not match checkpoint step {meta.get('step')}")
        log.truncate(trainer.step)
        logging.info(f"Resumed from step {trainer.step}")
    else:
        _checkpoint(trainer, out_dir, settings)

    validation: FrontierTable | None = None
    last_val: tuple[float, float] | None = None
    if resume and meta.get("validation") is not None:
        last_val = tuple(meta["validation"])
    progress = tqdm(total=cfg.total_steps, initial=trainer.step, desc=f"train {cfg.objective}", disable=None)
    while trainer.step < cfg.total_steps:
        metrics = trainer.train_step()
        progress.update(1)
        if trainer.step % cfg.val_every == 0 or trainer.step == cfg.total_steps:
            validation = validate(model, val_records, settings)
            emit_report(validation, out_dir / VALIDATION_NAME)
            last_val = _validation_row(validation)
            _checkpoint(trainer, out_dir, settings, last_val)
        if trainer.step % cfg.log_every == 0 or trainer.step == cfg.total_steps:
            log.append(metrics, last_val)
            logging.info(f"step {metrics.step}: loss {metrics.loss:.4f}, lr {metrics.lr:.2e}, "
                         f"grad norm {metrics.grad_norm:.3f}")
    progress.close()

    return TrainingSummary(
        step=trainer.step,
        checkpoint=checkpoint_path,
        metrics_log=log.path if log.rows else None,
        validation=validation,
    )
