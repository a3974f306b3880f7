import json

import pandas as pd
import pytest
import torch

from src.config import ConfigError, EvalConfig, ModelConfig, Objective, Settings, TrainConfig
from src.model.checkpoint import load_checkpoint, save_checkpoint
from src.model.transformer import build_model
from src.sudoku.dataset import write_puzzle_file
from src.training.trainer import (
    CHECKPOINT_NAME,
    METRICS_LOG_NAME,
    TRAINER_STATE_NAME,
    VALIDATION_NAME,
    Trainer,
    TrainingDivergedError,
    build_optimizer,
    clip_gradients,
    run_training,
    warmup_schedule,
)
from tests.helpers import make_record


@pytest.fixture(scope="module")
def records():
    return [make_record(seed) for seed in range(6)]


@pytest.fixture
def dropout_config(tiny_config):
    return tiny_config.model_copy(update={"dropout": 0.1})


def _cfg(**overrides) -> TrainConfig:
    values = {"batch_size": 4, "warmup_steps": 2, "K": 2, "seed": 3}
    values.update(overrides)
    return TrainConfig(**values)


def _params(model) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in model.named_parameters()}


# ---- optimizer pieces ----
def test_weight_decay_skips_embeddings_norms_and_biases(tiny_model):
    optimizer = build_optimizer(tiny_model, _cfg())
    decay = {id(p) for p in optimizer.param_groups[0]["params"]}
    assert optimizer.param_groups[0]["weight_decay"] == pytest.approx(1e-2)
    assert optimizer.param_groups[1]["weight_decay"] == 0.0
    assert id(tiny_model.blocks[0].wq.weight) in decay
    assert id(tiny_model.blocks[1].w2.weight) in decay
    assert id(tiny_model.blocks[0].w1.bias) not in decay
    assert id(tiny_model.embedding.weight) not in decay
    assert id(tiny_model.unembedding.weight) not in decay
    assert id(tiny_model.final_norm.weight) not in decay
    assert id(tiny_model.relay_norm.bias) not in decay
    total = sum(len(group["params"]) for group in optimizer.param_groups)
    assert total == len(list(tiny_model.parameters()))


def test_warmup_is_linear_then_flat(tiny_model):
    optimizer = build_optimizer(tiny_model, _cfg(lr=1e-3))
    scheduler = warmup_schedule(optimizer, 4)
    rates = []
    for _ in range(6):
        rates.append(optimizer.param_groups[0]["lr"])
        optimizer.step()
        scheduler.step()
    assert rates == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3])


def test_clip_reports_norm_before_scaling(tiny_model):
    params = list(tiny_model.parameters())
    count = sum(p.numel() for p in params)
    for p in params:
        p.grad = torch.full_like(p, 10.0 / count ** 0.5)
    assert clip_gradients(tiny_model, 0.5) == pytest.approx(10.0, rel=1e-5)
    clipped = torch.sqrt(sum((p.grad ** 2).sum() for p in params))
    assert float(clipped) == pytest.approx(0.5, rel=1e-5)


# ---- trainer ----
def test_zero_learning_rate_keeps_weights(tiny_config, records):
    model = build_model(tiny_config, seed=0)
    before = _params(model)
    trainer = Trainer(model, _cfg(lr=0.0), records)
    metrics = trainer.train_step()
    assert metrics.step == 1 and metrics.grad_norm > 0
    for name, value in _params(model).items():
        assert torch.equal(value, before[name]), name


def test_step_updates_weights_and_carries_state(tiny_config, records):
    model = build_model(tiny_config, seed=0)
    before = _params(model)
    trainer = Trainer(model, _cfg(), records)
    trainer.train_step()
    assert any(not torch.equal(p, before[n]) for n, p in _params(model).items())
    assert not trainer.pool.h.requires_grad
    assert int(trainer.pool.seq.masked.sum()) < int((~trainer.pool.seq.clues).sum())


@pytest.mark.parametrize("objective", list(Objective))
def test_every_objective_trains(tiny_config, records, objective):
    trainer = Trainer(build_model(tiny_config, seed=0), _cfg(objective=objective), records)
    losses = [trainer.train_step().loss for _ in range(2)]
    assert all(loss > 0 for loss in losses)
    if objective is Objective.MLM:
        assert trainer.pool is None


def test_relay_objective_needs_relay_norm(tiny_config, records):
    model = build_model(tiny_config.model_copy(update={"relay_enabled": False}), seed=0)
    with pytest.raises(ConfigError):
        Trainer(model, _cfg(objective=Objective.RELAY), records)
    Trainer(model, _cfg(objective=Objective.ROLLOUT), records)


def test_runs_are_reproducible(dropout_config, records):
    runs = []
    for _ in range(2):
        trainer = Trainer(build_model(dropout_config, seed=0), _cfg(), records)
        losses = [trainer.train_step().loss for _ in range(3)]
        runs.append((losses, _params(trainer.model)))
    assert runs[0][0] == runs[1][0]
    for name, value in runs[0][1].items():
        assert torch.equal(value, runs[1][1][name]), name


def test_resume_from_checkpoint_is_bit_exact(dropout_config, records, tmp_path):
    reference = Trainer(build_model(dropout_config, seed=0), _cfg(), records)
    for _ in range(4):
        reference.train_step()

    first = Trainer(build_model(dropout_config, seed=0), _cfg(), records)
    for _ in range(2):
        first.train_step()
    save_checkpoint(first.model, tmp_path / CHECKPOINT_NAME, {"step": first.step})
    first.save_state(tmp_path / TRAINER_STATE_NAME)

    model, meta = load_checkpoint(tmp_path / CHECKPOINT_NAME, expected_config=dropout_config)
    resumed = Trainer(model, _cfg(), records)
    resumed.load_state(tmp_path / TRAINER_STATE_NAME)
    assert resumed.step == meta["step"] == 2
    for _ in range(2):
        resumed.train_step()

    expected = _params(reference.model)
    for name, value in _params(resumed.model).items():
        assert torch.equal(value, expected[name]), name
    assert torch.equal(resumed.pool.seq.tokens, reference.pool.seq.tokens)


def test_divergence_dumps_episodes(tiny_config, records, tmp_path):
    model = build_model(tiny_config, seed=0)
    with torch.no_grad():
        model.embedding.weight.fill_(float("nan"))
    trainer = Trainer(model, _cfg(), records, dump_dir=tmp_path)
    with pytest.raises(TrainingDivergedError) as info:
        trainer.train_step()
    assert info.value.dump_path == tmp_path / "diverged_step0.json"
    dump = json.loads(info.value.dump_path.read_text())
    assert dump["objective"] == "relay"
    assert len(dump["episodes"][0]["x0"]) == 81


# ---- full runs ----
def _settings(tiny_config, total_steps: int) -> Settings:
    train = _cfg(total_steps=total_steps, val_size=2, val_every=2, log_every=1, val_taus=[0.1, 0.15])
    return Settings(model=tiny_config, train=train, evaluation=EvalConfig(batch_size=8))


@pytest.fixture
def data_file(records, tmp_path):
    return write_puzzle_file(tmp_path / "puzzles.txt", records)


def test_zero_steps_writes_initial_checkpoint_only(tiny_config, data_file, tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    summary = run_training(_settings(tiny_config, 0), data_file, out)
    assert summary.step == 0 and summary.metrics_log is None
    assert sorted(p.name for p in out.iterdir()) == [CHECKPOINT_NAME, TRAINER_STATE_NAME]
    model, meta = load_checkpoint(out / CHECKPOINT_NAME)
    assert meta["step"] == 0 and meta["validation"] is None


def test_validation_must_leave_training_records(tiny_config, data_file, tmp_path):
    settings = _settings(tiny_config, 2).with_overrides(train={"val_size": 6})
    with pytest.raises(ConfigError):
        run_training(settings, data_file, tmp_path)


def test_metrics_log_layout(tiny_config, data_file, tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    summary = run_training(_settings(tiny_config, 3), data_file, out)
    text = (out / METRICS_LOG_NAME).read_text()
    assert text.splitlines()[0] == (
        "step,objective,loss,lr,grad_norm,episodes_finished,val_exact_match@0.15,val_mean_nfe@0.15"
    )
    frame = pd.read_csv(out / METRICS_LOG_NAME)
    assert frame["step"].tolist() == [1, 2, 3]
    assert frame["val_mean_nfe@0.15"].isna().tolist() == [True, False, False]
    assert (out / VALIDATION_NAME).is_file()
    assert len(summary.validation) == 2


def test_interrupted_run_resumes_to_the_same_files(tiny_config, data_file, tmp_path):
    straight, interrupted = tmp_path / "straight", tmp_path / "interrupted"
    straight.mkdir()
    interrupted.mkdir()
    run_training(_settings(tiny_config, 4), data_file, straight)
    run_training(_settings(tiny_config, 2), data_file, interrupted)
    run_training(_settings(tiny_config, 4), data_file, interrupted, resume=True)

    for name in (CHECKPOINT_NAME, METRICS_LOG_NAME, VALIDATION_NAME):
        assert (straight / name).read_bytes() == (interrupted / name).read_bytes(), name


@pytest.mark.slow
def test_mlm_learns_single_blank_completion(tmp_path):
    # one blank per puzzle: the missing digit of its row, column and box is the answer
    records = [make_record(seed, min_clues=80) for seed in range(600)]
    assert all(len(record.mutable_positions) == 1 for record in records)
    data_file = write_puzzle_file(tmp_path / "single_blank.txt", records)
    model_cfg = ModelConfig(n_layers=2, d_model=64, d_ff=256, n_heads=4, head_dim=16, rotary_width=16,
                            dropout=0.0, seq_len=81)
    train = TrainConfig(objective=Objective.MLM, batch_size=64, lr=1e-3, warmup_steps=100, total_steps=2000,
                        val_size=100, val_every=250, log_every=250, val_taus=[0.15], seed=0)
    out = tmp_path / "run"
    out.mkdir()
    run_training(Settings(model=model_cfg, train=train, evaluation=EvalConfig(batch_size=100)), data_file, out)

    frame = pd.read_csv(out / METRICS_LOG_NAME)
    assert frame["val_exact_match@0.15"].max() == 1.0
