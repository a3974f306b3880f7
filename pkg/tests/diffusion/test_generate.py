import pytest

from src.diffusion.generate import generate, generate_batch
from src.diffusion.masking import RangeError
from src.model.transformer import build_model
from src.sudoku.board import PuzzleRecord
from tests.helpers import OracleModel, make_record, pattern_solution


def _check_trace(record: PuzzleRecord, result):
    masked = set(record.mutable_positions)
    committed = [cell for cell, _ in result.committed]
    assert len(committed) == len(set(committed))
    assert set(committed) == masked
    assert result.nfe == len(result.trace)
    remaining = set(masked)
    for step in result.trace:
        assert set(step.decision.confidences) == remaining
        assert step.selected and step.selected <= remaining
        remaining -= step.selected
    assert not remaining
    for cell in record.clue_positions:
        assert result.final_board[cell] == record.puzzle[cell]


def test_oracle_model_solves_in_few_steps():
    record = make_record(1)
    masked = len(record.mutable_positions)
    slow = generate(OracleModel(0.9985), record, tau=0.05)
    fast = generate(OracleModel(0.9985), record, tau=0.25)
    assert slow.final_board == record.solution
    assert fast.final_board == record.solution
    assert fast.nfe == 1
    # 33 cells of 0.0015 uncertainty fit under 0.05
    assert slow.nfe == -(-masked // 33)
    _check_trace(record, slow)


def test_tiny_model_trace_invariants(tiny_config):
    model = build_model(tiny_config, seed=3)
    records = [make_record(seed) for seed in range(3)]
    for record, result in zip(records, generate_batch(model, records, tau=0.15)):
        assert 1 <= result.nfe <= len(record.mutable_positions)
        _check_trace(record, result)


def test_generation_is_deterministic(tiny_config):
    model = build_model(tiny_config.model_copy(update={"dropout": 0.1}), seed=4)
    record = make_record(2)
    first = generate(model, record, tau=0.1)
    second = generate(model, record, tau=0.1)
    assert first.final_board == second.final_board
    assert first.trace == second.trace


def test_batch_matches_single_records(tiny_config):
    model = build_model(tiny_config, seed=5).double()
    records = [make_record(seed) for seed in range(4)]
    batched = generate_batch(model, records, tau=0.2)
    for record, result in zip(records, batched):
        single = generate(model, record, tau=0.2)
        assert single.final_board == result.final_board
        assert single.nfe == result.nfe


def test_solved_puzzle_needs_no_forward():
    solved = pattern_solution(0)
    model = OracleModel()
    result = generate(model, PuzzleRecord(puzzle=solved, solution=solved), tau=0.15)
    assert result.nfe == 0
    assert result.final_board == solved
    assert model.calls == 0


def test_tau_must_be_positive(tiny_model):
    with pytest.raises(RangeError):
        generate(tiny_model, make_record(0), tau=0.0)


def test_decoding_without_relay_matches_a_model_without_relay_norm(tiny_config):
    relay_model = build_model(tiny_config, seed=6).double()
    plain = build_model(tiny_config.model_copy(update={"relay_enabled": False}), seed=0).double()
    missing, unexpected = plain.load_state_dict(relay_model.state_dict(), strict=False)
    assert not missing and all(key.startswith("relay_norm.") for key in unexpected)

    records = [make_record(seed) for seed in range(3)]
    without = generate_batch(relay_model, records, tau=0.1, use_relay=False)
    for ours, theirs in zip(without, generate_batch(plain, records, tau=0.1)):
        assert ours.final_board == theirs.final_board
        assert ours.trace == theirs.trace


def test_relay_decoding_needs_a_relay_norm(tiny_config):
    plain = build_model(tiny_config.model_copy(update={"relay_enabled": False}), seed=0)
    with pytest.raises(ValueError):
        generate(plain, make_record(0), tau=0.15, use_relay=True)
