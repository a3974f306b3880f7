import math

import pytest
import torch

from src.diffusion.losses import mdm_loss, rollout_step_loss
from src.diffusion.masking import CommitError, RangeError, commit, fully_masked, mask_uniform
from src.model.vocab import MASK_ID, encode_boards
from tests.helpers import make_unique_puzzle


@pytest.fixture
def batch():
    puzzle, solution = make_unique_puzzle(0)
    x0 = encode_boards([solution, solution])
    clues = encode_boards([puzzle, puzzle]) != 0
    return x0, clues


def test_mask_extremes(batch):
    x0, clues = batch
    none = mask_uniform(x0, 0.0, clues, torch.Generator().manual_seed(0))
    assert not none.masked.any()
    assert torch.equal(none.tokens, x0)
    everything = mask_uniform(x0, 1.0, clues, torch.Generator().manual_seed(0))
    assert torch.equal(everything.masked, ~clues)
    assert torch.all(everything.tokens[clues] == x0[clues])


def test_mask_fraction_statistics():
    x0 = torch.ones(10_000, 81, dtype=torch.long)
    clues = torch.zeros_like(x0, dtype=torch.bool)
    clues[:, :17] = True
    seq = mask_uniform(x0, 0.5, clues, torch.Generator().manual_seed(1))
    n = 10_000 * 64
    fraction = seq.masked[:, 17:].sum().item() / n
    assert abs(fraction - 0.5) < 3 * math.sqrt(0.25 / n)
    assert not seq.masked[:, :17].any()


def test_mask_time_out_of_range(batch):
    x0, clues = batch
    with pytest.raises(RangeError):
        mask_uniform(x0, 1.5, clues)
    with pytest.raises(RangeError):
        mask_uniform(x0, torch.tensor([0.2, -0.1]), clues)


def test_perfect_prediction_has_zero_loss(batch):
    x0, clues = batch
    logits = torch.full((2, 81, 17), -1e4)
    logits.scatter_(2, x0[..., None], 1e4)
    assert torch.all(mdm_loss(logits, x0, ~clues, 0.3) == 0)


def test_uniform_logits_analytic_values(batch):
    x0, clues = batch
    logits = torch.zeros(2, 81, 17, dtype=torch.float64)
    masked = mask_uniform(x0, 0.7, clues, torch.Generator().manual_seed(2)).masked
    assert torch.allclose(rollout_step_loss(logits, x0, masked), torch.full((2,), math.log(17), dtype=torch.float64),
                          atol=1e-6)
    assert torch.allclose(mdm_loss(logits, x0, masked, 0.5), torch.full((2,), 2 * math.log(17), dtype=torch.float64),
                          atol=1e-6)


def test_rollout_loss_is_t_times_mdm_loss(batch):
    x0, clues = batch
    logits = torch.randn(2, 81, 17, dtype=torch.float64)
    masked = ~clues
    for t in (0.1, 0.5, 1.0):
        assert torch.allclose(rollout_step_loss(logits, x0, masked), t * mdm_loss(logits, x0, masked, t))


def test_loss_is_permutation_invariant(batch):
    x0, clues = batch
    logits = torch.randn(2, 81, 17, dtype=torch.float64)
    perm = torch.randperm(81)
    masked = ~clues
    a = rollout_step_loss(logits, x0, masked)
    b = rollout_step_loss(logits[:, perm], x0[:, perm], masked[:, perm])
    assert torch.allclose(a, b)


def test_single_position_loss(batch):
    x0, _ = batch
    logits = torch.zeros(2, 81, 17, dtype=torch.float64)
    logits[:, 3, x0[0, 3]] = math.log(4.0)
    masked = torch.zeros(2, 81, dtype=torch.bool)
    masked[:, 3] = True
    p = 4.0 / (4.0 + 16.0)
    assert torch.allclose(rollout_step_loss(logits, x0, masked), torch.full((2,), -math.log(p), dtype=torch.float64))


def test_empty_mask_gives_zero(batch):
    x0, _ = batch
    empty = torch.zeros(2, 81, dtype=torch.bool)
    logits = torch.randn(2, 81, 17)
    assert torch.all(rollout_step_loss(logits, x0, empty) == 0)
    assert torch.all(mdm_loss(logits, x0, empty, 0.0) == 0)


def test_nonpositive_time_rejected(batch):
    x0, clues = batch
    with pytest.raises(RangeError):
        mdm_loss(torch.zeros(2, 81, 17), x0, ~clues, 0.0)


def test_commit_teacher_forcing(batch):
    x0, clues = batch
    seq = fully_masked(x0, clues)
    assert torch.all(seq.tokens[~clues] == MASK_ID)
    unchanged = commit(seq, torch.zeros_like(clues), x0)
    assert torch.equal(unchanged.tokens, seq.tokens)
    selected = seq.masked & (torch.arange(81) % 2 == 0)
    after = commit(seq, selected, x0)
    assert torch.equal(after.tokens[selected], x0[selected])
    assert torch.equal(after.masked, seq.masked & ~selected)
    assert torch.equal(after.tokens[clues], x0[clues])
    done = commit(seq, seq.masked, x0)
    assert torch.equal(done.tokens, x0)
    assert done.finished.all()


def test_commit_rejects_clues_and_committed_positions(batch):
    x0, clues = batch
    seq = fully_masked(x0, clues)
    with pytest.raises(CommitError):
        commit(seq, clues, x0)
    after = commit(seq, seq.masked, x0)
    with pytest.raises(CommitError):
        commit(after, seq.masked, x0)
