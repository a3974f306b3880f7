import pytest
import torch
import torch.nn.functional as F

from src.config import ModelConfig
from src.model.transformer import (
    ModelConfigError,
    ModelInputError,
    NumericError,
    allocated_parameters,
    build_model,
    parameter_count,
)
from src.model.vocab import MASK_ID


@pytest.mark.parametrize(
    "relay, tied, expected",
    [(True, False, 7_106_304), (True, True, 7_099_776), (False, False, 7_105_536), (False, True, 7_099_008)],
)
def test_parameter_counts(relay, tied, expected):
    cfg = ModelConfig(relay_enabled=relay, tie_embeddings=tied)
    assert parameter_count(cfg) == expected
    assert allocated_parameters(build_model(cfg)) == expected


def test_parameter_count_differences():
    base = ModelConfig(relay_enabled=False, tie_embeddings=False)
    assert parameter_count(base) - parameter_count(base.model_copy(update={"tie_embeddings": True})) == 17 * 384
    assert parameter_count(base.model_copy(update={"relay_enabled": True})) - parameter_count(base) == 2 * 384


def test_inconsistent_dims_rejected():
    with pytest.raises(ValueError):
        ModelConfig(d_model=380)
    with pytest.raises(ValueError):
        ModelConfig(rotary_width=80)


def test_init_is_seeded(tiny_config):
    a = build_model(tiny_config, seed=3).state_dict()
    b = build_model(tiny_config, seed=3).state_dict()
    c = build_model(tiny_config, seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["embedding.weight"], c["embedding.weight"])


def test_init_values(tiny_config):
    model = build_model(tiny_config.model_copy(update={"relay_gamma_init": "zeros"}))
    assert torch.all(model.blocks[0].w1.bias == 0)
    assert torch.all(model.blocks[0].ln1.weight == 1)
    assert torch.all(model.relay_norm.weight == 0)
    assert model.embedding.weight.abs().max() <= 0.04 + 1e-7


def test_tied_model_shares_storage(tiny_config):
    model = build_model(tiny_config.model_copy(update={"tie_embeddings": True}))
    assert model.unembedding is None
    assert model.unembedding_weight is model.embedding.weight


def test_relay_transform_zero_state(tiny_model):
    h = torch.zeros(1, 81, 32)
    assert torch.equal(tiny_model.relay_transform(h), torch.zeros_like(h))


def test_relay_transform_zero_gamma_gives_beta(tiny_model):
    with torch.no_grad():
        tiny_model.relay_norm.weight.zero_()
        tiny_model.relay_norm.bias.copy_(torch.linspace(-1, 1, 32))
    out = tiny_model.relay_transform(torch.randn(2, 81, 32))
    assert torch.allclose(out, torch.linspace(-1, 1, 32).expand_as(out))


def test_relay_transform_normalizes_rows():
    model = build_model(ModelConfig()).eval()
    out = model.relay_transform(torch.randn(2, 81, 384) * 3 + 1)
    assert out.mean(-1).abs().max() < 1e-5
    assert (out.var(-1, unbiased=False) - 1).abs().max() < 1e-3


def test_relay_transform_needs_relay(tiny_config):
    model = build_model(tiny_config.model_copy(update={"relay_enabled": False}))
    with pytest.raises(ModelConfigError):
        model.relay_transform(torch.zeros(1, 81, 32))


def test_zero_relay_matches_disabled_relay(tiny_config):
    relay_model = build_model(tiny_config, seed=1).eval()
    plain = build_model(tiny_config.model_copy(update={"relay_enabled": False}), seed=1).eval()
    plain.load_state_dict(relay_model.state_dict(), strict=False)
    tokens = torch.randint(0, 11, (3, 81))
    _, with_relay = relay_model(tokens, relay=torch.zeros(3, 81, 32))
    _, without = plain(tokens)
    assert torch.equal(with_relay, without)


def test_permutation_equivariance_without_rotary(tiny_config):
    model = build_model(tiny_config.model_copy(update={"rotary_width": 0}), seed=2).eval()
    tokens = torch.randint(1, 10, (1, 81))
    tokens[0, 5] = MASK_ID
    tokens[0, 40] = MASK_ID
    tokens[0, 6] = 3
    perm = torch.arange(81)
    perm[6], perm[40] = 40, 6
    _, logits = model(tokens)
    _, permuted = model(tokens[:, perm])
    assert torch.allclose(permuted, logits[:, perm], atol=1e-5)


def test_rotary_breaks_permutation_symmetry(tiny_model):
    tokens = torch.full((1, 81), MASK_ID)
    _, logits = tiny_model(tokens)
    assert not torch.allclose(logits[0, 0], logits[0, 50], atol=1e-6)


def test_train_mode_forward_is_deterministic_given_generator(tiny_config):
    model = build_model(tiny_config.model_copy(update={"dropout": 0.1})).train()
    tokens = torch.randint(0, 11, (2, 81))
    _, first = model(tokens, generator=torch.Generator().manual_seed(5))
    _, second = model(tokens, generator=torch.Generator().manual_seed(5))
    _, other = model(tokens, generator=torch.Generator().manual_seed(6))
    assert torch.equal(first, second)
    assert not torch.equal(first, other)


def test_eval_forward_is_pure(tiny_model):
    tokens = torch.randint(0, 11, (2, 81))
    assert torch.equal(tiny_model(tokens)[1], tiny_model(tokens)[1])


def test_hidden_is_final_norm_output(tiny_model):
    hidden, logits = tiny_model(torch.randint(0, 11, (1, 81)))
    assert hidden.shape == (1, 81, 32)
    assert logits.shape == (1, 81, 17)
    assert torch.allclose(logits, hidden @ tiny_model.unembedding.weight.T, atol=1e-6)


def test_token_out_of_range(tiny_model):
    with pytest.raises(ModelInputError):
        tiny_model(torch.full((1, 81), 17))
    with pytest.raises(ModelInputError):
        tiny_model(torch.zeros(81, dtype=torch.long))


def test_non_finite_layer_is_reported(tiny_model):
    with torch.no_grad():
        tiny_model.blocks[1].w2.bias.fill_(float("inf"))
    with pytest.raises(NumericError) as info:
        tiny_model(torch.zeros(1, 81, dtype=torch.long))
    assert info.value.layer == 1


def test_tied_gradient_is_sum_of_both_paths(tiny_config):
    tied = build_model(tiny_config.model_copy(update={"tie_embeddings": True}), seed=7).double()
    untied = build_model(tiny_config, seed=7).double()
    untied.load_state_dict(tied.state_dict(), strict=False)
    with torch.no_grad():
        untied.unembedding.weight.copy_(tied.embedding.weight)
    tokens = torch.randint(0, 11, (2, 81))
    targets = torch.randint(0, 10, (2, 81))
    relay = torch.randn(2, 81, 32, dtype=torch.float64)
    for model in (tied, untied):
        _, logits = model(tokens, relay=relay)
        F.cross_entropy(logits.reshape(-1, 17), targets.reshape(-1)).backward()
    combined = untied.embedding.weight.grad + untied.unembedding.weight.grad
    assert torch.allclose(tied.embedding.weight.grad, combined, atol=1e-12)
