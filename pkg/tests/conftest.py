import pytest
import torch

from src.config import ModelConfig
from src.model.transformer import build_model


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        n_layers=2, d_model=32, d_ff=128, n_heads=2, head_dim=16, rotary_width=16,
        dropout=0.0, seq_len=81,
    )


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0).eval()


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield
