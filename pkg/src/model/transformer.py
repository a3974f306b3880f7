"""
Pre-norm rotary transformer with an additive relay input.

forward(tokens, relay) computes
    x = E[tokens] + LN_relay(relay)        (relay term only when a relay is passed)
    hidden = final_norm(blocks(x))
    logits = hidden @ U                    (U shares storage with E when tied)
and returns (hidden, logits); `hidden` is the next relay value.
"""
import math

import torch
import torch.nn.functional as F
from torch import nn

from src.config import ModelConfig

LN_EPS = 1e-5
ROPE_BASE = 10_000.0
INIT_STD = 0.02


class ModelConfigError(ValueError):
    """ Raised when an operation needs a component the configuration does not allocate """


class ModelInputError(ValueError):
    """ Raised on token ids or shapes the model cannot consume """


class NumericError(RuntimeError):
    """ Raised when activations stop being finite """

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


def _dropout(x: torch.Tensor, p: float, active: bool, generator: torch.Generator | None) -> torch.Tensor:
    """ Inverted dropout drawing its mask from `generator` """
    if not active or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, device=x.device, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


class RotaryEmbedding(nn.Module):
    """ Interleaved-pair rotation of the leading `width` dims by absolute position """

    def __init__(self, width: int, max_len: int, base: float = ROPE_BASE):
        super().__init__()
        self.width = width
        inv_freq = base ** (-torch.arange(0, width, 2, dtype=torch.float64) / max(width, 1))
        angles = torch.arange(max_len, dtype=torch.float64)[:, None] * inv_freq[None, :]
        self.register_buffer("cos", angles.cos().float(), persistent=False)
        self.register_buffer("sin", angles.sin().float(), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (batch, heads, seq, head_dim)
        if self.width == 0:
            return x
        seq = x.shape[-2]
        rotated, rest = x[..., :self.width], x[..., self.width:]
        even, odd = rotated[..., 0::2], rotated[..., 1::2]
        cos, sin = self.cos[:seq].to(x.dtype), self.sin[:seq].to(x.dtype)
        out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1).flatten(-2)
        return torch.cat((out, rest), dim=-1)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, rotary: RotaryEmbedding):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.dropout = cfg.dropout
        self.rotary = rotary
        self.ln1 = nn.LayerNorm(d, eps=LN_EPS)
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d, eps=LN_EPS)
        self.w1 = nn.Linear(d, cfg.d_ff)
        self.w2 = nn.Linear(cfg.d_ff, d)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, seq, _ = x.shape
        return x.view(batch, seq, self.n_heads, self.head_dim).transpose(1, 2)

    def attention(self, x: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
        batch, seq, d = x.shape
        q = self.rotary(self._heads(self.wq(x)))
        k = self.rotary(self._heads(self.wk(x)))
        v = self._heads(self.wv(x))
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        weights = _dropout(weights, self.dropout, self.training, generator)
        out = (weights @ v).transpose(1, 2).reshape(batch, seq, d)
        return _dropout(self.wo(out), self.dropout, self.training, generator)

    def mlp(self, x: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
        return _dropout(self.w2(F.relu(self.w1(x))), self.dropout, self.training, generator)

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        x = x + self.attention(self.ln1(x), generator)
        return x + self.mlp(self.ln2(x), generator)


class RelayTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.d_model)
        rotary = RotaryEmbedding(cfg.rotary_width, cfg.seq_len)
        self.blocks = nn.ModuleList(Block(cfg, rotary) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
        self.relay_norm = nn.LayerNorm(cfg.d_model, eps=LN_EPS) if cfg.relay_enabled else None
        self.unembedding = None if cfg.tie_embeddings else nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    @property
    def unembedding_weight(self) -> torch.Tensor:
        """ (vocab, d_model), the embedding matrix itself when tied """
        return self.embedding.weight if self.unembedding is None else self.unembedding.weight

    def relay_transform(self, h: torch.Tensor) -> torch.Tensor:
        if self.relay_norm is None:
            raise ModelConfigError("relay_transform needs relay_enabled = true")
        return self.relay_norm(h)

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.dtype != torch.long:
            raise ModelInputError(f"Token ids must be int64, got {tokens.dtype}")
        if tokens.dim() != 2:
            raise ModelInputError(f"Expected (batch, seq) token ids, got shape {tuple(tokens.shape)}")
        if tokens.shape[1] > self.cfg.seq_len:
            raise ModelInputError(f"Sequence length {tokens.shape[1]} exceeds {self.cfg.seq_len}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise ModelInputError(f"Token ids must lie in [0, {self.cfg.vocab_size})")

    def forward(self, tokens: torch.Tensor, relay: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_tokens(tokens)
        x = self.embedding(tokens)
        if relay is not None:
            if relay.shape != x.shape:
                raise ModelInputError(f"Relay shape {tuple(relay.shape)} does not match {tuple(x.shape)}")
            if not torch.isfinite(relay).all():
                raise NumericError("Relay state is not finite")
            x = x + self.relay_transform(relay)
        for index, block in enumerate(self.blocks):
            x = block(x, generator)
            if not torch.isfinite(x).all():
                raise NumericError(f"Non-finite activations after layer {index}", layer=index)
        hidden = self.final_norm(x)
        logits = F.linear(hidden, self.unembedding_weight)
        return hidden, logits


def init_parameters(model: RelayTransformer, seed: int) -> RelayTransformer:
    """ Truncated normal (2 sigma) matrices, zero biases, unit norms; relay scale per config """
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD,
                                      generator=generator)
                if getattr(module, "bias", None) is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        if model.relay_norm is not None and model.cfg.relay_gamma_init == "zeros":
            nn.init.zeros_(model.relay_norm.weight)
    return model


def build_model(cfg: ModelConfig, seed: int = 0) -> RelayTransformer:
    return init_parameters(RelayTransformer(cfg), seed)


def parameter_count(cfg: ModelConfig) -> int:
    d, ff = cfg.d_model, cfg.d_ff
    per_layer = 4 * d * d + 2 * d * ff + ff + d + 2 * (2 * d)
    embeddings = cfg.vocab_size * d * (1 if cfg.tie_embeddings else 2)
    relay = 2 * d if cfg.relay_enabled else 0
    return cfg.n_layers * per_layer + 2 * d + embeddings + relay


def allocated_parameters(model: nn.Module) -> int:
    """ Scalars actually allocated; a tied matrix is counted once """
    return sum(p.numel() for p in model.parameters())
