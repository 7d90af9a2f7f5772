"""Emotional mapper: a multi-modal transformer that turns emotional requests
into semantic representations, modulated by key semantic features.

Public tensors use the ``(batch, channels, tokens)`` layout. Attention runs
internally on ``(batch, tokens, channels)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError
from .text import batch_tokenize


@dataclass
class MapperConfig:
    depth: int = 4
    heads: int = 4
    semantic_channels: int = 64  # C^s
    request_channels: int = 32  # C^t
    max_len: int = 16  # N^l
    eps_norm: float = 1e-5

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.semantic_channels % self.heads:
            raise ConfigurationError("semantic_channels must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


class SemanticEncoder(nn.Module):
    """Frozen-by-default text encoder for text semantics and response embeddings.

    Stand-in for a CLIP text tower: token embedding, learned positions and one
    transformer layer, all drawn from a seeded generator. Padding positions
    are zeroed in the output.
    """

    def __init__(self, vocab_size: int = 4096, channels: int = 64, max_len: int = 16, seed: int = 1234,
                 trainable: bool = False):
        super().__init__()
        self.vocab_size, self.channels, self.max_len = vocab_size, channels, max_len
        gen = torch.Generator().manual_seed(seed)
        self.token = nn.Embedding(vocab_size, channels)
        self.position = nn.Parameter(torch.zeros(max_len, channels))
        self.layer = nn.TransformerEncoderLayer(channels, 4, dim_feedforward=2 * channels, dropout=0.0,
                                                batch_first=True, norm_first=True)
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[-1]))
                else:
                    p.zero_()
            self.token.weight.mul_(math.sqrt(channels))  # unit-scale embeddings
            self.position.copy_(0.3 * torch.randn(self.position.shape, generator=gen))
            for mod in self.modules():
                if isinstance(mod, nn.LayerNorm):
                    mod.weight.fill_(1.0)
        if not trainable:
            self.requires_grad_(False)
            self.eval()

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.token(ids) + self.position[: ids.shape[1]]
        x = self.layer(x, src_key_padding_mask=~mask)
        x = x * mask.unsqueeze(-1).to(x.dtype)
        return x.transpose(1, 2)

    def encode(self, texts: Sequence[str]) -> torch.Tensor:
        ids, mask = batch_tokenize(texts, self.max_len, self.vocab_size)
        return self(ids, mask)


def extract_key_semantics(semantics: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None):
    """Key semantic feature ``f^k``: token-mean of ``semantics`` then a linear map.

    ``semantics`` is ``(..., C^s, N^l)``; returns ``(..., C^s)``.
    """
    return F.linear(semantics.mean(dim=-1), weight, bias)


def modulate(f_r: torch.Tensor, f_k: torch.Tensor, w1: torch.Tensor, w2: torch.Tensor,
             b1: torch.Tensor | None = None, b2: torch.Tensor | None = None, eps: float = 1e-5):
    """``(1 + W1 f_k) * (f_r - mu) / sigma + W2 f_k``.

    ``f_r`` is ``(B, C, N)``; ``mu`` and ``sigma`` are taken per channel over
    the token axis, with ``sigma`` floored at ``eps``. ``f_k`` is ``(B, C_k)``.
    """
    mu = f_r.mean(dim=-1, keepdim=True)
    var = (f_r - mu).pow(2).mean(dim=-1, keepdim=True)
    sigma = var.clamp_min(eps * eps).sqrt()
    scale = 1.0 + F.linear(f_k, w1, b1)
    shift = F.linear(f_k, w2, b2)
    return scale.unsqueeze(-1) * (f_r - mu) / sigma + shift.unsqueeze(-1)


class Modulation(nn.Module):
    def __init__(self, channels: int, eps: float):
        super().__init__()
        self.scale = nn.Linear(channels, channels)
        self.shift = nn.Linear(channels, channels)
        self.eps = eps
        nn.init.zeros_(self.scale.weight)
        nn.init.zeros_(self.scale.bias)
        nn.init.zeros_(self.shift.bias)

    def forward(self, h: torch.Tensor, f_k: torch.Tensor) -> torch.Tensor:
        # h: (B, N, C)
        out = modulate(h.transpose(1, 2), f_k, self.scale.weight, self.shift.weight,
                       self.scale.bias, self.shift.bias, self.eps)
        return out.transpose(1, 2)


class MapperBlock(nn.Module):
    """MSA -> MCA -> FFN; each sub-module is residual and then modulated."""

    def __init__(self, channels: int, heads: int, eps: float):
        super().__init__()
        self.msa = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.mca = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels))
        self.mod_msa = Modulation(channels, eps)
        self.mod_mca = Modulation(channels, eps)
        self.mod_ffn = Modulation(channels, eps)

    def forward(self, h, sem, f_k):
        h = self.mod_msa(h + self.msa(h, h, h, need_weights=False)[0], f_k)
        h = self.mod_mca(h + self.mca(h, sem, sem, need_weights=False)[0], f_k)
        h = self.mod_ffn(h + self.ffn(h), f_k)
        return h


class EmotionalMapper(nn.Module):
    """Maps a request ``(B, C^t, N^l)`` and semantics ``(B, C^s, N^l)`` to ``(B, C^s, N^l)``."""

    def __init__(self, config: MapperConfig | None = None):
        super().__init__()
        self.config = config or MapperConfig()
        c = self.config.semantic_channels
        self.lift = nn.Linear(self.config.request_channels, c)
        self.key = nn.Linear(c, c)
        self.blocks = nn.ModuleList(
            MapperBlock(c, self.config.heads, self.config.eps_norm) for _ in range(self.config.depth)
        )

    def key_semantics(self, semantics: torch.Tensor) -> torch.Tensor:
        return extract_key_semantics(semantics, self.key.weight, self.key.bias)

    def forward(self, request: torch.Tensor, semantics: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if request.shape[-2:] != (cfg.request_channels, cfg.max_len):
            raise ConfigurationError(f"request shape {tuple(request.shape)} does not match "
                                     f"({cfg.request_channels}, {cfg.max_len})")
        if semantics.shape[-2:] != (cfg.semantic_channels, cfg.max_len):
            raise ConfigurationError(f"semantics shape {tuple(semantics.shape)} does not match "
                                     f"({cfg.semantic_channels}, {cfg.max_len})")
        f_k = self.key_semantics(semantics)
        h = self.lift(request.transpose(1, 2))
        sem = semantics.transpose(1, 2)
        for block in self.blocks:
            h = block(h, sem, f_k)
        return h.transpose(1, 2)


def mapper_forward(request: torch.Tensor, semantics: torch.Tensor, mapper: EmotionalMapper,
                   params: dict | None = None) -> torch.Tensor:
    """Functional forward; ``params`` optionally overrides the mapper's tensors.

    Accepts single ``(C, N)`` inputs as well as batches.
    """
    single = request.dim() == 2
    if single:
        request, semantics = request.unsqueeze(0), semantics.unsqueeze(0)
    if request.shape[0] != semantics.shape[0]:
        raise ConfigurationError("request and semantics batch sizes differ")
    if params is None:
        out = mapper(request, semantics)
    else:
        out = torch.func.functional_call(mapper, params, (request, semantics))
    return out[0] if single else out
