"""Tiny adapter-instrumented reference transformer bundled for testing.

Every dense layer (attention q/k/v/o, FFN up/down) is wrapped so the frozen
projection and the low-rank delta are separate submodules: hooks can tap
the pre-delta output on ``.base`` and the residual sum on the wrapper.  The
adapter B factor starts at zero, so a freshly built model computes exactly
what its frozen weights compute.
"""

from __future__ import annotations

import torch
from torch import nn


class LoraLinear(nn.Module):
    """Frozen linear projection plus a trainable low-rank delta."""

    def __init__(self, d_in: int, d_out: int, rank: int):
        super().__init__()
        self.base = nn.Linear(d_in, d_out, bias=False)
        self.base.weight.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.randn(rank, d_in) / rank)
        self.lora_b = nn.Parameter(torch.zeros(d_out, rank))
        self.rank = rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.lora_a.T) @ self.lora_b.T


class Block(nn.Module):
    def __init__(self, d_model: int, d_ffn: int, n_heads: int, rank: int):
        super().__init__()
        self.n_heads = n_heads
        self.attn_q = LoraLinear(d_model, d_model, rank)
        self.attn_k = LoraLinear(d_model, d_model, rank)
        self.attn_v = LoraLinear(d_model, d_model, rank)
        self.attn_o = LoraLinear(d_model, d_model, rank)
        self.ffn_up = LoraLinear(d_model, d_ffn, rank)
        self.ffn_down = LoraLinear(d_ffn, d_model, rank)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.n_heads
        q = self.attn_q(x).view(b, t, h, d // h).transpose(1, 2)
        k = self.attn_k(x).view(b, t, h, d // h).transpose(1, 2)
        v = self.attn_v(x).view(b, t, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / (d // h) ** 0.5
        mask = torch.triu(torch.full((t, t), float("-inf")), diagonal=1)
        attn = torch.softmax(scores + mask, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.attn_o(ctx)
        return x + self.ffn_down(torch.relu(self.ffn_up(x)))


class ReferenceModel(nn.Module):
    """Two-layer causal transformer with adapters on all 12 dense sites."""

    def __init__(self, vocab: int = 32, d_model: int = 16, d_ffn: int = 32,
                 n_heads: int = 2, n_layers: int = 2, rank: int = 2,
                 seed: int = 1234):
        super().__init__()
        torch.manual_seed(seed)
        self.vocab = vocab
        self.embed = nn.Embedding(vocab, d_model)
        self.embed.weight.requires_grad_(False)
        self.layers = nn.ModuleList(
            Block(d_model, d_ffn, n_heads, rank) for _ in range(n_layers))
        self.head = nn.Linear(d_model, vocab, bias=False)
        self.head.weight.requires_grad_(False)
        self.rank = rank
        self.eval()

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.embed(tokens)
        for layer in self.layers:
            x = layer(x)
        return self.head(x)

    def frozen_param_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if not p.requires_grad)


def reference_dataset(n_samples: int = 10, seq_len: int = 12,
                      vocab: int = 32, seed: int = 555) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randint(0, vocab, (n_samples, seq_len), generator=gen)
