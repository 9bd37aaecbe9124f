"""A small pre-norm decoder-only LM exposing the hooks the pipeline needs.

Any backbone can stand in for :class:`ToyLM` as long as it offers the same
surface: ``forward(ids, inject_hook=..., capture_hidden=..., capture_attention=...,
patch=..., attn_block=...)`` returning :class:`LMOutput`, ``n_layers``,
``d_model``, and named ``nn.Linear`` projections for adapter attachment.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LayerOutOfRange, LengthOverflow, VocabOverflow

ATTN_TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj")
MLP_TARGETS = ("fc_in", "fc_out")


@dataclass(frozen=True)
class ToyLMConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class LMOutput:
    logits: torch.Tensor
    final_hidden: torch.Tensor
    hidden_states: list[torch.Tensor] = field(default_factory=list)
    attentions: list[torch.Tensor] = field(default_factory=list)


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor):
        # x is (L, d) or (..., L, d); leading dims are independent copies of the sequence
        heads = (*x.shape[:-1], self.n_heads, self.d_head)
        q = self.q_proj(x).view(heads).transpose(-2, -3)
        k = self.k_proj(x).view(heads).transpose(-2, -3)
        v = self.v_proj(x).view(heads).transpose(-2, -3)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        scores = scores.masked_fill(mask, float("-inf"))
        probs = scores.softmax(dim=-1)
        out = (probs @ v).transpose(-2, -3).reshape(*x.shape[:-1], -1)
        return self.o_proj(out), probs


class MLP(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.fc_in = nn.Linear(d_model, d_ff)
        self.fc_out = nn.Linear(d_ff, d_model)

    def forward(self, x):
        return self.fc_out(F.gelu(self.fc_in(x)))


class Block(nn.Module):
    def __init__(self, cfg: ToyLMConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = MLP(cfg.d_model, cfg.d_ff)

    def forward(self, x, mask):
        a, probs = self.attn(self.ln1(x), mask)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, probs


class ToyLM(nn.Module):
    """Decoder-only transformer over a single unbatched sequence of ids."""

    def __init__(self, cfg: ToyLMConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self._init(cfg.seed)

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    @property
    def d_model(self) -> int:
        return self.cfg.d_model

    def _init(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_"):
                    p.fill_(1.0)
                elif name == "tok_emb.weight":
                    # the head is tied to this table; unit-norm rows give it a usable logit range
                    p.copy_(torch.randn(p.shape, generator=g) * self.cfg.d_model ** -0.5)
                elif name.startswith("blocks.") and p.dim() == 2:
                    # fan-in scaling; at 0.02 the small blocks start near-linear and training stalls on some seeds
                    p.copy_(torch.randn(p.shape, generator=g) * p.shape[1] ** -0.5)
                else:
                    p.copy_(torch.randn(p.shape, generator=g) * 0.02)

    def forward(self, ids: torch.Tensor, inject_hook: Callable[[torch.Tensor], torch.Tensor] | None = None,
                capture_hidden: bool = False, capture_attention: bool = False,
                patch: dict[int, tuple[torch.Tensor, torch.Tensor]] | None = None,
                attn_block: torch.Tensor | None = None) -> LMOutput:
        """Run the model on ``ids`` of shape ``(L,)``.

        ``patch`` maps a layer index (0..n_layers) to ``(positions, rows)``;
        the hidden state entering that layer is overwritten at ``positions``.
        ``attn_block`` is an optional ``(L, L)`` boolean mask of extra
        query/key pairs that may not attend.
        """
        L = ids.shape[0]
        if L > self.cfg.max_positions:
            raise LengthOverflow(f"sequence of {L} exceeds {self.cfg.max_positions} positions")
        if L and (int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0):
            raise VocabOverflow("token id outside the vocabulary")
        if patch:
            bad = [l for l in patch if not 0 <= l <= self.n_layers]
            if bad:
                raise LayerOutOfRange(f"patch layers {bad} outside 0..{self.n_layers}")

        x = self.tok_emb(ids)
        if inject_hook is not None:
            x = inject_hook(x)
        x = x + self.pos_emb(torch.arange(L))
        mask = torch.ones(L, L, dtype=torch.bool).triu(1)
        if attn_block is not None:
            mask = mask | attn_block
            mask = mask & ~torch.eye(L, dtype=torch.bool)  # a token may always see itself
        hidden, attns = [], []
        for li, block in enumerate(self.blocks):
            x = _apply_patch(x, patch, li)
            if capture_hidden:
                hidden.append(x)
            x, probs = block(x, mask)
            if capture_attention:
                attns.append(probs)
        x = _apply_patch(x, patch, self.n_layers)
        if capture_hidden:
            hidden.append(x)
        h = self.ln_f(x)
        logits = h @ self.tok_emb.weight.T
        return LMOutput(logits, h, hidden, attns)

    def save(self, path) -> None:
        torch.save({"config": asdict(self.cfg), "state_dict": self.state_dict()}, path)

    @classmethod
    def load(cls, path) -> "ToyLM":
        blob = torch.load(path, weights_only=True)
        m = cls(ToyLMConfig(**blob["config"]))
        m.load_state_dict(blob["state_dict"])
        return m


def _apply_patch(x, patch, layer):
    if not patch or layer not in patch:
        return x
    pos, rows = patch[layer]
    x = x.clone()
    x[pos] = rows.to(x.dtype)
    return x
