"""Temporal-label conditioning: per-token feature embeddings added to token embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import DimMismatch


@dataclass(frozen=True)
class ConditioningConfig:
    d_model: int
    n_labels: int
    p_max: int = 2048
    r_buckets: int = 64
    t_max: int = 512
    d_embed: int = 32
    d_hidden: int = 128


@dataclass
class TemporalFeatures:
    abs_pos: np.ndarray
    rel_bucket: np.ndarray
    label: np.ndarray
    timestep: np.ndarray

    def __len__(self) -> int:
        return len(self.abs_pos)

    def as_tensors(self) -> tuple[torch.Tensor, ...]:
        return tuple(torch.as_tensor(a, dtype=torch.long) for a in (self.abs_pos, self.rel_bucket, self.label, self.timestep))


def rel_bucket(dist: np.ndarray, p_max: int = 2048, n_buckets: int = 64) -> np.ndarray:
    """Log-spaced buckets over [0, p_max): 0 -> bucket 0, larger distances share buckets."""
    d = np.clip(np.asarray(dist, dtype=np.float64), 0, p_max - 1)
    out = np.zeros(d.shape, dtype=np.int64)
    pos = d >= 1
    out[pos] = 1 + np.floor(np.log(d[pos]) / math.log(p_max) * (n_buckets - 2)).astype(np.int64)
    return np.minimum(out, n_buckets - 1)


def temporal_features(encoded, cfg: ConditioningConfig) -> TemporalFeatures:
    L = len(encoded.input_ids)
    t = np.arange(L)
    return TemporalFeatures(
        abs_pos=np.minimum(t, cfg.p_max - 1),
        rel_bucket=rel_bucket(L - 1 - t, cfg.p_max, cfg.r_buckets),
        label=np.clip(np.asarray(encoded.label_stamp, dtype=np.int64), 0, cfg.n_labels - 1),
        timestep=np.full(L, min(max(int(encoded.timestep_id), 0), cfg.t_max - 1), dtype=np.int64),
    )


class ConditioningModule(nn.Module):
    """Four embedding tables -> concat -> MLP -> zero-initialised output map."""

    def __init__(self, cfg: ConditioningConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.abs_emb = nn.Embedding(cfg.p_max, cfg.d_embed)
        self.rel_emb = nn.Embedding(cfg.r_buckets, cfg.d_embed)
        self.lbl_emb = nn.Embedding(cfg.n_labels, cfg.d_embed)
        self.time_emb = nn.Embedding(cfg.t_max, cfg.d_embed)
        self.mlp = nn.Sequential(
            nn.Linear(4 * cfg.d_embed, cfg.d_hidden),
            nn.GELU(),
            nn.Linear(cfg.d_hidden, cfg.d_model),
        )
        self.out = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("out."):
                    p.zero_()
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=g) * 0.02)

    def features_vector(self, feats: TemporalFeatures) -> torch.Tensor:
        a, r, z, tau = feats.as_tensors()
        e = torch.cat([self.abs_emb(a), self.rel_emb(r), self.lbl_emb(z), self.time_emb(tau)], dim=-1)
        return self.mlp(e)

    def forward(self, token_embeddings: torch.Tensor, feats: TemporalFeatures) -> torch.Tensor:
        return inject(token_embeddings, feats, self)


def inject(token_embeddings: torch.Tensor, feats: TemporalFeatures, params: ConditioningModule) -> torch.Tensor:
    """``x'_t = x_t + W * MLP(concat(e_abs, e_rel, e_lbl, e_time))``."""
    if token_embeddings.dim() != 2 or token_embeddings.shape[-1] != params.cfg.d_model:
        raise DimMismatch(f"expected (L, {params.cfg.d_model}) embeddings, got {tuple(token_embeddings.shape)}")
    if token_embeddings.shape[0] != len(feats):
        raise DimMismatch(f"{token_embeddings.shape[0]} embeddings for {len(feats)} feature rows")
    u = params.features_vector(feats).to(token_embeddings.dtype)
    return token_embeddings + params.out(u)
