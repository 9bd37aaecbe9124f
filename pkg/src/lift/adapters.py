"""Low-rank adapters on attention/MLP projections with staged rank growth."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NoTargetsFound, RankShrink
from .toylm import ATTN_TARGETS, MLP_TARGETS

INIT_STD = 0.02


@dataclass
class AdapterConfig:
    rank: int = 4
    alpha: float | None = None
    dropout: float = 0.05
    targets: tuple[str, ...] = ATTN_TARGETS + MLP_TARGETS
    frozen_rank_prefix: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = 2.0 * self.rank
        if not 0 <= self.frozen_rank_prefix < self.rank:
            raise ValueError("frozen_rank_prefix must be in [0, rank)")


class LoRALinear(nn.Module):
    """Frozen ``nn.Linear`` plus a trainable update ``(alpha / r) * B @ A``.

    ``A`` has shape ``(r, d_in)`` and ``B`` ``(d_out, r)``. Rank slices below
    ``frozen_prefix`` receive zero gradient.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float, generator: torch.Generator):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.alpha = float(alpha)
        self.dropout = nn.Dropout(dropout)
        self.enabled = True
        self.frozen_prefix = 0
        self.lora_A = nn.Parameter(torch.randn(rank, base.in_features, generator=generator) * INIT_STD)
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        self._hooks = []
        self._frozen_snapshot: tuple[torch.Tensor, torch.Tensor] | None = None

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def forward(self, x):
        y = self.base(x)
        if not self.enabled:
            return y
        return y + F.linear(F.linear(self.dropout(x), self.lora_A), self.lora_B) * self.scaling

    def n_trainable(self) -> int:
        return self.lora_A.numel() + self.lora_B.numel()

    def grow(self, r_new: int, generator: torch.Generator, alpha: float | None = None) -> None:
        r_old = self.rank
        if r_new <= r_old:
            raise RankShrink(f"cannot resize rank {r_old} -> {r_new}")
        A_old, B_old = self.lora_A.data, self.lora_B.data
        new_rows = torch.randn(r_new - r_old, A_old.shape[1], generator=generator) * INIT_STD
        A = torch.cat([A_old, new_rows.to(A_old.dtype)], 0)
        B = torch.cat([B_old, torch.zeros(B_old.shape[0], r_new - r_old, dtype=B_old.dtype)], 1)
        # keep alpha/r fixed across growth; otherwise the learned slice would be rescaled
        old_scaling = self.scaling
        self.rank = r_new
        self.alpha = old_scaling * r_new if alpha is None else float(alpha)
        self.lora_A = nn.Parameter(A)
        self.lora_B = nn.Parameter(B)
        self.set_frozen_prefix(r_old)

    def set_frozen_prefix(self, n: int) -> None:
        for h in self._hooks:
            h.remove()
        self._hooks = []
        self.frozen_prefix = n
        if n == 0:
            self._frozen_snapshot = None
            return
        mask_a = torch.ones_like(self.lora_A)
        mask_a[:n] = 0
        mask_b = torch.ones_like(self.lora_B)
        mask_b[:, :n] = 0
        self._hooks.append(self.lora_A.register_hook(lambda g, m=mask_a: g * m))
        self._hooks.append(self.lora_B.register_hook(lambda g, m=mask_b: g * m))
        self._frozen_snapshot = (self.lora_A.data[:n].clone(), self.lora_B.data[:, :n].clone())

    @torch.no_grad()
    def restore_frozen(self) -> None:
        """Re-impose the frozen slice after an optimizer step.

        Decoupled weight decay moves parameters even when their gradient is
        zero, so masking gradients alone does not keep the slice fixed.
        """
        if self._frozen_snapshot is None:
            return
        n = self.frozen_prefix
        a, b = self._frozen_snapshot
        self.lora_A.data[:n] = a
        self.lora_B.data[:, :n] = b


def adapter_modules(model: nn.Module) -> dict[str, LoRALinear]:
    return {name: m for name, m in model.named_modules() if isinstance(m, LoRALinear)}


def attach(model: nn.Module, cfg: AdapterConfig) -> nn.Module:
    """Freeze ``model`` and wrap every targeted projection in :class:`LoRALinear`."""
    for p in model.parameters():
        p.requires_grad_(False)
    g = torch.Generator().manual_seed(cfg.seed)
    targets = []
    for name, module in model.named_modules():
        for child_name, child in module.named_children():
            if child_name in cfg.targets and isinstance(child, nn.Linear):
                targets.append((module, child_name, child))
    if not targets:
        raise NoTargetsFound(f"no projections named {cfg.targets}")
    for parent, child_name, child in targets:
        setattr(parent, child_name, LoRALinear(child, cfg.rank, cfg.alpha, cfg.dropout, g))
    return model


def grow_rank(model: nn.Module, r_old: int, r_new: int, seed: int = 0) -> nn.Module:
    """Resize every adapter from ``r_old`` to ``r_new`` and freeze the old slice."""
    if r_new <= r_old:
        raise RankShrink(f"cannot resize rank {r_old} -> {r_new}")
    g = torch.Generator().manual_seed(seed)
    mods = adapter_modules(model)
    for name, m in mods.items():
        if m.rank != r_old:
            raise ValueError(f"adapter {name} has rank {m.rank}, expected {r_old}")
        m.grow(r_new, g)
    return model


def restore_frozen(model: nn.Module) -> None:
    for m in adapter_modules(model).values():
        m.restore_frozen()


def set_adapters_enabled(model: nn.Module, enabled: bool) -> None:
    for m in adapter_modules(model).values():
        m.enabled = enabled


def adapter_rank(model: nn.Module) -> int:
    ranks = {m.rank for m in adapter_modules(model).values()}
    if len(ranks) != 1:
        raise ValueError(f"inconsistent adapter ranks {ranks}")
    return ranks.pop()


def adapter_state(model: nn.Module) -> dict:
    mods = adapter_modules(model)
    return {
        "tensors": {f"{n}.{k}": getattr(m, k).detach().clone() for n, m in mods.items() for k in ("lora_A", "lora_B")},
        "rank": adapter_rank(model) if mods else 0,
        "alpha": {n: m.alpha for n, m in mods.items()},
        "frozen_rank_prefix": max((m.frozen_prefix for m in mods.values()), default=0),
    }


def load_adapter_state(model: nn.Module, state: dict) -> None:
    """Load tensors saved by :func:`adapter_state`, resizing adapters if needed."""
    mods = adapter_modules(model)
    for n, m in mods.items():
        A = state["tensors"][f"{n}.lora_A"]
        B = state["tensors"][f"{n}.lora_B"]
        m.rank = A.shape[0]
        m.alpha = state["alpha"][n]
        m.lora_A = nn.Parameter(A.clone())
        m.lora_B = nn.Parameter(B.clone())
        m.set_frozen_prefix(state.get("frozen_rank_prefix", 0))
