"""Loss terms: masked prompt CE, focal LM on the output span, focal label heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NoStampedPosition, NonFinite


@dataclass
class LossWeights:
    ce: float = 1.0
    out: float = 1.0
    cls: float = 0.5
    hist: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        vals = (self.ce, self.out, self.cls, self.hist, self.gamma)
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"loss weights must be finite and nonnegative: {vals}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.ce, self.out, self.cls, self.hist

    def to_dict(self) -> dict:
        return asdict(self)


class Heads(nn.Module):
    """Global label head and a history head, both ``d_model -> n_labels``."""

    def __init__(self, d_model: int, n_labels: int, shared: bool = False, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.cls = nn.Linear(d_model, n_labels)
        self.hist = self.cls if shared else nn.Linear(d_model, n_labels)
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    p.copy_(torch.randn(p.shape, generator=g) * 0.02)
                else:
                    p.zero_()

    @property
    def n_labels(self) -> int:
        return self.cls.out_features


def _shift(logits: torch.Tensor, input_ids: torch.Tensor, mask: torch.Tensor):
    # logits[t] predicts input_ids[t + 1]; the mask is read at the target position
    return logits[:-1], input_ids[1:], torch.as_tensor(mask, dtype=torch.bool)[1:]


def focal_from_logits(logits: torch.Tensor, targets: torch.Tensor, gamma: float) -> torch.Tensor:
    """Per-row ``-(1 - p)^gamma * log p`` for the target class."""
    logp = F.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if gamma == 0:
        return -logp
    return -((1 - logp.exp()) ** gamma) * logp


def prompt_ce(logits: torch.Tensor, input_ids: torch.Tensor, prompt_ce_mask) -> torch.Tensor:
    """Mean next-token CE over targets inside ``prompt_ce_mask`` (0 if none)."""
    lg, tgt, m = _shift(logits, input_ids, prompt_ce_mask)
    if not m.any():
        return logits.sum() * 0.0
    return F.cross_entropy(lg[m], tgt[m])


def focal_lm(logits: torch.Tensor, input_ids: torch.Tensor, output_mask, gamma: float) -> torch.Tensor:
    lg, tgt, m = _shift(logits, input_ids, output_mask)
    if not m.any():
        return logits.sum() * 0.0
    return focal_from_logits(lg[m], tgt[m], gamma).mean()


def last_stamped_position(output_mask) -> int:
    idx = torch.nonzero(torch.as_tensor(output_mask, dtype=torch.bool)).flatten()
    if idx.numel() == 0:
        raise NoStampedPosition("no output positions to pool")
    return int(idx[-1])


def focal_cls(hidden_states: torch.Tensor, output_mask, head: nn.Module, gold_label: int, gamma: float,
              class_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Focal CE of ``head`` applied to the hidden state at the last stamped position."""
    h = hidden_states[last_stamped_position(output_mask)]
    loss = focal_from_logits(head(h).unsqueeze(0), torch.tensor([gold_label]), gamma)[0]
    if class_weights is not None:
        loss = loss * class_weights[gold_label]
    return loss


def hist_pool(hidden_states: torch.Tensor, hist_mask) -> torch.Tensor | None:
    m = torch.as_tensor(hist_mask, dtype=torch.bool)
    if not m.any():
        return None
    return hidden_states[m].mean(dim=0)


def hist_cls(hidden_states: torch.Tensor, hist_mask, history_head: nn.Module, gold_label: int, gamma: float,
             class_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Focal CE from the mean hidden state over history tokens; 0 without history."""
    pooled = hist_pool(hidden_states, hist_mask)
    if pooled is None:
        return hidden_states.sum() * 0.0
    loss = focal_from_logits(history_head(pooled).unsqueeze(0), torch.tensor([gold_label]), gamma)[0]
    if class_weights is not None:
        loss = loss * class_weights[gold_label]
    return loss


def total_loss(terms, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of ``(ce, focal_lm, focal_cls, hist_cls)``."""
    vals = list(terms)
    if len(vals) != 4:
        raise ValueError("expected four loss terms")
    for v in vals:
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise NonFinite(f"non-finite loss term {v}")
    total = sum(w * v for w, v in zip(weights.as_tuple(), vals))
    return torch.as_tensor(total)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ce: torch.Tensor
    focal_lm: torch.Tensor
    focal_cls: torch.Tensor
    hist_cls: torch.Tensor
    flags: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        out = {k: float(getattr(self, k).detach()) for k in ("total", "ce", "focal_lm", "focal_cls", "hist_cls")}
        out.update(self.flags)
        return out


def inverse_frequency_weights(label_ids, n_labels: int) -> torch.Tensor:
    """Per-class weights ``N / (C * count)`` over the classes present; others get 1."""
    counts = torch.bincount(torch.as_tensor(list(label_ids), dtype=torch.long), minlength=n_labels).double()
    present = counts > 0
    w = torch.ones(n_labels, dtype=torch.float64)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w.float()
